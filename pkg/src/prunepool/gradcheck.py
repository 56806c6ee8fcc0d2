"""Central finite-difference oracle for validating analytic gradients."""

from __future__ import annotations

import numpy as np

# cbrt(eps) ~ 6e-6 balances roundoff against truncation for O(1) losses;
# 1e-5 keeps conv-sized reductions comfortably under 1e-6 relative error.
DEFAULT_H = 1e-5
# Elements smaller than this are compared on an absolute scale; keeps the
# relative error meaningful where the true gradient is ~0.
REL_FLOOR = 1e-3


def finite_difference_gradcheck(fn, inputs, analytic, h: float = DEFAULT_H,
                                rel_floor: float = REL_FLOOR) -> float:
    """Worst relative error between analytic gradients and central differences.

    fn        -- zero-argument callable returning a scalar loss; it must read
                 the arrays in `inputs` so that in-place perturbations are
                 visible.
    inputs    -- {name: f64 array} perturbed elementwise (restored after).
    analytic  -- {name: array} analytic gradient of fn wrt each input.

    Central differences (f(x+h) - f(x-h)) / 2h are compared elementwise; the
    per-element relative error uses max(|analytic|, |numeric|, rel_floor) as
    denominator. Requires f64 inputs (f32 has nowhere near the headroom).
    """
    worst = 0.0
    for name, x in inputs.items():
        if x.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 inputs; {name!r} is {x.dtype}")
        g = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(g[i]), abs(numeric), rel_floor)
            worst = max(worst, abs(g[i] - numeric) / denom)
    return worst
