"""Momentum SGD over named parameter dictionaries."""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError


def decay_weights_only(name: str) -> bool:
    """Default weight-decay filter: conv/linear weights, not biases or BN affine."""
    return name.endswith(".weight")


def decay_weights_and_affine(name: str) -> bool:
    """Decay conv/linear weights plus BN affine (base and branch copies).

    Branch affine is each sub-network's private logit-scale knob; leaving it
    undecayed lets a distillation chain sharpen its members until their
    softmax saturates and the KL gradient dies.
    """
    return name.endswith((".weight", ".gamma", ".beta"))


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Per-epoch cosine decay from base toward zero; epoch is 1-based."""
    return 0.5 * base * (1.0 + math.cos(math.pi * (epoch - 1) / max(total_epochs, 1)))


class SGD:
    """Classic momentum SGD: v = mu*v + g + wd*w; w -= lr*v.

    Velocities are kept per parameter name, so sub-network views that
    accumulate into shared full-width gradients all drive one buffer.
    Updates are in place and deterministic for identical inputs.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
                 decay_filter=decay_weights_only):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_filter = decay_filter
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None):
        """Apply one update to every parameter that has a gradient entry."""
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}; aborting update")
            w = params[name]
            if self.weight_decay and self.decay_filter(name):
                g = g + self.weight_decay * w
            if self.momentum:
                v = self.velocities.get(name)
                if v is None:
                    v = np.zeros_like(w)
                    self.velocities[name] = v
                v *= self.momentum
                v += g
            else:
                v = g
            w -= lr * v
