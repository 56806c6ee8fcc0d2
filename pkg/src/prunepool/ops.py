"""Dense-tensor forward/backward primitives for the five layer kinds the
pipeline uses (conv2d, batchnorm, relu, globalavgpool, linear) plus the two
loss heads (softmax cross-entropy, base-2 KL distillation).

Everything is a pure function over numpy arrays: forward ops return
``(output, cache)`` and backward ops consume the cache, so callers own all
state. Computation happens in the dtype of the inputs (f32 for normal runs,
f64 for gradient checking).
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-9  # floor for probabilities inside logarithms
LN2 = float(np.log(2.0))

DTYPES = {"f32": np.float32, "f64": np.float64}


def assert_finite(arr, what: str) -> None:
    """Raise NonFiniteError if arr contains NaN or Inf. Cheap full scan."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"{bad} non-finite values in {what}")


# ---------------------------------------------------------------------------
# conv2d


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(
            f"conv output collapses: input {h}x{w}, K={k}, stride={stride}, pad={padding}"
        )
    return ho, wo


def _im2col(x, k, stride, padding):
    """(N,C,H,W) -> column matrix (N*Ho*Wo, C*K*K) plus output dims."""
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, K, K)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, b=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of NCHW input with (Cout,Cin,K,K) kernels.

    Returns (y, cache); cache feeds conv2d_backward.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4D input/weight, got {x.shape}/{w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: input C={x.shape[1]}, weight Cin={w.shape[1]}")
    n = x.shape[0]
    cout, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    y = cols @ w.reshape(cout, -1).T
    if b is not None:
        y += b
    y = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    cache = (cols, x.shape, w, b is not None, stride, padding, ho, wo)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    """Gradients of conv2d_forward: returns (dx, dw, db). db is None without bias."""
    cols, x_shape, w, has_bias, stride, padding, ho, wo = cache
    n, c, h, width = x_shape
    cout, _, k, _ = w.shape
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy_mat.sum(axis=0) if has_bias else None
    dcols = dy_mat @ w.reshape(cout, -1)
    d6 = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    hp, wp = h + 2 * padding, width + 2 * padding
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += d6[:, :, ki, kj]
    dx = dxp[:, :, padding : padding + h, padding : padding + width]
    return np.ascontiguousarray(dx), dw, db


def masked_conv2d_forward(x, w, b, stride, padding, mask_in, mask_out):
    """conv2d over full-width tensors where masked channels are skipped.

    Output channels with mask_out=0 are exactly zero; input channels with
    mask_in=0 contribute nothing (their weight columns are never read).
    """
    mask_in = np.asarray(mask_in, dtype=bool)
    mask_out = np.asarray(mask_out, dtype=bool)
    if x.shape[1] != mask_in.size:
        raise ShapeMismatch(f"mask_in length {mask_in.size} != input channels {x.shape[1]}")
    if w.shape[0] != mask_out.size:
        raise ShapeMismatch(f"mask_out length {mask_out.size} != output channels {w.shape[0]}")
    ki = np.flatnonzero(mask_in)
    ko = np.flatnonzero(mask_out)
    y_sub, sub_cache = conv2d_forward(
        np.ascontiguousarray(x[:, ki]),
        np.ascontiguousarray(w[ko][:, ki]),
        None if b is None else b[ko],
        stride,
        padding,
    )
    n, _, ho, wo = y_sub.shape
    y = np.zeros((n, mask_out.size, ho, wo), dtype=x.dtype)
    y[:, ko] = y_sub
    return y, (sub_cache, ki, ko, x.shape, w.shape, b is not None)


def masked_conv2d_backward(dy, cache):
    """Gradients of masked_conv2d_forward, scattered back to full width.

    Masked rows/columns of dw, masked entries of db, and masked input
    channels of dx are exactly zero.
    """
    sub_cache, ki, ko, x_shape, w_shape, has_bias = cache
    dx_sub, dw_sub, db_sub = conv2d_backward(np.ascontiguousarray(dy[:, ko]), sub_cache)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, ki] = dx_sub
    dw = np.zeros(w_shape, dtype=dy.dtype)
    dw[np.ix_(ko, ki)] = dw_sub
    db = None
    if has_bias:
        db = np.zeros(w_shape[0], dtype=dy.dtype)
        db[ko] = db_sub
    return dx, dw, db


# ---------------------------------------------------------------------------
# batchnorm

BN_MODES = ("train", "eval", "accumulate")


def batchnorm_forward(
    x,
    gamma,
    beta,
    mode: str,
    running_mean=None,
    running_var=None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    accum_count: int = 0,
):
    """Per-channel batch normalization over an NCHW tensor.

    Modes:
      train      - normalize by batch statistics, EMA-update running stats.
      eval       - normalize by previously tracked running stats.
      accumulate - normalize by batch statistics, update running stats with a
                   cumulative (equal-weight) average; used for post-training
                   recalibration so that n identical batches give the exact
                   batch statistics rather than an EMA transient.

    Returns (y, cache, stats) where stats is None in eval mode and otherwise
    (new_running_mean, new_running_var, new_accum_count). Stored variances
    are floored at eps so they stay strictly positive.
    """
    if mode not in BN_MODES:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim != 4:
        raise ShapeMismatch(f"batchnorm expects NCHW input, got shape {x.shape}")
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise ShapeMismatch("eval-mode batchnorm requires populated running stats")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return y, ("eval", xhat, gamma, inv), None

    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    if mode == "train":
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var
        stats = (new_mean, np.maximum(new_var, eps), accum_count)
    else:  # accumulate
        count = accum_count + 1
        new_mean = running_mean + (mu - running_mean) / count
        new_var = running_var + (var - running_var) / count
        stats = (new_mean, np.maximum(new_var, eps), count)
    return y, ("batch", xhat, gamma, inv), stats


def batchnorm_backward(dy, cache):
    """Gradients of batchnorm_forward: returns (dx, dgamma, dbeta).

    Batch-stat modes differentiate through the batch mean/variance; eval
    mode treats the running stats as constants.
    """
    kind, xhat, gamma, inv = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if kind == "eval":
        dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# relu / global average pool / linear


def relu_forward(x):
    return np.maximum(x, 0), (x > 0)


def relu_backward(dy, cache):
    return dy * cache


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeMismatch(f"globalavgpool expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy, cache):
    n, c, h, w = cache
    return np.broadcast_to(dy[:, :, None, None], (n, c, h, w)) / (h * w)


def linear_forward(x, w, b):
    """x: (N, Cin); w: (Cout, Cin); b: (Cout,)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear mismatch: input {x.shape}, weight {w.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# losses


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy in natural-log units.

    labels are integer class indices, one per sample. Returns
    (loss, dlogits) with dlogits = (softmax - onehot) / N.
    """
    n, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"label index out of range for {classes} classes")
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    loss = float((lse - logits[np.arange(n), labels]).mean())
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def kl_distill_loss(student_probs, teacher_probs, eps: float = PROB_FLOOR):
    """Mean over the batch of sum_i p_s * log2(p_s / p_t), in bits.

    The teacher distribution is a constant: no gradient flows into it. The
    returned gradient is taken with respect to the *logits* that produced
    student_probs (softmax folded in), valid wherever the eps floor inside
    the logarithms is inactive. Zero entries of p_s contribute zero.

    Returns (loss, dstudent_logits).
    """
    if student_probs.shape != teacher_probs.shape:
        raise ShapeMismatch(
            f"probability shapes differ: {student_probs.shape} vs {teacher_probs.shape}"
        )
    n = student_probs.shape[0]
    log_ratio = (
        np.log2(np.maximum(student_probs, eps)) - np.log2(np.maximum(teacher_probs, eps))
    )
    per_sample = (student_probs * log_ratio).sum(axis=1)
    loss = float(per_sample.mean())
    dlogits = student_probs * (log_ratio - per_sample[:, None]) / n
    return loss, dlogits
