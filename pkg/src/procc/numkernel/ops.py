"""Plain numeric ops on float64 arrays (no gradient tracking)."""

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


def as_tensor(x):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {a.shape}")
    return a


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(logits, axis=1):
    """Numerically stable softmax along ``axis`` (1 = per row, 0 = per column)."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains NaN or Inf")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=1):
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def resolve_kernel_size(k, d):
    """Round an even kernel length up to odd, staying within [1, d]."""
    k = max(1, int(k))
    if k % 2 == 0:
        k += 1
    while k > d and k > 1:
        k -= 2
    return k


def _windows(x, k):
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)


def conv1d_rows(x, kernel):
    """Same-length zero-padded cross-correlation of every row of ``x`` with ``kernel``."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64).ravel()
    k = kernel.size
    if x.size == 0 or k == 0:
        raise ValueError("conv1d on empty input")
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel length must be odd, got {k}")
    if k > x.shape[1]:
        raise ShapeError(f"kernel length {k} exceeds input length {x.shape[1]}")
    return _windows(x, k) @ kernel


def conv1d_same(x, kernel):
    """1-d version of :func:`conv1d_rows` for a single vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return conv1d_rows(x.reshape(1, -1), kernel)[0]


def cross_entropy(probs, labels, mask=None):
    """Mean negative log-likelihood over the rows selected by ``mask``.

    Rows of ``probs`` must be distributions. Probabilities are floored at
    1e-12 before the log. An empty selection gives 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).ravel()
    if not mask.any():
        return 0.0
    sums = probs[mask].sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("cross_entropy expects rows that sum to 1")
    sel = labels[mask]
    if np.any(sel < 0) or np.any(sel >= probs.shape[1]):
        raise IndexError(f"label out of range for {probs.shape[1]} classes")
    p = probs[mask][np.arange(sel.size), sel]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())
