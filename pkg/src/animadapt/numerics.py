"""Dense float64 kernels with analytic backward passes.

Every forward primitive here has a matching ``*_backward`` that returns the
gradients of a scalar loss with respect to the primitive's inputs, given the
gradient with respect to its output. Arrays are plain ``numpy.ndarray`` of
dtype float64; 2-D at the public surface, with an optional leading batch axis
where attention needs one (one slice per head).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Return (dL/da, dL/db) for c = a @ b."""
    return dc @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dc


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, with_bias: bool = True):
    """Return (dx, dw, db); db is None when ``with_bias`` is False."""
    dx, dw = matmul_backward(dy, x, w)
    db = dy.sum(axis=0, keepdims=True) if with_bias else None
    return dx, dw, db


def causal_mask(n: int) -> np.ndarray:
    """Boolean n x n mask, True where a query may attend (key index <= query index)."""
    return np.tril(np.ones((n, n), dtype=bool))


def softmax_rows(x: np.ndarray, causal: bool = False) -> np.ndarray:
    """Row-wise softmax over the last axis, optionally with a causal mask.

    Masked (future) positions receive exactly zero weight.
    """
    if causal:
        if x.shape[-1] != x.shape[-2]:
            raise ShapeError(f"causal mask requires square scores, got {x.shape}")
        x = np.where(causal_mask(x.shape[-1]), x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    # masked entries have y == 0, so they receive zero gradient automatically
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize each row to zero mean / unit variance, then apply gain and bias.

    Returns ``(y, cache)``; pass ``cache`` to :func:`layer_norm_backward`.
    """
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    if gain.shape != (1, x.shape[-1]) or bias.shape != (1, x.shape[-1]):
        raise ShapeError(
            f"layer_norm gain/bias must be (1, {x.shape[-1]}), got {gain.shape}, {bias.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    dgain = (dy * xhat).sum(axis=0, keepdims=True)
    dbias = dy.sum(axis=0, keepdims=True)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient through tanh given its *output* ``y``."""
    return dy * (1.0 - y * y)


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-6,
) -> float:
    """Compare an analytic gradient against central finite differences.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``.
    Returns max |analytic - numeric| / max(1, |numeric|) over all elements.
    """
    x = np.array(x, dtype=DTYPE, copy=True)
    value, analytic = f(x)
    if not np.isfinite(value):
        raise ValueError(f"grad_check: f(x) is not finite ({value})")
    analytic = np.asarray(analytic, dtype=DTYPE)
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)[0]
        flat[i] = orig - h
        fm = f(x)[0]
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
