"""Dense array ops with hand-written backward passes.

Every trainable piece of the back-end is expressed with these functions.
Forward functions return whatever the matching ``*_backward`` needs, and
backward functions take the upstream gradient first.

Seeding: all randomness flows through :func:`make_rng`, a Philox
(counter-based) generator keyed by a 64-bit seed.  Child seeds are derived
with :func:`mix_seed`, a SplitMix64 finalizer over ``base ^ golden * (i+1)``.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix_seed(base: int, index: int) -> int:
    """Derive a child seed from ``(base, index)`` with the SplitMix64 mixer."""
    z = ((base & _MASK64) ^ ((_GOLDEN * (index + 1)) & _MASK64)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for ``seed``, optionally narrowed by child indices."""
    s = seed & _MASK64
    for i in path:
        s = mix_seed(s, i)
    return np.random.Generator(np.random.Philox(key=s))


def as_tensor(x, dtype=np.float64, allow_nonfinite: bool = False) -> np.ndarray:
    """Convert to a contiguous float array, rejecting NaN/Inf."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


# matmul ---------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Return ``(dA, dB)`` for ``C = A @ B`` (leading batch axes summed into dB)."""
    da = grad @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ grad
    while db.ndim > b.ndim:
        db = db.sum(axis=0)
    return da, db


# relu -----------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad, 0)


# softmax --------------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty input")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(grad: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. the softmax input, given its output ``y``."""
    return y * (grad - (grad * y).sum(axis=axis, keepdims=True))


# dropout --------------------------------------------------------------------

def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout.  Returns ``(out, mask)``; mask is None when inactive.

    The mask already carries the ``1/(1-p)`` scale, so the backward pass is
    just ``grad * mask``.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def dropout_backward(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad if mask is None else grad * mask


# gradient verification ------------------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    atol: float = 1e-12,
) -> dict[str, float]:
    """Compare analytic gradients to central differences, one entry at a time.

    For each parameter group the reported error is
    ``max|analytic - numeric| / max(max|numeric|, 1e-12)``.  Differences at or
    below ``atol`` count as exact agreement; this absorbs round-off on
    gradients that are structurally zero (e.g. a bias every softmax input
    shares).

    ``params`` is perturbed in place and restored afterwards.
    """
    report = {}
    for name, theta in params.items():
        if theta.dtype != np.float64:
            raise ParameterError(f"{name}: gradient checks need float64 parameters")
        grad = np.asarray(analytic[name])
        if grad.shape != theta.shape:
            raise DimensionError(f"{name}: gradient shape {grad.shape} != {theta.shape}")
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn(params))
            flat[i] = orig - h
            lm = float(loss_fn(params))
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"{name}[{i}]: non-finite loss")
            nflat[i] = (lp - lm) / (2.0 * h)
        diff = float(np.max(np.abs(grad - numeric))) if theta.size else 0.0
        if diff <= atol:
            report[name] = 0.0
        else:
            scale = max(float(np.max(np.abs(numeric))), 1e-12)
            report[name] = diff / scale
    return report
