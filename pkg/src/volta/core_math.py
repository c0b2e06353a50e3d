"""Stable dense primitives and the calculus of sphere normalization.

Everything here works on float64 numpy arrays. Vector operations accept a
trailing axis so the same function serves one sample or a batch of rows.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError

NORM_FLOOR = 1e-12


def as_f64(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def log_sum_exp(x, axis: int = -1) -> np.ndarray | float:
    """Return ``log(sum(exp(x)))`` along ``axis`` without overflow.

    The maximum is subtracted before exponentiation, so inputs with
    magnitudes up to several hundred are handled exactly.
    """
    x = as_f64(x)
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def softmax(x, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax along ``axis``."""
    x = as_f64(x)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = as_f64(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _norms(v: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(r < NORM_FLOOR):
        raise DegenerateInputError(
            f"cannot normalize a vector with norm below {NORM_FLOOR:g}"
        )
    return r


def l2_normalize(v) -> np.ndarray:
    """Scale each vector (last axis) to unit Euclidean norm."""
    v = as_f64(v, "v")
    return v / _norms(v)


def normalize_vjp(v, g) -> np.ndarray:
    """Vector-Jacobian product of ``v -> v / |v|``.

    Returns ``(I - z z^T) g / |v|`` with ``z = v / |v|``, row by row.
    """
    v = as_f64(v, "v")
    g = as_f64(g, "g")
    if v.shape != g.shape:
        raise InvalidArgumentError(f"shape mismatch: v {v.shape} vs g {g.shape}")
    r = _norms(v)
    z = v / r
    radial = np.sum(z * g, axis=-1, keepdims=True)
    return (g - radial * z) / r


def _check_2d(a: np.ndarray, name: str) -> None:
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {a.shape}")


def matvec(a, x) -> np.ndarray:
    a, x = as_f64(a, "a"), as_f64(x, "x")
    _check_2d(a, "a")
    if x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise InvalidArgumentError(f"cannot multiply {a.shape} by vector {x.shape}")
    return a @ x


def matmul(a, b) -> np.ndarray:
    a, b = as_f64(a, "a"), as_f64(b, "b")
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def outer(x, y) -> np.ndarray:
    x, y = as_f64(x, "x"), as_f64(y, "y")
    if x.ndim != 1 or y.ndim != 1:
        raise InvalidArgumentError("outer expects two vectors")
    return np.outer(x, y)


def transpose(a) -> np.ndarray:
    a = as_f64(a, "a")
    _check_2d(a, "a")
    return np.ascontiguousarray(a.T)
