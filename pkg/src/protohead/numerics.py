"""Dense kernels used throughout the head: cosine rows, row softmax, top-k mean.

All kernels validate their inputs at the boundary (finiteness, shapes) and
compute in float64. Batched variants accept a leading sample axis.
"""
from __future__ import annotations

import numpy as np

from .errors import (
    KOutOfRange,
    NonFiniteValue,
    NonPositiveTemperature,
    ShapeMismatch,
    ZeroNormRow,
)

EPS_NORM = 1e-12


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return arr


def row_norms(a: np.ndarray) -> np.ndarray:
    """L2 norm of each row; raises if any row is numerically zero."""
    norms = np.linalg.norm(a, axis=-1)
    if np.any(norms < EPS_NORM):
        raise ZeroNormRow(f"row norm below {EPS_NORM}")
    return norms


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between the rows of a [P x c] and b [Q x c]."""
    a = require_finite("a", np.asarray(a, dtype=np.float64))
    b = require_finite("b", np.asarray(b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch("cosine_rows expects 2-D inputs")
    if a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    an = a / row_norms(a)[:, None]
    bn = b / row_norms(b)[:, None]
    return an @ bn.T


def softmax_rows(m: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m / tau, computed with max subtraction."""
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    m = require_finite("m", np.asarray(m, dtype=np.float64))
    z = m / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def topk_mean(v: np.ndarray, k: int) -> float:
    """Mean of the k largest entries of a vector; ties go to the lower index."""
    v = require_finite("v", np.asarray(v, dtype=np.float64))
    if v.ndim != 1:
        raise ShapeMismatch("topk_mean expects a vector")
    if not 1 <= k <= v.shape[0]:
        raise KOutOfRange(f"k={k} outside [1, {v.shape[0]}]")
    idx = topk_indices(v, k)
    return float(v[idx].mean())


def topk_indices(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, lowest index first among ties."""
    # stable sort on -v keeps the earlier index ahead for equal values
    return np.argsort(-v, kind="stable")[:k]


def topk_mean_columns(m: np.ndarray, k: int) -> np.ndarray:
    """topk_mean applied to every column of m [I x N] (or [S x I x N])."""
    m = np.asarray(m, dtype=np.float64)
    rows = m.shape[-2]
    if not 1 <= k <= rows:
        raise KOutOfRange(f"k={k} outside [1, {rows}]")
    part = np.partition(m, rows - k, axis=-2)[..., rows - k :, :]
    return part.mean(axis=-2)


def logsumexp(v: np.ndarray) -> float:
    v = np.asarray(v, dtype=np.float64)
    c = v.max()
    return float(c + np.log(np.exp(v - c).sum()))
