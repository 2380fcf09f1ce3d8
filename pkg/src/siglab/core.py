"""Dense f64 kernels with a fixed reduction order.

Every dot product is accumulated strictly left to right over the shared
dimension and every reduction goes through :func:`ordered_sum`, so results
are bit-reproducible for a given build and a sub-block of a product is
bit-identical to the same entries of the full product.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, ZeroRow

ZERO_NORM = 1e-30


def as_matrix(m) -> np.ndarray:
    """Coerce to a 2-D float64 array (copying only when needed)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeMismatch(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with each entry summed left to right over k.

    The accumulation runs over outer products ``a[:, k] * b[k, :]`` so each
    output entry sees exactly ``((a0*b0 + a1*b1) + a2*b2) + ...``, the same
    as a scalar triple loop.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    out = a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def transpose(m) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(m).T)


def add(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(m, s: float) -> np.ndarray:
    return as_matrix(m) * float(s)


def ordered_sum(a) -> float:
    """Sum of all entries in row-major order, strictly left to right."""
    flat = np.ravel(np.asarray(a, dtype=np.float64))
    if flat.size == 0:
        return 0.0
    return float(np.cumsum(flat)[-1])


def row_sums(m) -> np.ndarray:
    """Per-row left-to-right sums."""
    m = as_matrix(m)
    return np.cumsum(m, axis=1)[:, -1].copy()


def col_sums(m) -> np.ndarray:
    """Per-column top-to-bottom sums."""
    m = as_matrix(m)
    return np.cumsum(m, axis=0)[-1, :].copy()


def row_norms(m) -> np.ndarray:
    m = as_matrix(m)
    return np.sqrt(row_sums(m * m))


def l2_normalize_rows(m) -> np.ndarray:
    m = as_matrix(m)
    norms = row_norms(m)
    if np.any(norms < ZERO_NORM):
        bad = int(np.argmax(norms < ZERO_NORM))
        raise ZeroRow(f"row {bad} has (near) zero norm")
    return m / norms[:, None]


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))), overflow-free for any finite input.

    Accepts scalars or arrays; scalars come back as Python floats.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = -np.log1p(np.exp(-arr[pos]))
    neg = ~pos
    out[neg] = arr[neg] - np.log1p(np.exp(arr[neg]))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid(x):
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    neg = ~pos
    e = np.exp(arr[neg])
    out[neg] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def row_log_softmax(m) -> np.ndarray:
    """Row-wise log-softmax, stabilized by subtracting each row's max."""
    m = as_matrix(m)
    shifted = m - np.max(m, axis=1, keepdims=True)
    lse = np.log(row_sums(np.exp(shifted)))
    return shifted - lse[:, None]


def row_softmax(m) -> np.ndarray:
    return np.exp(row_log_softmax(m))
