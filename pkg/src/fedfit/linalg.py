"""Dense linear algebra and scalar statistical primitives.

Vectors and matrices are plain float64 numpy arrays, validated at the
boundary: construction rejects NaN/Inf so numeric garbage fails at ingestion
instead of deep inside an iteration. All operations are pure functions over
immutable inputs and safe to share across threads.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    DimensionMismatchError,
    NonFiniteValueError,
    SingularInformationError,
)

__all__ = [
    "vector",
    "matrix",
    "mat_vec",
    "mat_t_vec",
    "solve_spd",
    "invert_spd",
    "norm2",
    "normal_sf",
]

# Relative tolerance for the symmetry precondition of the SPD routines.
SYMMETRY_RTOL = 1e-10


def vector(values) -> np.ndarray:
    """Build a 1-D float64 vector, rejecting non-finite entries."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteValueError("vector contains NaN or Inf")
    return v


def matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a 2-D float64 matrix, rejecting non-finite entries.

    ``values`` may be nested sequences, or a flat row-major sequence together
    with explicit ``rows``/``cols``.
    """
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise DimensionMismatchError(
                f"{m.size} values cannot fill a {rows}x{cols} matrix"
            )
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteValueError("matrix contains NaN or Inf")
    return m


def mat_vec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product m @ x with explicit conformance checking."""
    if m.ndim != 2 or x.ndim != 1 or m.shape[1] != x.shape[0]:
        raise DimensionMismatchError(
            f"cannot multiply matrix of shape {m.shape} by vector of length {x.shape}"
        )
    return m @ x

def mat_t_vec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Transpose product m.T @ x with explicit conformance checking."""
    if m.ndim != 2 or x.ndim != 1 or m.shape[0] != x.shape[0]:
        raise DimensionMismatchError(
            f"cannot multiply transpose of shape {m.shape} by vector of length {x.shape}"
        )
    return m.T @ x


def _check_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {a.shape}")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale and float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * scale:
        raise DimensionMismatchError("matrix is not symmetric")


def _cholesky(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(
            f"matrix of shape {a.shape} is not positive definite: {exc}"
        ) from exc


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite ``a`` via Cholesky."""
    _check_symmetric(a)
    if b.ndim != 1 or b.shape[0] != a.shape[0]:
        raise DimensionMismatchError(
            f"right-hand side of length {b.shape} does not conform to {a.shape}"
        )
    low = _cholesky(0.5 * (a + a.T))
    y = np.linalg.solve(low, b)
    return np.linalg.solve(low.T, y)


def invert_spd(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix, symmetrized exactly."""
    _check_symmetric(a)
    low = _cholesky(0.5 * (a + a.T))
    low_inv = np.linalg.solve(low, np.eye(a.shape[0]))
    inv = low_inv.T @ low_inv
    return 0.5 * (inv + inv.T)


def norm2(x: np.ndarray) -> float:
    """Euclidean norm; 0.0 for the empty vector."""
    if x.size == 0:
        return 0.0
    return float(np.linalg.norm(x))


def normal_sf(z: float) -> float:
    """Upper-tail standard normal probability P(Z > z)."""
    if not math.isfinite(z):
        raise NonFiniteValueError("normal_sf requires a finite argument")
    return 0.5 * math.erfc(z / math.sqrt(2.0))
