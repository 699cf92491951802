"""Input validation helpers for array arguments.

Thin wrappers used by the functional API and the estimators alike: they
coerce to float64/int64 working dtypes, enforce shape and finiteness, and
raise ValueError with the offending argument named.
"""

from __future__ import annotations

import numpy as np


def as_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array with finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got ndim={X.ndim}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def as_vector(z, dim: int | None = None, name: str = "z") -> np.ndarray:
    """Coerce to a 1-D float64 array; optionally enforce its length."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size < 1:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and z.size != dim:
        raise ValueError(f"{name} has dimension {z.size}, expected {dim}")
    return z


def as_labels(y, n: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce to a 1-D int64 label array; optionally enforce its length."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={y.ndim}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        rounded = np.asarray(y, dtype=np.float64)
        if not np.all(rounded == np.round(rounded)):
            raise ValueError(f"{name} must contain integer class identifiers")
    y = y.astype(np.int64)
    if n is not None and y.size != n:
        raise ValueError(f"{name} has length {y.size}, expected {n}")
    return y


def check_nonzero_rows(X: np.ndarray, name: str = "X") -> np.ndarray:
    """Return row norms, raising if any row has zero norm."""
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"{name} has zero-norm row at index {int(zero[0])}")
    return norms
