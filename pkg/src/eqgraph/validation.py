"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def as_vector(values, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking length."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise DimensionError(f"{name} must have dimension {dim}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def frozen_vector(values, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Like :func:`as_vector` but returns a read-only copy."""
    a = np.array(as_vector(values, dim, name))
    a.flags.writeable = False
    return a


def as_points(values, name: str = "points") -> np.ndarray:
    """Coerce to an (n, 3) float64 array of 3-D points."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_positive(name: str, value) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
