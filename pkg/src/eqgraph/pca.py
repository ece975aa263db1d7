"""Descriptor compression by principal component analysis.

Raw descriptors are compressed to a small number of coefficients (20 by
default) before model building; the same basis, stored with the model,
projects probe and gallery descriptors at match time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DimensionError

__all__ = ["PcaBasis", "pca_fit", "pca_project", "DescriptorPca"]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """Mean vector plus orthonormal component rows (highest variance first)."""

    mean: np.ndarray
    components: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comp = np.asarray(self.components, dtype=np.float64)
        if mean.ndim != 1 or comp.ndim != 2 or comp.shape[1] != mean.shape[0]:
            raise DimensionError(f"inconsistent basis shapes {mean.shape}, {comp.shape}")
        if comp.shape[0] > comp.shape[1]:
            raise DimensionError("more components than input dimensions")
        gram = comp @ comp.T
        if np.max(np.abs(gram - np.eye(comp.shape[0]))) > _ORTHO_TOL:
            raise ValueError("component rows are not orthonormal")
        mean = np.array(mean)
        comp = np.array(comp)
        mean.flags.writeable = False
        comp.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def d_raw(self) -> int:
        return self.mean.shape[0]


def pca_fit(vectors, k: int = 20) -> PcaBasis:
    """Top-k principal directions of the sample, by descending variance.

    The sign of each component row is fixed by making its largest-magnitude
    entry positive, so the basis is deterministic.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"vectors must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > d:
        raise ValueError(f"k={k} exceeds the input dimension {d}")
    if k > n:
        raise ValueError(f"k={k} exceeds the sample count {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    for row in components:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    return PcaBasis(mean=mean, components=components)


def pca_project(vectors, basis: PcaBasis) -> np.ndarray:
    """Project one vector (or a stack of vectors) onto the basis."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != basis.d_raw:
        raise DimensionError(
            f"vector dimension {x.shape[-1]} does not match basis dimension {basis.d_raw}"
        )
    return (x - basis.mean) @ basis.components.T


class DescriptorPca(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper around :func:`pca_fit` / :func:`pca_project`."""

    def __init__(self, n_components: int = 20):
        self.n_components = n_components

    def fit(self, X, y=None):
        self.basis_ = pca_fit(X, k=self.n_components)
        self.mean_ = self.basis_.mean
        self.components_ = self.basis_.components
        return self

    def transform(self, X):
        if not hasattr(self, "basis_"):
            raise NotFittedError("DescriptorPca is not fitted")
        return pca_project(X, self.basis_)
