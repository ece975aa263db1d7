"""One-to-one descriptor correspondence between two ensembles.

Descriptors are first matched by dissimilarity alone, then a rigid
transform between the key-point sets is fitted by least squares and
iteratively re-estimated on the geometric inliers (a consensus loop).
Finally each descriptor is re-matched only against descriptors whose
key-points lie in the vicinity of its transformed location, and the result
is made one-to-one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import CorrespondenceError, DegenerateGeometryError, DimensionError
from .types import Descriptor, Ensemble
from .validation import as_points, check_positive

__all__ = [
    "CorrespondenceParams",
    "CorrespondencePair",
    "CorrespondenceSet",
    "RigidTransform",
    "descriptor_dissimilarity",
    "initial_correspondence",
    "rigid_fit",
    "split_inliers",
    "correspond_ensembles",
]

_ORTHO_TOL = 1e-9
_DEGENERATE_REL_TOL = 1e-9


@dataclass(frozen=True)
class CorrespondenceParams:
    """Tuning knobs of the consensus loop.

    e_th: inlier threshold on the key-point transformation error (mm).
    max_iters: cap on fit/split rounds.
    convergence_eps: stop once ||dR||_F + ||dt|| falls below this.
    vicinity_radius: search radius (mm) for the final re-correspondence.
    """

    e_th: float = 4.0
    max_iters: int = 30
    convergence_eps: float = 1e-4
    vicinity_radius: float = 8.0

    def __post_init__(self):
        check_positive("e_th", self.e_th)
        check_positive("max_iters", self.max_iters)
        check_positive("convergence_eps", self.convergence_eps)
        check_positive("vicinity_radius", self.vicinity_radius)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation; the rotation must be proper within 1e-9."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DimensionError(f"bad transform shapes {r.shape}, {t.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r = np.array(r)
        t = np.array(t)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class CorrespondencePair:
    """A matched descriptor pair with its dissimilarity and inlier flag."""

    a: Descriptor
    b: Descriptor
    dissim: float
    inlier: bool = True


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Final one-to-one pairs plus the converged rigid transform."""

    pairs: tuple[CorrespondencePair, ...]
    transform: RigidTransform

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)


def descriptor_dissimilarity(a: Descriptor, b: Descriptor) -> float:
    """Element-wise sum of absolute differences between the two vectors."""
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.sum(np.abs(a.vector - b.vector)))


def _dissim_matrix(n1: Ensemble, n2: Ensemble) -> np.ndarray:
    if n1.dim != n2.dim:
        raise DimensionError(f"dimension mismatch: {n1.dim} vs {n2.dim}")
    return cdist(n1.vectors(), n2.vectors(), metric="cityblock")


def initial_correspondence(n1: Ensemble, n2: Ensemble) -> list[CorrespondencePair]:
    """Pair every descriptor of ``n1`` with its least-dissimilar one in ``n2``.

    Several sources may share a target at this stage; uniqueness is only
    enforced by the final re-correspondence step.
    """
    d = _dissim_matrix(n1, n2)
    targets = np.argmin(d, axis=1)  # first minimum = lowest index on ties
    return [
        CorrespondencePair(n1.descriptors[i], n2.descriptors[j], float(d[i, j]))
        for i, j in enumerate(targets)
    ]


def rigid_fit(pairs: Sequence[tuple]) -> RigidTransform:
    """Least-squares rigid transform taking source key-points onto targets.

    Closed-form solution via SVD of the cross-covariance with reflection
    correction, so the result is always a proper rotation.
    """
    if len(pairs) < 3:
        raise DegenerateGeometryError(f"need at least 3 point pairs, got {len(pairs)}")
    src = as_points([p[0] for p in pairs], name="source points")
    dst = as_points([p[1] for p in pairs], name="target points")

    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= _DEGENERATE_REL_TOL * s[0]:
        raise DegenerateGeometryError("point configuration is collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = c_dst - rot @ c_src
    return RigidTransform(rot, trans)


def split_inliers(
    pairs: Sequence[CorrespondencePair], transform: RigidTransform, e_th: float
) -> tuple[list[CorrespondencePair], list[CorrespondencePair]]:
    """Partition pairs by key-point transformation error against ``e_th``.

    A pair whose error equals the threshold exactly counts as an inlier.
    """
    if not pairs:
        return [], []
    src = np.stack([p.a.keypoint for p in pairs])
    dst = np.stack([p.b.keypoint for p in pairs])
    err = np.linalg.norm(transform.apply(src) - dst, axis=1)
    inliers, outliers = [], []
    for p, e in zip(pairs, err):
        bucket = inliers if e <= e_th else outliers
        flag = e <= e_th
        bucket.append(CorrespondencePair(p.a, p.b, p.dissim, inlier=bool(flag)))
    return inliers, outliers


def correspond_ensembles(
    n1: Ensemble, n2: Ensemble, params: CorrespondenceParams | None = None
) -> CorrespondenceSet:
    """Full correspondence pipeline between two ensembles.

    Raises :class:`CorrespondenceError` when fewer than three geometric
    inliers survive or when nothing can be matched at all;
    :class:`DegenerateGeometryError` propagates from the rigid fit.
    """
    params = params or CorrespondenceParams()
    if len(n1) < 3 or len(n2) < 3:
        raise CorrespondenceError(
            f"ensembles too small to correspond ({len(n1)} and {len(n2)} descriptors)"
        )

    dmat = _dissim_matrix(n1, n2)
    candidates = initial_correspondence(n1, n2)

    # Consensus loop: refit on inliers, re-split all candidate pairs.  At
    # least two rounds run before convergence is tested because the first
    # fit uses the unfiltered pairs.
    current = list(candidates)
    transform = None
    for iteration in range(params.max_iters):
        new_transform = rigid_fit([(p.a.keypoint, p.b.keypoint) for p in current])
        inliers, _ = split_inliers(candidates, new_transform, params.e_th)
        if len(inliers) < 3:
            raise CorrespondenceError(
                f"only {len(inliers)} inlier correspondences at iteration {iteration + 1}"
            )
        if transform is not None and iteration >= 2:
            change = float(
                np.linalg.norm(new_transform.rotation - transform.rotation)
                + np.linalg.norm(new_transform.translation - transform.translation)
            )
            if change < params.convergence_eps:
                transform = new_transform
                current = inliers
                break
        transform = new_transform
        current = inliers

    # Re-correspond each source descriptor against targets whose key-points
    # lie within the vicinity of its transformed location.
    moved = transform.apply(n1.keypoints())
    geo = cdist(moved, n2.keypoints())
    within = geo <= params.vicinity_radius

    proposals = []  # (dissim, i, j)
    for i in range(len(n1)):
        cols = np.nonzero(within[i])[0]
        if cols.size == 0:
            continue
        j = cols[np.argmin(dmat[i, cols])]
        proposals.append((float(dmat[i, j]), i, int(j)))

    # One-to-one: accept by ascending dissimilarity, dropping conflicts.
    proposals.sort()
    used_a, used_b = set(), set()
    accepted = []
    for dis, i, j in proposals:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        accepted.append((i, j, dis))
    accepted.sort()

    if not accepted:
        raise CorrespondenceError("no correspondences survived the vicinity search")

    pairs = []
    for i, j, dis in accepted:
        err = float(np.linalg.norm(moved[i] - n2.descriptors[j].keypoint))
        pairs.append(
            CorrespondencePair(n1.descriptors[i], n2.descriptors[j], dis, inlier=err <= params.e_th)
        )
    return CorrespondenceSet(tuple(pairs), transform)
