"""Core domain types: descriptors, ensembles, collections, equivalence sets.

All types are immutable after construction and safe to share across
threads.  Vectors and key-points are stored as read-only float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .validation import frozen_vector

NEUTRAL = "neutral"

IDENTITY_CHANGE = "identity_change"
EXPRESSION_CHANGE = "expression_change"


@dataclass(frozen=True, eq=False)
class Descriptor:
    """One key-point descriptor: its coordinates in descriptor space, the
    3-D key-point location (mm), and provenance labels."""

    vector: np.ndarray
    keypoint: np.ndarray
    descriptor_id: str
    ensemble_id: str
    collection_id: str

    def __post_init__(self):
        object.__setattr__(self, "vector", frozen_vector(self.vector, name="vector"))
        object.__setattr__(self, "keypoint", frozen_vector(self.keypoint, dim=3, name="keypoint"))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def __repr__(self):  # keep tracebacks readable
        return f"Descriptor({self.descriptor_id!r}, d={self.dim})"


@dataclass(frozen=True, eq=False)
class Ensemble:
    """All descriptors extracted from one scan (one person, one expression)."""

    ensemble_id: str
    subject_id: str
    expression: str
    descriptors: tuple[Descriptor, ...]

    def __post_init__(self):
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        if not self.descriptors:
            raise ValueError(f"ensemble {self.ensemble_id!r} is empty")
        dims = {d.dim for d in self.descriptors}
        if len(dims) != 1:
            raise DimensionError(f"ensemble {self.ensemble_id!r} mixes dimensions {sorted(dims)}")
        for d in self.descriptors:
            if d.ensemble_id != self.ensemble_id:
                raise ValueError(
                    f"descriptor {d.descriptor_id!r} carries ensemble {d.ensemble_id!r}, "
                    f"expected {self.ensemble_id!r}"
                )

    @property
    def is_neutral(self) -> bool:
        return self.expression == NEUTRAL

    @property
    def dim(self) -> int:
        return self.descriptors[0].dim

    def vectors(self) -> np.ndarray:
        """Stacked (n, d) array of member descriptor vectors."""
        return np.stack([d.vector for d in self.descriptors])

    def keypoints(self) -> np.ndarray:
        """Stacked (n, 3) array of member key-point locations."""
        return np.stack([d.keypoint for d in self.descriptors])

    def __len__(self) -> int:
        return len(self.descriptors)


@dataclass(frozen=True, eq=False)
class Collection:
    """All ensembles of one person.

    A collection needs at least one neutral ensemble to take part in model
    building; loading tolerates its absence so callers can report it.
    """

    collection_id: str
    subject_id: str
    ensembles: tuple[Ensemble, ...]

    def __post_init__(self):
        object.__setattr__(self, "ensembles", tuple(self.ensembles))
        if not self.ensembles:
            raise ValueError(f"collection {self.collection_id!r} has no ensembles")
        for e in self.ensembles:
            if e.subject_id != self.subject_id:
                raise ValueError(
                    f"ensemble {e.ensemble_id!r} belongs to subject {e.subject_id!r}, "
                    f"expected {self.subject_id!r}"
                )
        dims = {e.dim for e in self.ensembles}
        if len(dims) != 1:
            raise DimensionError(f"collection {self.collection_id!r} mixes dimensions {sorted(dims)}")

    @property
    def has_neutral(self) -> bool:
        return any(e.is_neutral for e in self.ensembles)

    @property
    def neutral_ensemble_ids(self) -> frozenset[str]:
        return frozenset(e.ensemble_id for e in self.ensembles if e.is_neutral)

    @property
    def dim(self) -> int:
        return self.ensembles[0].dim

    def __len__(self) -> int:
        return len(self.ensembles)


@dataclass(frozen=True, eq=False)
class Displacement:
    """An additive displacement vector in descriptor space.

    ``kind`` distinguishes identity-induced from expression-induced
    displacements; composition just adds the vectors.
    """

    delta: np.ndarray
    kind: str
    from_label: str
    to_label: str

    def __post_init__(self):
        if self.kind not in (IDENTITY_CHANGE, EXPRESSION_CHANGE):
            raise ValueError(f"unknown displacement kind {self.kind!r}")
        object.__setattr__(self, "delta", frozen_vector(self.delta, name="delta"))

    def then(self, other: "Displacement") -> "Displacement":
        """Compose with a second displacement of the same kind."""
        if other.kind != self.kind:
            from .errors import KindMismatchError

            raise KindMismatchError(f"cannot compose {self.kind} with {other.kind}")
        return Displacement(self.delta + other.delta, self.kind, self.from_label, other.to_label)

    def inverse(self) -> "Displacement":
        return Displacement(-self.delta, self.kind, self.to_label, self.from_label)


@dataclass(frozen=True, eq=False)
class EquivalenceSet:
    """Corresponded descriptors of one collection plus its bridging member.

    The bridging member is the neutral-expression descriptor closest to the
    member mean; it is the only inter-collection attachment point.
    """

    set_id: str
    collection_id: str
    members: tuple[Descriptor, ...]
    bridging: Descriptor

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError(f"equivalence set {self.set_id!r} is empty")
        member_ids = [m.descriptor_id for m in self.members]
        if self.bridging.descriptor_id not in member_ids:
            raise ValueError(f"bridging of set {self.set_id!r} is not a member")
        seen_ensembles = set()
        for m in self.members:
            if m.collection_id != self.collection_id:
                raise ValueError(
                    f"member {m.descriptor_id!r} of set {self.set_id!r} belongs to "
                    f"collection {m.collection_id!r}, expected {self.collection_id!r}"
                )
            if m.ensemble_id in seen_ensembles:
                raise ValueError(
                    f"set {self.set_id!r} has more than one member from ensemble {m.ensemble_id!r}"
                )
            seen_ensembles.add(m.ensemble_id)

    def member_vectors(self) -> np.ndarray:
        return np.stack([m.vector for m in self.members])

    def __len__(self) -> int:
        return len(self.members)
