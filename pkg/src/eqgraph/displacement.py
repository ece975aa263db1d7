"""Displacement algebra on the descriptor manifold.

Corresponded descriptors of an equivalence set identify their local
neighbourhoods with each other; mapping a point between those frames is a
pure translation.  The invariant displacement between two points is the
minimum-norm difference over all pairs of equivalent images, which cancels
the shared (expression) component and leaves the identity component.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, KindMismatchError
from .types import EXPRESSION_CHANGE, IDENTITY_CHANGE, Descriptor, Displacement, EquivalenceSet
from .validation import as_vector

__all__ = [
    "equivalence_map",
    "invariant_displacement",
    "change_identity",
    "change_expression",
]


def equivalence_map(x, source: Descriptor, target: Descriptor) -> np.ndarray:
    """Map point ``x`` from the frame at ``source`` to the frame at ``target``.

    Both descriptors must belong to one equivalence set; the mapping is the
    translation ``x + target - source``.
    """
    x = as_vector(x, name="x")
    if source.dim != target.dim or source.dim != x.shape[0]:
        raise DimensionError(
            f"dimension mismatch: x has {x.shape[0]}, descriptors have "
            f"{source.dim} and {target.dim}"
        )
    return x + target.vector - source.vector


def _members_of(q) -> tuple[Descriptor, ...]:
    if isinstance(q, EquivalenceSet):
        return q.members
    return tuple(q)


def invariant_displacement(x, y, q: EquivalenceSet | Sequence[Descriptor]):
    """Minimum-norm displacement from ``y`` to ``x`` under the equivalences of ``q``.

    All images of ``x`` and ``y`` in a common reference frame are compared;
    the returned vector is the smallest-norm difference, together with the
    (source-of-x, source-of-y, reference) member triple realising it.  Ties
    go to the lowest member-index triple.  The result never exceeds the
    direct difference ``x - y`` in norm.
    """
    members = _members_of(q)
    if not members:
        raise ValueError("equivalence set is empty")
    x = as_vector(x, dim=members[0].dim, name="x")
    y = as_vector(y, dim=members[0].dim, name="y")

    vecs = np.stack([m.vector for m in members])  # (n, d)
    # The reference frame cancels out: the image difference is
    # (x - y) + D_j - D_i for source members i (of x) and j (of y).
    diffs = (x - y) + vecs[None, :, :] - vecs[:, None, :]  # (i, j, d)
    norms = np.sqrt(np.sum(diffs * diffs, axis=-1))
    flat = int(np.argmin(norms))  # first occurrence == lowest (i, j)
    i, j = divmod(flat, len(members))
    # Any reference member gives the same value; the lowest-index triple
    # therefore uses the first member as reference.
    return np.array(diffs[i, j]), (members[i], members[j], members[0])


def change_identity(x, displacement: Displacement) -> np.ndarray:
    """Apply an identity-induced displacement to ``x``."""
    if displacement.kind != IDENTITY_CHANGE:
        raise KindMismatchError(f"expected an identity change, got {displacement.kind!r}")
    x = as_vector(x, dim=displacement.delta.shape[0], name="x")
    return x + displacement.delta


def change_expression(x, displacement: Displacement) -> np.ndarray:
    """Apply an expression-induced displacement to ``x``."""
    if displacement.kind != EXPRESSION_CHANGE:
        raise KindMismatchError(f"expected an expression change, got {displacement.kind!r}")
    x = as_vector(x, dim=displacement.delta.shape[0], name="x")
    return x + displacement.delta
