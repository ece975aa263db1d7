"""Synthetic descriptor worlds with known identity/expression decomposition.

Every generated descriptor is identity_vector + expression_offset + noise,
with key-points on a canonical 3-D grid under a per-scan rigid transform.
The ground truth (the latent identity and expression components, which are
unobservable at matching time) is kept alongside, enabling exact checks.

The module also houses the brute-force oracles used by the test suite:
exhaustive bounded-path search, exact kNN, and partition purity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import RigidTransform
from .errors import ConfigError
from .graphbuild import Model
from .types import Collection, Descriptor, Ensemble, NEUTRAL

__all__ = [
    "WorldConfig",
    "SyntheticTruth",
    "generate_world",
    "generate_probe_ensembles",
    "exact_path_oracle",
    "brute_knn",
    "partition_quality",
]

_ORACLE_SET_LIMIT = 64


@dataclass(frozen=True)
class WorldConfig:
    """Shape and scales of a synthetic world.

    Expression offsets are shared across identities (optionally perturbed
    per identity by ``expression_jitter``).  With ``split_subspaces`` the
    identity vectors live in the first half of the coordinates and the
    expression offsets in the second half, so expression displacements can
    never shorten identity displacements.
    """

    n_identities: int = 6
    n_expressions: int = 3  # including neutral
    n_keypoints: int = 8
    dim: int = 20
    identity_separation: float = 1.0
    identity_scale: float | None = None  # per-coordinate std; default separation / 3
    keypoint_base_scale: float | None = None  # default 4 * separation
    expression_scale: float = 1.0
    expression_jitter: float = 0.0
    uniform_expression_offsets: bool = False  # one offset vector per expression, all keypoints
    noise_sigma: float = 0.0
    dropout: float = 0.0
    keypoint_spacing_mm: float = 15.0
    rotation_deg: float = 5.0
    translation_mm: float = 3.0
    split_subspaces: bool = False

    def __post_init__(self):
        if self.n_identities < 2:
            raise ConfigError("n_identities must be >= 2")
        if self.n_expressions < 2:
            raise ConfigError("n_expressions must be >= 2 (neutral plus at least one)")
        if self.n_keypoints < 3:
            raise ConfigError("n_keypoints must be >= 3")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.identity_separation <= 0 or self.expression_scale <= 0:
            raise ConfigError("scales must be positive")
        if self.noise_sigma < 0 or self.expression_jitter < 0:
            raise ConfigError("noise_sigma and expression_jitter must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth decomposition of a generated world.

    identity_vectors[subject][keypoint] is the latent identity component;
    offsets[(subject, expression)][keypoint] the effective expression
    offset (zero for neutral).  descriptor_truth maps descriptor id to its
    (subject, expression, keypoint) provenance.
    """

    config: WorldConfig
    seed: int
    subjects: tuple[str, ...]
    expressions: tuple[str, ...]
    keypoints: tuple[str, ...]
    keypoint_layout: dict[str, np.ndarray]
    identity_vectors: dict[str, dict[str, np.ndarray]]
    offsets: dict[tuple[str, str], dict[str, np.ndarray]]
    scan_transforms: dict[str, RigidTransform] = field(default_factory=dict)
    descriptor_truth: dict[str, tuple[str, str, str]] = field(default_factory=dict)

    def identity_of(self, descriptor_id: str) -> np.ndarray:
        subject, _, keypoint = self.descriptor_truth[descriptor_id]
        return self.identity_vectors[subject][keypoint]

    def offset_of(self, descriptor_id: str) -> np.ndarray:
        subject, expression, keypoint = self.descriptor_truth[descriptor_id]
        return self.offsets[(subject, expression)][keypoint]

    def keypoint_label(self, descriptor_id: str) -> str:
        return self.descriptor_truth[descriptor_id][2]


def _keypoint_layout(config: WorldConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    side = int(np.ceil(np.sqrt(config.n_keypoints)))
    spacing = config.keypoint_spacing_mm
    heights = rng.uniform(0.0, 0.5 * spacing, size=config.n_keypoints)
    layout = {}
    for i in range(config.n_keypoints):
        row, col = divmod(i, side)
        layout[f"k{i:03d}"] = np.array([col * spacing, row * spacing, heights[i]])
    return layout


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def _random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    if max_deg <= 0:
        return np.eye(3)
    axis = _unit(rng, 3)
    angle = np.deg2rad(rng.uniform(0.0, max_deg))
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _identity_block(config: WorldConfig, rng: np.random.Generator) -> dict[str, dict[str, np.ndarray]]:
    """Identity vectors per subject and keypoint.

    Each keypoint gets a shared base vector (local surface shapes at one
    landmark resemble each other across people) plus a per-subject
    deviation, rejection-sampled so same-keypoint vectors of different
    subjects stay ``identity_separation`` apart.
    """
    d = config.dim
    active = slice(0, d // 2) if config.split_subspaces else slice(0, d)
    n_active = active.stop - active.start
    scale = config.identity_scale
    if scale is None:
        scale = config.identity_separation / 3.0
    base_scale = config.keypoint_base_scale
    if base_scale is None:
        base_scale = 4.0 * config.identity_separation

    subjects = [f"s{i:03d}" for i in range(config.n_identities)]
    keypoints = [f"k{i:03d}" for i in range(config.n_keypoints)]
    vectors: dict[str, dict[str, np.ndarray]] = {s: {} for s in subjects}
    for kp in keypoints:
        base = np.zeros(d)
        base[active] = rng.normal(0.0, base_scale, size=n_active)
        accepted: list[np.ndarray] = []
        for s in subjects:
            for _ in range(10_000):
                v = np.zeros(d)
                v[active] = rng.normal(0.0, scale, size=n_active)
                if all(
                    np.linalg.norm(v - prev) >= config.identity_separation for prev in accepted
                ):
                    break
            else:
                raise ConfigError(
                    "could not satisfy identity_separation; lower it or raise identity_scale"
                )
            accepted.append(v)
            vectors[s][kp] = base + v
    return vectors


def _expression_block(config: WorldConfig, rng: np.random.Generator):
    """Shared expression offsets per (expression, keypoint), each with norm
    ``expression_scale``; the neutral offset is zero."""
    d = config.dim
    active = slice(d // 2, d) if config.split_subspaces else slice(0, d)
    n_active = active.stop - active.start

    expressions = [NEUTRAL] + [f"e{i:03d}" for i in range(1, config.n_expressions)]
    keypoints = [f"k{i:03d}" for i in range(config.n_keypoints)]
    shared: dict[str, dict[str, np.ndarray]] = {}
    for expr in expressions:
        shared[expr] = {}
        uniform = None
        if config.uniform_expression_offsets and expr != NEUTRAL:
            uniform = np.zeros(d)
            uniform[active] = config.expression_scale * _unit(rng, n_active)
        for kp in keypoints:
            if uniform is not None:
                shared[expr][kp] = uniform
                continue
            v = np.zeros(d)
            if expr != NEUTRAL:
                v[active] = config.expression_scale * _unit(rng, n_active)
            shared[expr][kp] = v
    return expressions, shared


def _make_scan(
    truth: SyntheticTruth,
    subject: str,
    expression: str,
    scan_id: str,
    rng: np.random.Generator,
) -> Ensemble:
    config = truth.config
    rotation = _random_rotation(rng, config.rotation_deg)
    translation = (
        rng.uniform(-config.translation_mm, config.translation_mm, size=3)
        if config.translation_mm > 0
        else np.zeros(3)
    )
    transform = RigidTransform(rotation, translation)
    truth.scan_transforms[scan_id] = transform

    keep = rng.random(len(truth.keypoints)) >= config.dropout
    if not keep.any():
        keep[0] = True

    descriptors = []
    for kp, kept in zip(truth.keypoints, keep):
        if not kept:
            continue
        vector = truth.identity_vectors[subject][kp] + truth.offsets[(subject, expression)][kp]
        if config.noise_sigma > 0:
            vector = vector + rng.normal(0.0, config.noise_sigma, size=config.dim)
        location = transform.apply(truth.keypoint_layout[kp][None, :])[0]
        descriptor_id = f"{scan_id}/{kp}"
        descriptors.append(
            Descriptor(
                vector=vector,
                keypoint=location,
                descriptor_id=descriptor_id,
                ensemble_id=scan_id,
                collection_id=subject,
            )
        )
        truth.descriptor_truth[descriptor_id] = (subject, expression, kp)
    return Ensemble(
        ensemble_id=scan_id, subject_id=subject, expression=expression, descriptors=tuple(descriptors)
    )


def generate_world(config: WorldConfig, seed: int) -> tuple[list[Collection], SyntheticTruth]:
    """Generate one collection per identity, one scan per expression.

    Deterministic in (config, seed); the neutral scan comes first in every
    collection.
    """
    rng = np.random.default_rng(seed)
    layout_rng = np.random.default_rng(rng.integers(2**63))
    identity_rng = np.random.default_rng(rng.integers(2**63))
    expression_rng = np.random.default_rng(rng.integers(2**63))
    scan_rng = np.random.default_rng(rng.integers(2**63))

    layout = _keypoint_layout(config, layout_rng)
    identity_vectors = _identity_block(config, identity_rng)
    expressions, shared = _expression_block(config, expression_rng)
    subjects = tuple(sorted(identity_vectors))
    keypoints = tuple(sorted(layout))

    offsets: dict[tuple[str, str], dict[str, np.ndarray]] = {}
    for subject in subjects:
        for expr in expressions:
            per_kp = {}
            for kp in keypoints:
                off = shared[expr][kp]
                if config.expression_jitter > 0 and expr != NEUTRAL:
                    off = off + expression_rng.normal(0.0, config.expression_jitter, config.dim)
                per_kp[kp] = off
            offsets[(subject, expr)] = per_kp

    truth = SyntheticTruth(
        config=config,
        seed=seed,
        subjects=subjects,
        expressions=tuple(expressions),
        keypoints=keypoints,
        keypoint_layout=layout,
        identity_vectors=identity_vectors,
        offsets=offsets,
    )

    collections = []
    for subject in subjects:
        ensembles = []
        for expr in expressions:
            scan_id = f"{subject}-{expr}"
            ensembles.append(_make_scan(truth, subject, expr, scan_id, scan_rng))
        collections.append(
            Collection(collection_id=subject, subject_id=subject, ensembles=tuple(ensembles))
        )
    return collections, truth


def generate_probe_ensembles(
    truth: SyntheticTruth,
    seed: int,
    subjects=None,
    expressions=None,
    n_per: int = 1,
) -> list[Ensemble]:
    """Fresh scans of existing identities: same latent components, new
    noise, transform, and dropout draws.  Useful as probe sets."""
    rng = np.random.default_rng(seed)
    subjects = list(subjects) if subjects is not None else list(truth.subjects)
    expressions = list(expressions) if expressions is not None else list(truth.expressions)
    probes = []
    for subject in subjects:
        for expr in expressions:
            if (subject, expr) not in truth.offsets:
                raise ConfigError(f"unknown (subject, expression) pair ({subject!r}, {expr!r})")
            for copy in range(n_per):
                scan_id = f"{subject}-{expr}-p{copy:02d}"
                probes.append(_make_scan(truth, subject, expr, scan_id, rng))
    return probes


def brute_knn(query, points, k: int) -> np.ndarray:
    """Indices of the k nearest points by Euclidean distance, ties by index."""
    pts = np.asarray(points, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if k > len(pts):
        raise ValueError(f"k={k} exceeds the number of points ({len(pts)})")
    diff = pts - q
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    order = np.argsort(dist, kind="stable")
    return order[:k]


def exact_path_oracle(x, y, model: Model) -> float:
    """Exhaustive minimum over the bounded path family.

    Enumerates the direct path, every within-set entrance/exit combination,
    and every linked-set combination in both directions, over all members
    (not just nearest neighbours).  Guarded to small models.
    """
    if len(model.equivalence_sets) > _ORACLE_SET_LIMIT:
        raise ValueError(
            f"oracle limited to {_ORACLE_SET_LIMIT} equivalence sets, "
            f"model has {len(model.equivalence_sets)}"
        )
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def norms(v):
        return np.sqrt(np.sum(v * v, axis=-1))

    best = float(norms(x - y))

    members = {s.set_id: s.member_vectors() for s in model.equivalence_sets}
    bridging = {s.set_id: np.asarray(s.bridging.vector) for s in model.equivalence_sets}

    def family_min(set_in: str, set_out: str) -> float:
        m_in = members[set_in]
        m_out = members[set_out]
        b1 = bridging[set_in]
        b2 = bridging[set_out]
        total = ((m_in - x)[:, None, :] + (b2 - b1)) + (y - m_out)[None, :, :]
        return float(np.min(norms(total)))

    for s in model.equivalence_sets:
        best = min(best, family_min(s.set_id, s.set_id))
    for a, b in model.ir_links:
        best = min(best, family_min(a, b))
        best = min(best, family_min(b, a))
    return best


def partition_quality(sets, truth: SyntheticTruth) -> float:
    """Label purity of equivalence sets against ground-truth keypoints."""
    sets = list(sets)
    if not sets:
        raise ValueError("no equivalence sets given")
    majority = 0
    total = 0
    for s in sets:
        counts: dict[str, int] = {}
        for m in s.members:
            label = truth.keypoint_label(m.descriptor_id)
            counts[label] = counts.get(label, 0) + 1
        majority += max(counts.values())
        total += len(s.members)
    return majority / total
