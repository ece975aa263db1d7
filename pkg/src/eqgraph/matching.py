"""On-line matching of probe against gallery ensembles.

For every corresponded descriptor pair the matcher searches the trained
graph for a low-cost path: probe descriptor -> entrance descriptor of an
assigned collection -> its bridging vertex -> (over an identity link) the
bridging vertex of a linked set -> exit descriptor -> gallery descriptor.
Hops inside an equivalence set are free, so only the identity-change
vectors accumulate; the path cost is the norm of their sum, and the direct
probe-to-gallery distance is always an alternative.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .correspondence import CorrespondenceParams, CorrespondenceSet, correspond_ensembles
from .errors import CorrespondenceError, DegenerateGeometryError, GateError
from .graphbuild import Model
from .types import Ensemble
from .validation import as_vector, check_positive

log = logging.getLogger(__name__)

__all__ = [
    "MatchParams",
    "DescriptorIndex",
    "GateAssignment",
    "MatchResult",
    "build_index",
    "assign_collection",
    "pair_path_measure",
    "assign_gates",
    "refine_assignments",
    "pair_measure",
    "match_ensembles",
    "dissimilarity_matrix",
]


@dataclass(frozen=True)
class MatchParams:
    """Knobs of the on-line search.

    vote_k: neighbours per descriptor in the collection vote.
    gate_candidates: nearest descriptors considered as entrance/exit gates.
    refine_iters: alternating refinement rounds; collection re-voting is
        allowed during the first half, later rounds adjust gates only.
    top_n: how many smallest pair measures sum into the ensemble measure.
    """

    vote_k: int = 9
    gate_candidates: int = 3
    refine_iters: int = 6
    top_n: int = 40

    def __post_init__(self):
        check_positive("vote_k", self.vote_k)
        check_positive("gate_candidates", self.gate_candidates)
        check_positive("refine_iters", self.refine_iters)
        check_positive("top_n", self.top_n)


@dataclass
class GateAssignment:
    """Per corresponded pair: assigned collections, gates, and current cost."""

    probe_collection: str
    gallery_collection: str
    entrance_id: str
    exit_id: str
    m_prime: float


@dataclass(frozen=True)
class MatchResult:
    """Ensemble dissimilarity plus per-pair diagnostics."""

    score: float
    per_pair: tuple[float, ...]
    correspondence: CorrespondenceSet


def _norm(v: np.ndarray) -> np.ndarray:
    # Shared cost arithmetic: keep the operation order identical everywhere
    # so heuristic costs compare exactly against enumerated ones.
    return np.sqrt(np.sum(v * v, axis=-1))


class _KnnTable:
    """KD-tree over a point block with brute-force-identical tie handling."""

    def __init__(self, points: np.ndarray):
        self.points = points
        self.tree = cKDTree(points)

    def query_exact(self, x: np.ndarray, k: int) -> np.ndarray:
        """Positions of the k nearest points; ties broken by position."""
        n = len(self.points)
        k = min(k, n)
        dist, _ = self.tree.query(x, k=k)
        dist = np.atleast_1d(dist)
        d_star = float(np.max(dist))
        radius = d_star * (1.0 + 1e-12) + 1e-300
        cand = np.array(sorted(self.tree.query_ball_point(x, radius)), dtype=int)
        cand_dist = _norm(self.points[cand] - x)
        order = np.argsort(cand_dist, kind="stable")
        return cand[order][:k]

    def query_fast(self, xs: np.ndarray, k: int) -> np.ndarray:
        """Batched query; returns (m, k) position array."""
        k = min(k, len(self.points))
        _, idx = self.tree.query(xs, k=k)
        idx = np.atleast_2d(idx)
        if idx.shape[0] != xs.shape[0]:  # k == 1 squeezes the last axis
            idx = idx.reshape(xs.shape[0], k)
        return idx


class DescriptorIndex:
    """Search structures over all training descriptors of a model.

    Descriptors are stored in ascending id order (the canonical order for
    tie-breaking), with a global KD-tree, one KD-tree per collection, a
    label table id -> (ensemble, collection, set), and the bridging vector
    and link table of every equivalence set.
    """

    def __init__(self, model: Model):
        entries = []
        for es in model.equivalence_sets:
            for member in es.members:
                entries.append((member.descriptor_id, member, es.set_id))
        entries.sort(key=lambda item: item[0])
        ids = [e[0] for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate descriptor ids across equivalence sets")

        self.model = model
        self.ids: tuple[str, ...] = tuple(ids)
        self.vectors = np.stack([e[1].vector for e in entries]) if entries else np.zeros((0, model.dim))
        self.labels: tuple[tuple[str, str, str], ...] = tuple(
            (e[1].ensemble_id, e[1].collection_id, e[2]) for e in entries
        )
        self.position_of = {d_id: i for i, d_id in enumerate(ids)}
        self._global = _KnnTable(self.vectors)

        per_collection: dict[str, list[int]] = {}
        for i, (_, collection_id, _) in enumerate(self.labels):
            per_collection.setdefault(collection_id, []).append(i)
        self._collection_tables = {
            cid: (np.array(positions, dtype=int), _KnnTable(self.vectors[positions]))
            for cid, positions in per_collection.items()
        }

        self.bridging_vector = {
            es.set_id: np.asarray(es.bridging.vector) for es in model.equivalence_sets
        }
        linked: dict[str, set[str]] = {es.set_id: set() for es in model.equivalence_sets}
        for a, b in model.ir_links:
            linked[a].add(b)
            linked[b].add(a)
        self._linked = {k: frozenset(v) for k, v in linked.items()}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def collection_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._collection_tables))

    def knn(self, x, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact k nearest training descriptors: (positions, distances).

        Matches a brute-force scan exactly, including the order of
        distance ties (broken by ascending descriptor id).
        """
        x = as_vector(x, dim=self.vectors.shape[1], name="query")
        pos = self._global.query_exact(x, k)
        return pos, _norm(self.vectors[pos] - x)

    def collection_knn(self, collection_id: str, x, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Exact k nearest descriptors within one collection."""
        x = as_vector(x, dim=self.vectors.shape[1], name="query")
        positions, table = self._collection_tables[collection_id]
        local = table.query_exact(x, k)
        pos = positions[local]
        return pos, _norm(self.vectors[pos] - x)

    def _knn_fast(self, xs: np.ndarray, k: int) -> np.ndarray:
        return self._global.query_fast(xs, k)

    def _collection_knn_fast(self, collection_id: str, xs: np.ndarray, k: int) -> np.ndarray:
        positions, table = self._collection_tables[collection_id]
        return positions[table.query_fast(xs, k)]

    def set_of(self, position: int) -> str:
        return self.labels[position][2]

    def path_valid(self, set_a: str, set_b: str) -> bool:
        """A two-gate path exists iff both gates share an equivalence set or
        their sets are identity-linked (which implies distinct collections)."""
        if set_a == set_b:
            return True
        return set_b in self._linked[set_a]


def build_index(model: Model) -> DescriptorIndex:
    """Build the search index over a trained model."""
    if not model.equivalence_sets:
        raise ValueError("model has no equivalence sets")
    return DescriptorIndex(model)


def _vote(idx: DescriptorIndex, vectors: np.ndarray, vote_k: int) -> str:
    """Plurality collection among the voters' nearest training descriptors;
    ties by smaller summed neighbour distance, then by collection id."""
    k = min(vote_k, len(idx))
    positions = idx._knn_fast(vectors, k)
    dists = _norm(idx.vectors[positions] - vectors[:, None, :])
    tally: dict[str, list] = {}
    for row_pos, row_dist in zip(positions, dists):
        for pos, dist in zip(row_pos, row_dist):
            cid = idx.labels[int(pos)][1]
            entry = tally.setdefault(cid, [0, 0.0])
            entry[0] += 1
            entry[1] += float(dist)
    return min(tally.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))[0]


def assign_collection(ensemble: Ensemble, idx: DescriptorIndex, vote_k: int) -> str:
    """Vote a training collection for an ensemble via descriptor neighbours."""
    return _vote(idx, ensemble.vectors(), vote_k)


def pair_path_measure(x, y, gates: GateAssignment, idx: DescriptorIndex) -> float:
    """Cost of the gated path from ``x`` to ``y``.

    Sums the identity-change vectors along probe -> entrance -> bridging ->
    linked bridging -> exit -> gallery (equivalence hops are free) and
    returns the norm of the sum.  The middle term vanishes when both gates
    share an equivalence set.
    """
    x = as_vector(x, name="x")
    y = as_vector(y, name="y")
    e_pos = idx.position_of[gates.entrance_id]
    x_pos = idx.position_of[gates.exit_id]
    set_e = idx.set_of(e_pos)
    set_x = idx.set_of(x_pos)
    if not idx.path_valid(set_e, set_x):
        raise GateError(f"sets {set_e!r} and {set_x!r} are not linked")
    b1 = idx.bridging_vector[set_e]
    b2 = idx.bridging_vector[set_x]
    ev = idx.vectors[e_pos]
    xv = idx.vectors[x_pos]
    return float(_norm((ev - x) + (b2 - b1) + (y - xv)))


def _best_combo(
    idx: DescriptorIndex,
    x: np.ndarray,
    y: np.ndarray,
    entrance_pos: np.ndarray,
    exit_pos: np.ndarray,
) -> tuple[float, int, int] | None:
    """Lowest-cost valid (entrance, exit) combination over the candidate
    grid; ties broken by ascending (entrance id, exit id).  None when every
    combination is invalid."""
    ent_sets = [idx.set_of(int(p)) for p in entrance_pos]
    ext_sets = [idx.set_of(int(p)) for p in exit_pos]
    valid = np.array(
        [[idx.path_valid(sa, sb) for sb in ext_sets] for sa in ent_sets], dtype=bool
    )
    if not valid.any():
        return None
    ev = idx.vectors[entrance_pos]
    xv = idx.vectors[exit_pos]
    b1 = np.stack([idx.bridging_vector[s] for s in ent_sets])
    b2 = np.stack([idx.bridging_vector[s] for s in ext_sets])
    total = ((ev - x)[:, None, :] + (b2[None, :, :] - b1[:, None, :])) + (y - xv)[None, :, :]
    costs = _norm(total)

    best = None
    for a in range(costs.shape[0]):
        for b in range(costs.shape[1]):
            if not valid[a, b]:
                continue
            key = (
                float(costs[a, b]),
                idx.ids[int(entrance_pos[a])],
                idx.ids[int(exit_pos[b])],
            )
            if best is None or key < best[0]:
                best = (key, a, b)
    key, a, b = best
    return key[0], int(entrance_pos[a]), int(exit_pos[b])


def assign_gates(
    x,
    y,
    probe_collection: str,
    gallery_collection: str,
    idx: DescriptorIndex,
    gate_candidates: int,
) -> GateAssignment:
    """Choose entrance/exit gates for one corresponded descriptor pair.

    Evaluates the path cost over the grid of the ``gate_candidates``
    nearest descriptors to ``x`` in the probe collection times those
    nearest to ``y`` in the gallery collection, skipping combinations
    without a linked (or shared) equivalence set.  Raises
    :class:`GateError` when no combination is valid.
    """
    x = as_vector(x, name="x")
    y = as_vector(y, name="y")
    ent_pos, _ = idx.collection_knn(probe_collection, x, gate_candidates)
    ext_pos, _ = idx.collection_knn(gallery_collection, y, gate_candidates)
    combo = _best_combo(idx, x, y, ent_pos, ext_pos)
    if combo is None:
        raise GateError(
            f"no linked entrance/exit combination between collections "
            f"{probe_collection!r} and {gallery_collection!r}"
        )
    cost, e_pos, x_pos = combo
    return GateAssignment(
        probe_collection=probe_collection,
        gallery_collection=gallery_collection,
        entrance_id=idx.ids[e_pos],
        exit_id=idx.ids[x_pos],
        m_prime=cost,
    )


def _gallery_images(idx, xs, assignments) -> np.ndarray:
    """Image of each probe descriptor in the gallery-side identity frame:
    the entrance descriptor displaced over the bridging link."""
    out = np.array(xs)
    for i, gate in enumerate(assignments):
        if gate is None:
            continue
        ev = idx.vectors[idx.position_of[gate.entrance_id]]
        b1 = idx.bridging_vector[idx.set_of(idx.position_of[gate.entrance_id])]
        b2 = idx.bridging_vector[idx.set_of(idx.position_of[gate.exit_id])]
        out[i] = ev + (b2 - b1)
    return out


def _probe_images(idx, ys, assignments) -> np.ndarray:
    """Symmetric image of each gallery descriptor in the probe-side frame."""
    out = np.array(ys)
    for i, gate in enumerate(assignments):
        if gate is None:
            continue
        xv = idx.vectors[idx.position_of[gate.exit_id]]
        b1 = idx.bridging_vector[idx.set_of(idx.position_of[gate.entrance_id])]
        b2 = idx.bridging_vector[idx.set_of(idx.position_of[gate.exit_id])]
        out[i] = xv + (b1 - b2)
    return out


def refine_assignments(
    probe: Ensemble,
    gallery: Ensemble,
    cset: CorrespondenceSet,
    idx: DescriptorIndex,
    params: MatchParams | None = None,
) -> tuple[list[GateAssignment | None], list[list[float]]]:
    """Assign and iteratively refine collections and gates for every pair.

    Alternates two half-steps per round: probe descriptors are mapped into
    the gallery-side frame to re-vote (early rounds only) and re-gate the
    gallery side, then the symmetric mapping refines the probe side.  A
    re-assignment is committed only when it strictly lowers the pair cost,
    so per-pair costs are non-increasing across rounds.  Returns the final
    assignments (None for pairs with no valid gates) and the per-pair cost
    traces, one entry per round.
    """
    params = params or MatchParams()
    if not cset.pairs:
        raise ValueError("empty correspondence set")
    g = params.gate_candidates
    xs = np.stack([p.a.vector for p in cset.pairs])
    ys = np.stack([p.b.vector for p in cset.pairs])
    n = len(cset.pairs)

    probe_coll = _vote(idx, xs, params.vote_k)
    gallery_coll = _vote(idx, ys, params.vote_k)

    assignments: list[GateAssignment | None] = []
    ent_grid = idx._collection_knn_fast(probe_coll, xs, g)
    ext_grid = idx._collection_knn_fast(gallery_coll, ys, g)
    for i in range(n):
        combo = _best_combo(idx, xs[i], ys[i], ent_grid[i], ext_grid[i])
        if combo is None:
            assignments.append(None)
            continue
        cost, e_pos, x_pos = combo
        assignments.append(
            GateAssignment(probe_coll, gallery_coll, idx.ids[e_pos], idx.ids[x_pos], cost)
        )

    traces: list[list[float]] = [
        [a.m_prime if a is not None else float("inf")] for a in assignments
    ]

    revote_rounds = params.refine_iters // 2
    for round_no in range(1, params.refine_iters + 1):
        revote = round_no <= revote_rounds

        # (a) probe -> gallery: refine the gallery side near the images x'.
        ximg = _gallery_images(idx, xs, assignments)
        if revote:
            gated = [i for i in range(n) if assignments[i] is not None]
            vote_block = ximg[gated] if gated else xs
            gallery_coll = _vote(idx, vote_block, params.vote_k)
        _refine_half(
            idx, xs, ys, ximg, assignments, g,
            target_gallery=gallery_coll if revote else None,
        )

        # (b) gallery -> probe: the symmetric half-step.
        yimg = _probe_images(idx, ys, assignments)
        if revote:
            gated = [i for i in range(n) if assignments[i] is not None]
            vote_block = yimg[gated] if gated else ys
            probe_coll = _vote(idx, vote_block, params.vote_k)
        _refine_half(
            idx, xs, ys, yimg, assignments, g,
            target_probe=probe_coll if revote else None,
        )

        for i, gate in enumerate(assignments):
            traces[i].append(gate.m_prime if gate is not None else float("inf"))

    return assignments, traces


def _grouped_knn(idx: DescriptorIndex, collections, queries: np.ndarray, g: int):
    """Per-row kNN where each row queries its own collection; rows sharing a
    collection are batched into one tree query."""
    out: list[np.ndarray | None] = [None] * len(collections)
    groups: dict[str, list[int]] = {}
    for i, cid in enumerate(collections):
        groups.setdefault(cid, []).append(i)
    for cid, rows in groups.items():
        grid = idx._collection_knn_fast(cid, queries[np.array(rows)], g)
        for r, row_i in enumerate(rows):
            out[row_i] = grid[r]
    return out


def _refine_half(
    idx: DescriptorIndex,
    xs: np.ndarray,
    ys: np.ndarray,
    images: np.ndarray,
    assignments: list[GateAssignment | None],
    g: int,
    target_gallery: str | None = None,
    target_probe: str | None = None,
) -> None:
    """One refinement half-step, committing only strict improvements.

    When refining the gallery side, exit candidates come from the image of
    the probe descriptor in the target gallery collection; the probe side
    is symmetric.  Pairs still without gates are retried against the
    current target collections.
    """
    n = len(assignments)
    refine_gallery = target_probe is None

    probe_colls: list[str] = []
    gallery_colls: list[str] = []
    for i in range(n):
        gate = assignments[i]
        if gate is None:
            pc = target_probe or _nearest_collection(idx, xs[i])
            gc = target_gallery or _nearest_collection(idx, ys[i])
        elif refine_gallery:
            pc = gate.probe_collection
            gc = target_gallery or gate.gallery_collection
        else:
            pc = target_probe or gate.probe_collection
            gc = gate.gallery_collection
        probe_colls.append(pc)
        gallery_colls.append(gc)

    ent_queries = xs if refine_gallery else images
    ext_queries = images if refine_gallery else ys
    ent_grid = _grouped_knn(idx, probe_colls, ent_queries, g)
    ext_grid = _grouped_knn(idx, gallery_colls, ext_queries, g)

    for i in range(n):
        combo = _best_combo(idx, xs[i], ys[i], ent_grid[i], ext_grid[i])
        if combo is None:
            continue
        cost, e_pos, x_pos = combo
        gate = assignments[i]
        if gate is None or cost < gate.m_prime:
            assignments[i] = GateAssignment(
                probe_colls[i], gallery_colls[i], idx.ids[e_pos], idx.ids[x_pos], cost
            )


def _nearest_collection(idx: DescriptorIndex, x: np.ndarray) -> str:
    pos = idx._knn_fast(x[None, :], 1)[0, 0]
    return idx.labels[int(pos)][1]


def pair_measure(x, y, gates: GateAssignment | None) -> float:
    """Final pair dissimilarity: the gated path cost capped by the direct
    distance.  Pairs without gates fall back to the direct distance."""
    x = as_vector(x, name="x")
    y = as_vector(y, dim=x.shape[0], name="y")
    direct = float(_norm(x - y))
    if gates is None:
        return direct
    return min(gates.m_prime, direct)


def match_ensembles(
    probe: Ensemble,
    gallery: Ensemble,
    idx: DescriptorIndex,
    params: MatchParams | None = None,
    corr_params: CorrespondenceParams | None = None,
    plain: bool = False,
) -> MatchResult:
    """Match one probe ensemble against one gallery ensemble.

    The ensembles are corresponded, per-pair measures computed (direct
    distances only when ``plain``), and the ``top_n`` smallest measures
    summed into the ensemble dissimilarity (all of them when fewer pairs
    exist).  Correspondence failures propagate to the caller.
    """
    params = params or MatchParams()
    corr_params = corr_params or idx.model.params.correspondence
    cset = correspond_ensembles(probe, gallery, corr_params)

    xs = np.stack([p.a.vector for p in cset.pairs])
    ys = np.stack([p.b.vector for p in cset.pairs])
    if plain:
        measures = [float(v) for v in _norm(xs - ys)]
    else:
        assignments, _ = refine_assignments(probe, gallery, cset, idx, params)
        measures = [
            pair_measure(xs[i], ys[i], assignments[i]) for i in range(len(cset.pairs))
        ]

    n_sum = min(params.top_n, len(measures))
    score = float(np.sum(np.sort(np.asarray(measures))[:n_sum]))
    return MatchResult(score=score, per_pair=tuple(measures), correspondence=cset)


def dissimilarity_matrix(
    probes,
    galleries,
    model: Model,
    params: MatchParams | None = None,
    corr_params: CorrespondenceParams | None = None,
    plain: bool = False,
    n_jobs: int = 1,
) -> np.ndarray:
    """Normalised probe-by-gallery dissimilarity matrix.

    Failed matches take the row maximum before each row is min-max
    normalised to [0, 1]; constant rows map to all zeros.  Cells are
    independent, so rows may be evaluated by a small thread pool
    (``n_jobs`` > 1) without affecting the result.
    """
    probes = list(probes)
    galleries = list(galleries)
    if not probes or not galleries:
        raise ValueError("need at least one probe and one gallery ensemble")
    params = params or MatchParams()
    idx = build_index(model)

    def cell(p: Ensemble, g: Ensemble) -> float:
        try:
            return match_ensembles(p, g, idx, params, corr_params, plain=plain).score
        except (CorrespondenceError, DegenerateGeometryError) as exc:
            log.warning("match (%s, %s) failed: %s", p.ensemble_id, g.ensemble_id, exc)
            return float("nan")

    raw = np.empty((len(probes), len(galleries)))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(lambda p: [cell(p, g) for g in galleries], probes))
        raw[:] = np.asarray(rows)
    else:
        for i, p in enumerate(probes):
            for j, g in enumerate(galleries):
                raw[i, j] = cell(p, g)

    out = np.zeros_like(raw)
    for i in range(raw.shape[0]):
        row = raw[i]
        ok = np.isfinite(row)
        if not ok.any():
            continue
        row = np.where(ok, row, row[ok].max())
        lo, hi = row.min(), row.max()
        if hi > lo:
            out[i] = (row - lo) / (hi - lo)
    return out
