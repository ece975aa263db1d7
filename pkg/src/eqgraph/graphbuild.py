"""Off-line model construction.

Per collection: plan a redundant set of ensemble pairs, correspond them,
take the connected components of the union graph, spectrally split merged
components and prune runts, pick a neutral bridging vertex per surviving
set, and simplify each set to a star.  Collections are then linked pairwise
by corresponding their bridging descriptors; those links carry the
identity relations between collections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .correspondence import CorrespondenceParams, correspond_ensembles
from .errors import (
    BridgingError,
    CorrespondenceError,
    DegenerateGeometryError,
    DisconnectedGraphError,
    GraphBuildError,
)
from .types import Collection, Descriptor, Ensemble, EquivalenceSet

log = logging.getLogger(__name__)

__all__ = [
    "BuildParams",
    "WeightedGraph",
    "StarGraph",
    "Model",
    "plan_ensemble_pairs",
    "build_collection_graph",
    "fiedler_bipartition",
    "fiedler_value",
    "refine_equivalence_sets",
    "choose_bridging",
    "link_collections",
    "build_model",
]

# Edge weights divide by descriptor distance; duplicates would divide by 0.
_WEIGHT_EPS = 1e-9
# Dense eigendecomposition below this size, shifted inverse iteration above.
_DENSE_EIG_LIMIT = 512
_EIG_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class BuildParams:
    """Knobs of the off-line build."""

    diameter_threshold: int = 2
    lambda_min: float = 0.2
    oversize_factor: float = 1.5
    min_size_fraction: float = 0.5
    hub: str | None = None
    correspondence: CorrespondenceParams = field(default_factory=CorrespondenceParams)

    def __post_init__(self):
        if self.diameter_threshold < 1:
            raise ValueError("diameter_threshold must be >= 1")
        if not 0 < self.min_size_fraction <= 1:
            raise ValueError("min_size_fraction must be in (0, 1]")
        if self.oversize_factor < 1:
            raise ValueError("oversize_factor must be >= 1")


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Undirected graph over descriptors with positive edge weights.

    Edges are (u, v, weight) with vertex indices u < v; no self-loops, no
    duplicates.
    """

    vertices: tuple[Descriptor, ...]
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        seen = set()
        canonical = []
        for u, v, w in self.edges:
            if u == v:
                raise ValueError(f"self-loop on vertex {u}")
            if not w > 0:
                raise ValueError(f"non-positive edge weight {w}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            canonical.append((key[0], key[1], float(w)))
        object.__setattr__(self, "edges", tuple(canonical))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def normalized(self) -> "WeightedGraph":
        """Scale weights so their mean is exactly one."""
        if not self.edges:
            return self
        mean = float(np.mean([w for _, _, w in self.edges]))
        return WeightedGraph(self.vertices, tuple((u, v, w / mean) for u, v, w in self.edges))

    def adjacency(self) -> np.ndarray:
        n = self.n_vertices
        a = np.zeros((n, n))
        for u, v, w in self.edges:
            a[u, v] = w
            a[v, u] = w
        return a

    def laplacian(self) -> np.ndarray:
        a = self.adjacency()
        return np.diag(a.sum(axis=1)) - a

    def is_connected(self) -> bool:
        n = self.n_vertices
        if n <= 1:
            return True
        adj = [[] for _ in range(n)]
        for u, v, _ in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        seen = [False] * n
        stack = [0]
        seen[0] = True
        count = 1
        while stack:
            node = stack.pop()
            for nxt in adj[node]:
                if not seen[nxt]:
                    seen[nxt] = True
                    count += 1
                    stack.append(nxt)
        return count == n

    def subgraph(self, indices) -> "WeightedGraph":
        """Induced subgraph; vertex order follows ``indices``."""
        index_list = list(indices)
        remap = {old: new for new, old in enumerate(index_list)}
        verts = tuple(self.vertices[i] for i in index_list)
        edges = tuple(
            (remap[u], remap[v], w) for u, v, w in self.edges if u in remap and v in remap
        )
        return WeightedGraph(verts, edges)


@dataclass(frozen=True, eq=False)
class StarGraph:
    """Spanning star of an equivalence set: every leaf joins the bridging."""

    set_id: str
    bridging: Descriptor
    leaves: tuple[Descriptor, ...]

    def __post_init__(self):
        object.__setattr__(self, "leaves", tuple(self.leaves))
        if any(l.descriptor_id == self.bridging.descriptor_id for l in self.leaves):
            raise ValueError(f"bridging of star {self.set_id!r} duplicated among leaves")

    @property
    def n_edges(self) -> int:
        return len(self.leaves)


@dataclass(frozen=True, eq=False)
class Model:
    """Trained matching structure.

    Holds the training collections, the equivalence sets with their star
    graphs, the bridging-to-bridging links between collections, and a
    snapshot of the build parameters.  ``pca`` carries the compression
    basis when descriptors were reduced at build time.
    """

    collections: tuple[Collection, ...]
    equivalence_sets: tuple[EquivalenceSet, ...]
    stars: tuple[StarGraph, ...]
    ir_links: tuple[tuple[str, str], ...]
    dim: int
    params: BuildParams
    pca: object | None = None

    def __post_init__(self):
        object.__setattr__(self, "collections", tuple(self.collections))
        object.__setattr__(self, "equivalence_sets", tuple(self.equivalence_sets))
        object.__setattr__(self, "stars", tuple(self.stars))
        object.__setattr__(self, "ir_links", tuple(tuple(l) for l in self.ir_links))
        by_id = {s.set_id: s for s in self.equivalence_sets}
        for a, b in self.ir_links:
            if a not in by_id or b not in by_id:
                raise ValueError(f"ir link ({a!r}, {b!r}) references a missing set")
            if by_id[a].collection_id == by_id[b].collection_id:
                raise ValueError(f"ir link ({a!r}, {b!r}) joins sets of one collection")

    def sets_by_id(self) -> dict[str, EquivalenceSet]:
        return {s.set_id: s for s in self.equivalence_sets}


def plan_ensemble_pairs(
    collection: Collection, diameter_threshold: int
) -> list[tuple[Ensemble, Ensemble]]:
    """Choose which ensemble pairs to correspond.

    Starts from the chain (each ensemble to the next) and keeps inserting an
    edge between a farthest-apart pair until the hop diameter of the plan
    drops to the threshold.
    """
    n = len(collection)
    if n < 2:
        raise GraphBuildError(
            f"collection {collection.collection_id!r} needs >= 2 ensembles to plan pairs"
        )
    if diameter_threshold < 1:
        raise ValueError("diameter_threshold must be >= 1")

    edges = {(i, i + 1) for i in range(n - 1)}

    def hop_distances() -> np.ndarray:
        adj = [[] for _ in range(n)]
        for u, v in edges:
            adj[u].append(v)
            adj[v].append(u)
        dist = np.full((n, n), -1, dtype=int)
        for start in range(n):
            dist[start, start] = 0
            queue = [start]
            while queue:
                nxt_queue = []
                for node in queue:
                    for nxt in adj[node]:
                        if dist[start, nxt] < 0:
                            dist[start, nxt] = dist[start, node] + 1
                            nxt_queue.append(nxt)
                queue = nxt_queue
        return dist

    while True:
        dist = hop_distances()
        diameter = int(dist.max())
        if diameter <= diameter_threshold:
            break
        # lowest-index pair realising the diameter, for determinism
        u, v = np.argwhere(dist == diameter)[0]
        edges.add((min(int(u), int(v)), max(int(u), int(v))))

    ordered = sorted(edges)
    return [(collection.ensembles[u], collection.ensembles[v]) for u, v in ordered]


def build_collection_graph(
    collection: Collection, params: BuildParams | None = None
) -> list[WeightedGraph]:
    """Correspond the planned ensemble pairs and return the connected
    components of the union graph, weights normalised per component.

    Pairs that fail to correspond are skipped with a warning; an empty
    union is a build error.
    """
    params = params or BuildParams()
    plan = plan_ensemble_pairs(collection, params.diameter_threshold)

    vertex_index: dict[str, int] = {}
    vertices: list[Descriptor] = []
    raw_edges: list[tuple[int, int, float]] = []
    edge_seen: set[tuple[int, int]] = set()

    def index_of(d: Descriptor) -> int:
        pos = vertex_index.get(d.descriptor_id)
        if pos is None:
            pos = len(vertices)
            vertex_index[d.descriptor_id] = pos
            vertices.append(d)
        return pos

    for n1, n2 in plan:
        try:
            cset = correspond_ensembles(n1, n2, params.correspondence)
        except (CorrespondenceError, DegenerateGeometryError) as exc:
            log.warning(
                "skipping pair (%s, %s) of collection %s: %s",
                n1.ensemble_id,
                n2.ensemble_id,
                collection.collection_id,
                exc,
            )
            continue
        for pair in cset.pairs:
            u, v = index_of(pair.a), index_of(pair.b)
            key = (min(u, v), max(u, v))
            if key in edge_seen:
                continue
            edge_seen.add(key)
            weight = 1.0 / max(pair.dissim, _WEIGHT_EPS)
            raw_edges.append((key[0], key[1], weight))

    if not raw_edges:
        raise GraphBuildError(
            f"no correspondences produced for collection {collection.collection_id!r}"
        )

    # connected components via union-find over vertex indices
    parent = list(range(len(vertices)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for u, v, _ in raw_edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)

    groups: dict[int, list[int]] = {}
    for i in range(len(vertices)):
        groups.setdefault(find(i), []).append(i)

    components = []
    for root in sorted(groups):
        idx = groups[root]
        remap = {old: new for new, old in enumerate(idx)}
        verts = tuple(vertices[i] for i in idx)
        edges = tuple(
            (remap[u], remap[v], w) for u, v, w in raw_edges if u in remap and v in remap
        )
        components.append(WeightedGraph(verts, edges).normalized())
    return components


def _fiedler_pair(graph: WeightedGraph) -> tuple[float, np.ndarray]:
    """Second-smallest eigenpair of the graph Laplacian."""
    lap = graph.laplacian()
    n = lap.shape[0]
    if n <= _DENSE_EIG_LIMIT:
        values, vectors = np.linalg.eigh(lap)
        return float(values[1]), vectors[:, 1]
    try:
        sparse_lap = scipy.sparse.csc_matrix(lap)
        values, vectors = scipy.sparse.linalg.eigsh(sparse_lap, k=2, sigma=-1e-6, which="LM")
        order = np.argsort(values)
        value = float(values[order[1]])
        vector = vectors[:, order[1]]
        residual = float(np.linalg.norm(lap @ vector - value * vector))
        if residual > _EIG_RESIDUAL_TOL * max(1.0, abs(value)):
            raise RuntimeError(f"eigen residual {residual} too large")
        return value, vector
    except Exception:  # pragma: no cover - fallback path
        values, vectors = np.linalg.eigh(lap)
        return float(values[1]), vectors[:, 1]


def fiedler_value(graph: WeightedGraph) -> float:
    """Algebraic connectivity of the graph (with its given weights)."""
    if graph.n_vertices < 2:
        return 0.0
    return _fiedler_pair(graph)[0]


def _two_means_split(values: np.ndarray) -> np.ndarray:
    """1-D 2-means with centres initialised at min and max; ties go to the
    first (min-seeded) cluster.  Returns a boolean mask of that cluster."""
    c_a, c_b = float(values.min()), float(values.max())
    mask = np.abs(values - c_a) <= np.abs(values - c_b)
    for _ in range(50):
        if not mask.any() or mask.all():
            break
        c_a = float(values[mask].mean())
        c_b = float(values[~mask].mean())
        new_mask = np.abs(values - c_a) <= np.abs(values - c_b)
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    return mask


def fiedler_bipartition(
    graph: WeightedGraph,
) -> tuple[tuple[Descriptor, ...], tuple[Descriptor, ...]]:
    """Split a connected graph in two by clustering its Fiedler vector.

    Computes the Laplacian, takes the eigenvector of the second-smallest
    eigenvalue, and runs 1-D 2-means on its elements.  Both sides of the
    returned partition are non-empty.
    """
    if graph.n_vertices < 3:
        raise ValueError(f"need >= 3 vertices to bipartition, got {graph.n_vertices}")
    if not graph.is_connected():
        raise DisconnectedGraphError("graph is disconnected; split it into components first")

    _, vector = _fiedler_pair(graph)
    mask = _two_means_split(vector)
    if not mask.any() or mask.all():  # pragma: no cover - guarded by connectivity
        raise GraphBuildError("degenerate Fiedler clustering")
    side_a = tuple(v for v, m in zip(graph.vertices, mask) if m)
    side_b = tuple(v for v, m in zip(graph.vertices, mask) if not m)
    return side_a, side_b


def choose_bridging(members, neutral_ensemble_ids) -> Descriptor:
    """Pick the neutral member nearest the member mean (ties by id)."""
    members = tuple(members)
    neutral = [m for m in members if m.ensemble_id in neutral_ensemble_ids]
    if not neutral:
        raise BridgingError("equivalence set has no neutral member")
    if len(neutral) == 1:
        return neutral[0]
    mean = np.mean([m.vector for m in members], axis=0)
    return min(neutral, key=lambda m: (float(np.linalg.norm(m.vector - mean)), m.descriptor_id))


def refine_equivalence_sets(
    components,
    expected_size: int,
    params: BuildParams,
    neutral_ensemble_ids,
    collection_id: str,
) -> list[EquivalenceSet]:
    """Turn graph components into equivalence sets.

    Oversized, weakly connected components are recursively bipartitioned
    (stop once the vertex count is within ``oversize_factor`` of the
    expected size or the algebraic connectivity reaches ``lambda_min``);
    undersized components and components without a neutral member are
    discarded with a warning.
    """
    if expected_size < 1:
        raise ValueError("expected_size must be >= 1")
    oversize_limit = params.oversize_factor * expected_size
    min_size = params.min_size_fraction * expected_size

    final: list[WeightedGraph] = []
    stack = list(components)
    while stack:
        graph = stack.pop(0)
        if graph.n_vertices > oversize_limit and graph.n_vertices >= 3:
            normalised = graph.normalized()
            if fiedler_value(normalised) < params.lambda_min:
                side_a, side_b = fiedler_bipartition(normalised)
                ids_a = {d.descriptor_id for d in side_a}
                idx_a = [i for i, v in enumerate(graph.vertices) if v.descriptor_id in ids_a]
                idx_b = [i for i, v in enumerate(graph.vertices) if v.descriptor_id not in ids_a]
                stack.append(graph.subgraph(idx_a))
                stack.append(graph.subgraph(idx_b))
                continue
        final.append(graph)

    sets: list[EquivalenceSet] = []
    counter = 0
    for graph in final:
        if graph.n_vertices < min_size:
            log.warning(
                "discarding component of %d vertices in collection %s (minimum %.1f)",
                graph.n_vertices,
                collection_id,
                min_size,
            )
            continue
        members = _dedupe_per_ensemble(graph.vertices)
        try:
            bridging = choose_bridging(members, neutral_ensemble_ids)
        except BridgingError:
            log.warning(
                "discarding component of %d vertices in collection %s: no neutral member",
                graph.n_vertices,
                collection_id,
            )
            continue
        set_id = f"{collection_id}:q{counter:04d}"
        counter += 1
        sets.append(EquivalenceSet(set_id, collection_id, members, bridging))
    return sets


def _dedupe_per_ensemble(vertices) -> tuple[Descriptor, ...]:
    """Keep at most one member per ensemble: the one nearest the mean."""
    by_ensemble: dict[str, list[Descriptor]] = {}
    for v in vertices:
        by_ensemble.setdefault(v.ensemble_id, []).append(v)
    if all(len(group) == 1 for group in by_ensemble.values()):
        return tuple(vertices)
    mean = np.mean([v.vector for v in vertices], axis=0)
    keep = set()
    for group in by_ensemble.values():
        best = min(group, key=lambda m: (float(np.linalg.norm(m.vector - mean)), m.descriptor_id))
        keep.add(best.descriptor_id)
    return tuple(v for v in vertices if v.descriptor_id in keep)


@dataclass(frozen=True, eq=False)
class _BridgingSet:
    """Ensemble-shaped view over the bridging descriptors of one collection.

    Bridging descriptors keep their original ensemble ids, so a real
    :class:`Ensemble` cannot hold them; correspondence only needs this
    surface.
    """

    ensemble_id: str
    descriptors: tuple[Descriptor, ...]

    @property
    def dim(self) -> int:
        return self.descriptors[0].dim

    def vectors(self) -> np.ndarray:
        return np.stack([d.vector for d in self.descriptors])

    def keypoints(self) -> np.ndarray:
        return np.stack([d.keypoint for d in self.descriptors])

    def __len__(self) -> int:
        return len(self.descriptors)


def _bridging_pseudo_ensemble(collection: Collection, sets) -> _BridgingSet:
    return _BridgingSet(
        ensemble_id=f"bridging:{collection.collection_id}",
        descriptors=tuple(s.bridging for s in sets),
    )


def link_collections(collection_sets, params: BuildParams | None = None, dim: int | None = None, pca=None) -> Model:
    """Join per-collection equivalence sets into the final model.

    ``collection_sets`` is a sequence of (collection, sets) tuples.  Every
    collection pair (or hub-to-other pair when ``params.hub`` is set) has
    its bridging descriptors corresponded; each matched bridging pair adds
    an identity link between the two sets.  Pairs that cannot be
    corresponded remain unlinked, with a warning.
    """
    params = params or BuildParams()
    collection_sets = [(c, list(s)) for c, s in collection_sets]
    if not collection_sets:
        raise GraphBuildError("no collections with equivalence sets to link")

    all_sets: list[EquivalenceSet] = []
    for _, sets in collection_sets:
        all_sets.extend(sets)
    if not all_sets:
        raise GraphBuildError("no usable equivalence sets")

    if dim is None:
        dim = all_sets[0].bridging.dim

    if params.hub is None:
        pair_indices = list(combinations(range(len(collection_sets)), 2))
    else:
        hub_pos = [
            i for i, (c, _) in enumerate(collection_sets) if c.subject_id == params.hub
        ]
        if not hub_pos:
            raise GraphBuildError(f"hub subject {params.hub!r} not among the training collections")
        hub = hub_pos[0]
        pair_indices = [(min(hub, i), max(hub, i)) for i in range(len(collection_sets)) if i != hub]

    links: list[tuple[str, str]] = []
    for ia, ib in pair_indices:
        coll_a, sets_a = collection_sets[ia]
        coll_b, sets_b = collection_sets[ib]
        if len(sets_a) < 3 or len(sets_b) < 3:
            log.warning(
                "not linking %s and %s: too few bridging descriptors",
                coll_a.collection_id,
                coll_b.collection_id,
            )
            continue
        pseudo_a = _bridging_pseudo_ensemble(coll_a, sets_a)
        pseudo_b = _bridging_pseudo_ensemble(coll_b, sets_b)
        by_id_a = {s.bridging.descriptor_id: s.set_id for s in sets_a}
        by_id_b = {s.bridging.descriptor_id: s.set_id for s in sets_b}
        try:
            cset = correspond_ensembles(pseudo_a, pseudo_b, params.correspondence)
        except (CorrespondenceError, DegenerateGeometryError) as exc:
            log.warning(
                "not linking %s and %s: %s", coll_a.collection_id, coll_b.collection_id, exc
            )
            continue
        for pair in cset.pairs:
            links.append((by_id_a[pair.a.descriptor_id], by_id_b[pair.b.descriptor_id]))

    stars = tuple(
        StarGraph(
            s.set_id,
            s.bridging,
            tuple(m for m in s.members if m.descriptor_id != s.bridging.descriptor_id),
        )
        for s in all_sets
    )
    return Model(
        collections=tuple(c for c, _ in collection_sets),
        equivalence_sets=tuple(all_sets),
        stars=stars,
        ir_links=tuple(links),
        dim=dim,
        params=params,
        pca=pca,
    )


def build_model(training, params: BuildParams | None = None, pca=None) -> Model:
    """Run the whole off-line pipeline over the training collections.

    Collections without a neutral ensemble (or with fewer than two
    ensembles) are rejected with a warning; the build fails only when no
    usable equivalence set results.  The output is a pure function of the
    inputs and parameters.
    """
    params = params or BuildParams()
    training = list(training)
    if not training:
        raise GraphBuildError("empty training set")

    ids = [c.collection_id for c in training]
    if len(set(ids)) != len(ids):
        raise GraphBuildError("training collections have duplicate collection ids")
    dims = {c.dim for c in training}
    if len(dims) != 1:
        raise GraphBuildError(f"training collections mix descriptor dimensions {sorted(dims)}")
    dim = dims.pop()

    collection_sets = []
    for collection in training:
        if not collection.has_neutral:
            log.warning(
                "rejecting collection %s: no neutral ensemble", collection.collection_id
            )
            continue
        if len(collection) < 2:
            log.warning(
                "rejecting collection %s: only %d ensemble(s)",
                collection.collection_id,
                len(collection),
            )
            continue
        try:
            components = build_collection_graph(collection, params)
        except GraphBuildError as exc:
            log.warning("rejecting collection %s: %s", collection.collection_id, exc)
            continue
        sets = refine_equivalence_sets(
            components,
            expected_size=len(collection),
            params=params,
            neutral_ensemble_ids=collection.neutral_ensemble_ids,
            collection_id=collection.collection_id,
        )
        if sets:
            collection_sets.append((collection, sets))
        else:
            log.warning(
                "rejecting collection %s: no equivalence sets survived",
                collection.collection_id,
            )

    if not collection_sets:
        raise GraphBuildError("no usable equivalence sets in the training data")
    return link_collections(collection_sets, params, dim=dim, pca=pca)
