import numpy as np
import pytest

from eqgraph import (
    BuildParams,
    Collection,
    Descriptor,
    Ensemble,
    EquivalenceSet,
    Model,
    StarGraph,
    WorldConfig,
    build_index,
    build_model,
    generate_world,
)


def make_descriptor(vector, keypoint=(0.0, 0.0, 0.0), d_id="d0", e_id="e0", c_id="c0"):
    return Descriptor(
        vector=np.asarray(vector, dtype=float),
        keypoint=np.asarray(keypoint, dtype=float),
        descriptor_id=d_id,
        ensemble_id=e_id,
        collection_id=c_id,
    )


def make_ensemble(vectors, keypoints=None, e_id="e0", subject="s0", expression="neutral", c_id=None):
    c_id = c_id or subject
    vectors = np.asarray(vectors, dtype=float)
    if keypoints is None:
        keypoints = [(10.0 * i, 0.0, 0.0) for i in range(len(vectors))]
    descriptors = tuple(
        make_descriptor(v, k, d_id=f"{e_id}/k{i:03d}", e_id=e_id, c_id=c_id)
        for i, (v, k) in enumerate(zip(vectors, keypoints))
    )
    return Ensemble(ensemble_id=e_id, subject_id=subject, expression=expression, descriptors=descriptors)


def toy_model(collections_spec, links, dim, params=None):
    """Hand-crafted model for matcher unit tests.

    collections_spec: list of (collection_id, sets) where sets is a list of
    (set_id, members) and members a list of
    (descriptor_id, ensemble_id, vector, bridging_flag).
    """
    collections = []
    all_sets = []
    for collection_id, sets in collections_spec:
        ensembles: dict[str, list[Descriptor]] = {}
        for set_id, members in sets:
            descs = []
            bridging = None
            for d_id, e_id, vector, is_bridging in members:
                d = make_descriptor(vector, d_id=d_id, e_id=e_id, c_id=collection_id)
                descs.append(d)
                ensembles.setdefault(e_id, []).append(d)
                if is_bridging:
                    bridging = d
            all_sets.append(EquivalenceSet(set_id, collection_id, tuple(descs), bridging))
        ens = tuple(
            Ensemble(
                ensemble_id=e_id,
                subject_id=collection_id,
                expression="neutral" if e_id.endswith("n") else "exp",
                descriptors=tuple(members),
            )
            for e_id, members in ensembles.items()
        )
        collections.append(Collection(collection_id, collection_id, ens))
    stars = tuple(
        StarGraph(
            s.set_id,
            s.bridging,
            tuple(m for m in s.members if m.descriptor_id != s.bridging.descriptor_id),
        )
        for s in all_sets
    )
    return Model(
        collections=tuple(collections),
        equivalence_sets=tuple(all_sets),
        stars=stars,
        ir_links=tuple(links),
        dim=dim,
        params=params or BuildParams(),
    )


@pytest.fixture(scope="session")
def small_world():
    """Noiseless 4-identity world with its trained model and index."""
    config = WorldConfig(n_identities=4, n_expressions=3, n_keypoints=6)
    collections, truth = generate_world(config, seed=42)
    model = build_model(collections, BuildParams())
    return collections, truth, model, build_index(model)


@pytest.fixture(scope="session")
def split_world():
    """Noiseless world with disjoint identity/expression subspaces."""
    config = WorldConfig(
        n_identities=4, n_expressions=4, n_keypoints=6, split_subspaces=True, expression_scale=2.0
    )
    collections, truth = generate_world(config, seed=7)
    model = build_model(collections, BuildParams())
    return collections, truth, model, build_index(model)
