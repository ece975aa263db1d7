import numpy as np
import pytest

from eqgraph import (
    ConfigError,
    EquivalenceSet,
    WorldConfig,
    brute_knn,
    exact_path_oracle,
    generate_probe_ensembles,
    generate_world,
    partition_quality,
)

from conftest import toy_model


class TestGenerateWorld:
    def test_decomposition_exact_when_noiseless(self):
        config = WorldConfig(n_identities=3, n_expressions=3, n_keypoints=5)
        collections, truth = generate_world(config, seed=1)
        for c in collections:
            for e in c.ensembles:
                for d in e.descriptors:
                    subject, expr, kp = truth.descriptor_truth[d.descriptor_id]
                    expected = truth.identity_vectors[subject][kp] + truth.offsets[(subject, expr)][kp]
                    assert np.array_equal(d.vector, expected)

    def test_same_seed_identical(self):
        config = WorldConfig()
        a, _ = generate_world(config, seed=9)
        b, _ = generate_world(config, seed=9)
        for ca, cb in zip(a, b):
            for ea, eb in zip(ca.ensembles, cb.ensembles):
                assert ea.ensemble_id == eb.ensemble_id
                assert np.array_equal(ea.vectors(), eb.vectors())
                assert np.array_equal(ea.keypoints(), eb.keypoints())

    def test_different_seed_differs(self):
        config = WorldConfig()
        a, _ = generate_world(config, seed=1)
        b, _ = generate_world(config, seed=2)
        assert not np.array_equal(a[0].ensembles[0].vectors(), b[0].ensembles[0].vectors())

    def test_dropout_expectation(self):
        config = WorldConfig(n_identities=10, n_expressions=11, n_keypoints=10, dropout=0.1)
        collections, _ = generate_world(config, seed=3)
        sizes = [len(e) for c in collections for e in c.ensembles]
        assert len(sizes) >= 100
        assert abs(np.mean(sizes) - 9.0) <= 0.5

    def test_neutral_offset_is_zero(self):
        config = WorldConfig(n_identities=2, n_expressions=3, n_keypoints=4)
        _, truth = generate_world(config, seed=4)
        for subject in truth.subjects:
            for kp in truth.keypoints:
                assert np.array_equal(truth.offsets[(subject, "neutral")][kp], np.zeros(config.dim))

    def test_identity_separation_floor(self):
        config = WorldConfig(n_identities=5, n_expressions=2, n_keypoints=4, identity_separation=1.0)
        _, truth = generate_world(config, seed=5)
        subjects = truth.subjects
        for kp in truth.keypoints:
            for i in range(len(subjects)):
                for j in range(i + 1, len(subjects)):
                    gap = np.linalg.norm(
                        truth.identity_vectors[subjects[i]][kp] - truth.identity_vectors[subjects[j]][kp]
                    )
                    assert gap >= 1.0

    def test_split_subspaces_disjoint(self):
        config = WorldConfig(n_identities=3, n_expressions=3, n_keypoints=4, split_subspaces=True)
        _, truth = generate_world(config, seed=6)
        half = config.dim // 2
        for per in truth.identity_vectors.values():
            for v in per.values():
                assert np.all(v[half:] == 0.0)
        for (subject, expr), per in truth.offsets.items():
            for v in per.values():
                assert np.all(v[:half] == 0.0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            WorldConfig(n_identities=1)
        with pytest.raises(ConfigError):
            WorldConfig(dropout=1.0)
        with pytest.raises(ConfigError):
            WorldConfig(noise_sigma=-0.1)

    def test_probe_ensembles_share_truth(self):
        config = WorldConfig(n_identities=3, n_expressions=3, n_keypoints=4)
        _, truth = generate_world(config, seed=7)
        probes = generate_probe_ensembles(truth, seed=8, expressions=["e001"], n_per=2)
        assert len(probes) == 6
        for p in probes:
            for d in p.descriptors:
                subject, expr, kp = truth.descriptor_truth[d.descriptor_id]
                assert expr == "e001"
                expected = truth.identity_vectors[subject][kp] + truth.offsets[(subject, expr)][kp]
                assert np.array_equal(d.vector, expected)


class TestBruteKnn:
    def test_all_points(self):
        pts = np.arange(12.0).reshape(4, 3)
        assert list(brute_knn(pts[0], pts, 4)) == [0, 1, 2, 3]

    def test_query_on_stored_point(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(50, 4))
        assert brute_knn(pts[17], pts, 1)[0] == 17

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            brute_knn(np.zeros(2), np.zeros((3, 2)), 4)

    def test_tie_by_index(self):
        pts = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert list(brute_knn(np.zeros(2), pts, 3)) == [0, 1, 2]


class TestExactPathOracle:
    def test_empty_model_is_direct(self):
        model = toy_model([("A", [("A:k0", [("a0", "An", [0.0, 0.0], True)])])], [], dim=2)
        x, y = np.array([5.0, 0.0]), np.array([0.0, 0.0])
        # the lone singleton set cannot beat a path through itself twice:
        # entrance == exit == a0 gives ||(a0-x) + (y-a0)|| = ||y-x||
        assert exact_path_oracle(x, y, model) == pytest.approx(5.0)

    def test_shared_set_cancels(self):
        model = toy_model(
            [("A", [("A:k0", [("a0", "An", [0.0, 0.0], True), ("a1", "Ae", [3.0, 4.0], False)])])],
            [],
            dim=2,
        )
        x = np.array([0.0, 0.0])
        y = np.array([3.0, 4.0])
        assert exact_path_oracle(x, y, model) == 0.0

    def test_never_exceeds_direct(self, small_world):
        _, _, model, _ = small_world
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.normal(scale=3.0, size=model.dim)
            y = rng.normal(scale=3.0, size=model.dim)
            direct = float(np.sqrt(np.sum((x - y) ** 2)))
            assert exact_path_oracle(x, y, model) <= direct

    def test_size_guard(self):
        config = WorldConfig(n_identities=6, n_expressions=3, n_keypoints=12)
        collections, _ = generate_world(config, seed=11)
        from eqgraph import BuildParams, build_model

        model = build_model(collections, BuildParams())
        assert len(model.equivalence_sets) > 64
        with pytest.raises(ValueError):
            exact_path_oracle(np.zeros(model.dim), np.zeros(model.dim), model)


class TestPartitionQuality:
    def world_sets(self):
        config = WorldConfig(n_identities=2, n_expressions=3, n_keypoints=4)
        collections, truth = generate_world(config, seed=12)
        # hand-grouped sets straight from ground truth
        per_label = {}
        for e in collections[0].ensembles:
            for d in e.descriptors:
                per_label.setdefault(truth.keypoint_label(d.descriptor_id), []).append(d)
        return per_label, truth

    def test_ground_truth_grouping_is_pure(self):
        per_label, truth = self.world_sets()
        sets = [
            EquivalenceSet(f"q{i}", "s000", tuple(ms), ms[0])
            for i, ms in enumerate(per_label.values())
        ]
        assert partition_quality(sets, truth) == 1.0

    def test_even_mix_is_half(self):
        per_label, truth = self.world_sets()
        groups = list(per_label.values())
        mixed = []
        for i in range(0, len(groups) - 1, 2):
            # one member of each label, drawn from different ensembles
            a = groups[i][0]
            b = next(m for m in groups[i + 1] if m.ensemble_id != a.ensemble_id)
            mixed.append(EquivalenceSet(f"m{i}", "s000", (a, b), a))
        assert partition_quality(mixed, truth) == 0.5

    def test_empty_rejected(self):
        config = WorldConfig(n_identities=2, n_expressions=2, n_keypoints=3)
        _, truth = generate_world(config, seed=13)
        with pytest.raises(ValueError):
            partition_quality([], truth)
