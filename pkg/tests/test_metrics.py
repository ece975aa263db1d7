import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eqgraph import LabeledMatrix, cmc_curve, roc_curve, vr_at_far


class TestLabeledMatrix:
    def test_probe_subject_must_be_in_gallery(self):
        with pytest.raises(ValueError):
            LabeledMatrix(np.zeros((1, 2)), ("alice",), ("bob", "carol"))

    def test_shape_check(self):
        with pytest.raises(ValueError):
            LabeledMatrix(np.zeros((2, 2)), ("a",), ("a", "b"))


class TestCmc:
    def test_true_match_at_row_minimum(self):
        lm = LabeledMatrix(np.array([[0.1, 0.5, 0.9]]), ("a",), ("a", "b", "c"))
        rates = cmc_curve(lm, 3)
        assert rates[0] == 1.0

    def test_hand_enumerated_ranks(self):
        # true matches at ranks {1, 2, 2} -> CMC {1/3, 1, 1}
        scores = np.array(
            [
                [0.1, 0.5, 0.9],  # probe a: true at rank 1
                [0.4, 0.6, 0.9],  # probe b: true at rank 2
                [0.3, 0.8, 0.5],  # probe c: true at rank 2
            ]
        )
        lm = LabeledMatrix(scores, ("a", "b", "c"), ("a", "b", "c"))
        rates = cmc_curve(lm, 3)
        assert rates == pytest.approx([1 / 3, 1.0, 1.0])

    def test_ties_broken_by_gallery_index(self):
        # equal scores: the earlier gallery column wins the rank
        lm = LabeledMatrix(np.array([[0.5, 0.5]]), ("b",), ("a", "b"))
        rates = cmc_curve(lm, 2)
        assert rates[0] == 0.0 and rates[1] == 1.0

    @given(
        st.integers(min_value=2, max_value=6).flatmap(
            lambda n: st.lists(
                st.lists(st.floats(0, 1, allow_nan=False), min_size=n, max_size=n),
                min_size=1,
                max_size=6,
            ).map(lambda rows: (n, rows))
        )
    )
    def test_monotone_and_final_one(self, data):
        n, rows = data
        gallery = tuple(f"s{i}" for i in range(n))
        probes = tuple(f"s{i % n}" for i in range(len(rows)))
        lm = LabeledMatrix(np.asarray(rows), probes, gallery)
        rates = cmc_curve(lm, n)
        assert all(b >= a for a, b in zip(rates, rates[1:]))
        assert rates[-1] == 1.0

    def test_max_rank_validated(self):
        lm = LabeledMatrix(np.zeros((1, 2)), ("a",), ("a", "b"))
        with pytest.raises(ValueError):
            cmc_curve(lm, 3)


class TestRoc:
    def two_by_two(self):
        # genuine scores {0.1, 0.4}; impostor scores {0.3, 0.9}
        scores = np.array([[0.1, 0.3], [0.9, 0.4]])
        return LabeledMatrix(scores, ("a", "b"), ("a", "b"))

    def test_hand_enumerated_point(self):
        curve = roc_curve(self.two_by_two())
        by_threshold = {tuple(p) for p in curve.tolist()}
        assert (0.5, 0.5) in by_threshold  # threshold 0.3

    def test_perfect_separation(self):
        scores = np.array([[0.0, 1.0], [1.0, 0.1]])
        curve = roc_curve(LabeledMatrix(scores, ("a", "b"), ("a", "b")))
        assert vr_at_far(curve, 0.0) == 1.0

    def test_far_zero_point_always_present(self):
        # the smallest score is an impostor score
        scores = np.array([[0.5, 0.01], [0.02, 0.6]])
        curve = roc_curve(LabeledMatrix(scores, ("a", "b"), ("a", "b")))
        assert (curve[:, 0] == 0.0).any()

    def test_monotone_along_sweep(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=(6, 6))
        subjects = tuple(f"s{i}" for i in range(6))
        curve = roc_curve(LabeledMatrix(scores, subjects, subjects))
        assert np.all(np.diff(curve[:, 0]) >= 0)
        assert np.all(np.diff(curve[:, 1]) >= 0)
        assert np.all((curve >= 0.0) & (curve <= 1.0))

    def test_degenerate_label_set_rejected(self):
        # single probe/gallery cell: no impostor scores exist
        lm = LabeledMatrix(np.array([[0.5]]), ("a",), ("a",))
        with pytest.raises(ValueError):
            roc_curve(lm)

    def test_identical_distributions_track_diagonal(self):
        rng = np.random.default_rng(1)
        n = 40
        scores = rng.uniform(size=(n, n))  # genuine and impostor exchangeable
        subjects = tuple(f"s{i}" for i in range(n))
        curve = roc_curve(LabeledMatrix(scores, subjects, subjects))
        gaps = np.abs(curve[:, 1] - curve[:, 0])
        assert gaps.max() <= 0.15


class TestVrAtFar:
    def test_exact_point(self):
        curve = np.array([[0.0, 0.5], [0.001, 0.97], [0.01, 0.99]])
        assert vr_at_far(curve, 0.001) == 0.97

    def test_below_smallest_positive_far(self):
        curve = np.array([[0.0, 0.6], [0.05, 0.9]])
        assert vr_at_far(curve, 0.001) == 0.6

    def test_two_by_two_convention(self):
        # 2-genuine/2-impostor example: below FAR 0.5 the step value is the
        # VR at FAR 0 (threshold 0.1); at FAR 0.5 threshold 0.4 reaches VR 1
        scores = np.array([[0.1, 0.3], [0.9, 0.4]])
        curve = roc_curve(LabeledMatrix(scores, ("a", "b"), ("a", "b")))
        assert vr_at_far(curve, 0.25) == 0.5
        assert vr_at_far(curve, 0.5) == 1.0
        assert vr_at_far(curve, 1.0) == 1.0
