"""Recognition performance evaluation: CMC and ROC curves.

Scores are dissimilarities (lower means more similar); verification
accepts a pair iff its score is at or below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["LabeledMatrix", "cmc_curve", "roc_curve", "vr_at_far"]


@dataclass(frozen=True, eq=False)
class LabeledMatrix:
    """A dissimilarity matrix with subject labels on both axes.

    Closed-set identification: every probe subject must appear in the
    gallery.
    """

    scores: np.ndarray
    probe_subjects: tuple[str, ...]
    gallery_subjects: tuple[str, ...]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "probe_subjects", tuple(self.probe_subjects))
        object.__setattr__(self, "gallery_subjects", tuple(self.gallery_subjects))
        if scores.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
        if scores.shape != (len(self.probe_subjects), len(self.gallery_subjects)):
            raise ValueError(
                f"label counts {len(self.probe_subjects)}x{len(self.gallery_subjects)} "
                f"do not match matrix shape {scores.shape}"
            )
        missing = set(self.probe_subjects) - set(self.gallery_subjects)
        if missing:
            raise ValueError(f"probe subjects missing from the gallery: {sorted(missing)}")

    def genuine_mask(self) -> np.ndarray:
        probes = np.asarray(self.probe_subjects, dtype=object)
        gallery = np.asarray(self.gallery_subjects, dtype=object)
        return probes[:, None] == gallery[None, :]


def cmc_curve(lm: LabeledMatrix, max_rank: int) -> np.ndarray:
    """Cumulative match characteristic.

    Entry r-1 is the fraction of probes whose true-subject gallery entry
    ranks within the r smallest row values (ascending scores, ties broken
    by gallery index).  Non-decreasing, and 1.0 at the gallery size.
    """
    n_probes, n_gallery = lm.scores.shape
    if not 1 <= max_rank <= n_gallery:
        raise ValueError(f"max_rank must be in [1, {n_gallery}], got {max_rank}")
    genuine = lm.genuine_mask()
    ranks = np.empty(n_probes, dtype=int)
    for i in range(n_probes):
        order = np.argsort(lm.scores[i], kind="stable")
        hits = np.nonzero(genuine[i][order])[0]
        ranks[i] = hits[0] + 1  # best-ranked true entry
    return np.array([(ranks <= r).mean() for r in range(1, max_rank + 1)])


def roc_curve(lm: LabeledMatrix) -> np.ndarray:
    """Verification trade-off as (FAR, VR) points.

    The threshold sweeps every distinct score (plus a point below them
    all, so FAR = 0 is always achieved); FAR is the accepted impostor
    fraction and VR the accepted genuine fraction.  Both are
    non-decreasing along the sweep.
    """
    genuine_mask = lm.genuine_mask()
    genuine = np.sort(lm.scores[genuine_mask])
    impostor = np.sort(lm.scores[~genuine_mask])
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need at least one genuine and one impostor score")

    thresholds = np.unique(lm.scores)
    points = [(0.0, 0.0)]
    for t in thresholds:
        far = float(np.searchsorted(impostor, t, side="right")) / impostor.size
        vr = float(np.searchsorted(genuine, t, side="right")) / genuine.size
        points.append((far, vr))
    return np.array(points)


def vr_at_far(curve: np.ndarray, far_target: float = 0.001) -> float:
    """Verification rate at the largest achieved FAR not exceeding the
    target (step-function convention, no interpolation)."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 2 or curve.shape[1] != 2 or curve.shape[0] == 0:
        raise ValueError("curve must be a non-empty array of (far, vr) points")
    eligible = curve[curve[:, 0] <= far_target]
    if eligible.size == 0:
        raise ValueError("curve has no point with FAR <= target (FAR=0 point missing)")
    best_far = eligible[:, 0].max()
    return float(eligible[eligible[:, 0] == best_far][:, 1].max())
