"""Estimator-style front door to the whole pipeline.

``ExpressionInvariantMatcher`` follows the scikit-learn conventions
(constructor stores parameters verbatim, ``fit`` learns state into
underscore attributes, ``get_params``/``set_params``/``clone`` work), so
the matcher slots into the wider ecosystem even though its inputs are
descriptor collections rather than rectangular arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .correspondence import CorrespondenceParams
from .graphbuild import BuildParams, build_model
from .matching import MatchParams, dissimilarity_matrix

__all__ = ["ExpressionInvariantMatcher"]


class ExpressionInvariantMatcher(BaseEstimator):
    """Learn the equivalence/identity graph from training collections and
    score probe ensembles against gallery ensembles.

    Parameters mirror the build and match knobs; see
    :class:`~eqgraph.graphbuild.BuildParams`,
    :class:`~eqgraph.correspondence.CorrespondenceParams` and
    :class:`~eqgraph.matching.MatchParams`.  With ``plain=True`` the graph
    is ignored and pairs are scored by direct distances only (the
    comparison baseline).
    """

    def __init__(
        self,
        diameter_threshold: int = 2,
        e_th: float = 4.0,
        max_iters: int = 30,
        convergence_eps: float = 1e-4,
        vicinity_radius: float = 8.0,
        lambda_min: float = 0.2,
        oversize_factor: float = 1.5,
        min_size_fraction: float = 0.5,
        hub: str | None = None,
        vote_k: int = 9,
        gate_candidates: int = 3,
        refine_iters: int = 6,
        top_n: int = 40,
        plain: bool = False,
        n_jobs: int = 1,
    ):
        self.diameter_threshold = diameter_threshold
        self.e_th = e_th
        self.max_iters = max_iters
        self.convergence_eps = convergence_eps
        self.vicinity_radius = vicinity_radius
        self.lambda_min = lambda_min
        self.oversize_factor = oversize_factor
        self.min_size_fraction = min_size_fraction
        self.hub = hub
        self.vote_k = vote_k
        self.gate_candidates = gate_candidates
        self.refine_iters = refine_iters
        self.top_n = top_n
        self.plain = plain
        self.n_jobs = n_jobs

    def _build_params(self) -> BuildParams:
        return BuildParams(
            diameter_threshold=self.diameter_threshold,
            lambda_min=self.lambda_min,
            oversize_factor=self.oversize_factor,
            min_size_fraction=self.min_size_fraction,
            hub=self.hub,
            correspondence=CorrespondenceParams(
                e_th=self.e_th,
                max_iters=self.max_iters,
                convergence_eps=self.convergence_eps,
                vicinity_radius=self.vicinity_radius,
            ),
        )

    def _match_params(self) -> MatchParams:
        return MatchParams(
            vote_k=self.vote_k,
            gate_candidates=self.gate_candidates,
            refine_iters=self.refine_iters,
            top_n=self.top_n,
        )

    def fit(self, X, y=None):
        """Build the model from training collections.  ``y`` is ignored."""
        self.model_ = build_model(list(X), self._build_params())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ExpressionInvariantMatcher is not fitted; call fit first")

    def dissimilarity(self, probes, galleries) -> np.ndarray:
        """Normalised probe-by-gallery dissimilarity matrix in [0, 1]."""
        self._check_fitted()
        return dissimilarity_matrix(
            probes,
            galleries,
            self.model_,
            params=self._match_params(),
            plain=self.plain,
            n_jobs=self.n_jobs,
        )

    def predict(self, probes, galleries) -> list[str]:
        """Closed-set identification: the best-matching gallery subject per
        probe (ties by gallery order)."""
        galleries = list(galleries)
        matrix = self.dissimilarity(probes, galleries)
        winners = np.argmin(matrix, axis=1)
        return [galleries[j].subject_id for j in winners]
