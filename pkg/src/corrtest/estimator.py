"""scikit-learn style wrapper around the fits and tests.

``X`` is a ``(g, 5)`` array of counts, one row per group, with columns
``m0, m1, m2, n0, n1``.  There is no ``y``: the model is unsupervised.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .inference import METHODS, pairwise_wald, run_tests
from .mle import DOMAINS, MAX_ITER, R_STEP_TOL, constrained_mle, unconstrained_mle
from .model import ModelParams, StudyData, log_likelihood, validate_study


def _as_study(X, labels=None) -> StudyData:
    if isinstance(X, StudyData):
        return validate_study(X)
    arr = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if arr.shape[1] != 5:
        raise ValueError(f"X must have 5 columns (m0, m1, m2, n0, n1), got {arr.shape[1]}")
    return validate_study(StudyData.from_array(arr, labels))


class RosnerHomogeneity(BaseEstimator):
    """Fit Rosner's model with and without equal proportions, then test homogeneity.

    Parameters
    ----------
    methods : tuple of str
        Omnibus tests to run, any of ``"lr"``, ``"wald"``, ``"score"``, ``"donner"``.
    alpha : float
        Level used by :meth:`reject`.
    tol : float
        Stopping tolerance on successive ``R`` iterates.
    max_iter : int
        Iteration cap for the unconstrained fit.
    domain : {"feasible", "likelihood"}
        Admissible region for the group proportions at fixed ``R``.

    Attributes
    ----------
    constrained_, unconstrained_ : MleFit
        The fits under and without homogeneity (``unconstrained_`` is
        None when it cannot be computed, e.g. for a single group).
    pi_, R_, rho_ : ndarray, float, ndarray
        Unconstrained estimates when available, otherwise constrained ones.
    results_ : dict
        :class:`TestResult` per method; empty when fewer than 2 groups.
    """

    def __init__(self, methods=("lr", "wald", "score", "donner"), alpha=0.05,
                 tol=R_STEP_TOL, max_iter=MAX_ITER, domain="feasible"):
        self.methods = methods
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter
        self.domain = domain

    def _validate_params(self):
        unknown = set(m.lower() for m in self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")

    def fit(self, X, y=None, labels=None):
        self._validate_params()
        data = _as_study(X, labels)
        self.data_ = data
        self.n_groups_ = data.g
        self.constrained_ = constrained_mle(data)
        self.unconstrained_ = None
        if data.M > 0:
            self.unconstrained_ = unconstrained_mle(data, tol=self.tol, max_iter=self.max_iter,
                                                    domain=self.domain)
        best = self.unconstrained_ or self.constrained_
        self.pi_ = np.asarray(best.pi_hat)
        self.R_ = best.R_hat
        self.rho_ = np.asarray(best.rho_hat)
        self.results_ = {}
        if data.g >= 2:
            tests = run_tests(data, [m.lower() for m in self.methods],
                              h0=self.constrained_, h1=self.unconstrained_)
            self.results_ = {method.value: result for method, result in tests.items()}
        return self

    def score(self, X, y=None) -> float:
        """Log-likelihood of ``X`` at the fitted unconstrained parameters."""
        check_is_fitted(self, "pi_")
        data = _as_study(X)
        return log_likelihood(data, ModelParams(self.pi_, self.R_))

    def p_values(self) -> dict:
        check_is_fitted(self, "results_")
        return {name: r.p_value for name, r in self.results_.items()}

    def reject(self) -> dict:
        """Whether each test rejects homogeneity at level ``alpha``."""
        return {name: p <= self.alpha for name, p in self.p_values().items()}

    def pairwise(self, i: int, j: int):
        """Pairwise Wald test of ``pi_i = pi_j`` (zero-based group indices)."""
        check_is_fitted(self, "unconstrained_")
        return pairwise_wald(self.data_, i, j, h1=self.unconstrained_)
