"""Fisher information, its block inverse, and the homogeneity tests.

The information matrix has a diagonal ``pi`` block, so its inverse is
available in closed form.  Every test statistic with a published
simplified form is computed both ways and the two are cross-checked.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc

from .exceptions import (
    DegenerateData,
    DomainError,
    RNotEstimable,
    SimplifiedFormMismatch,
    SingularInformation,
)
from .mle import MleFit, constrained_mle, score_gradient, unconstrained_mle
from .model import ModelParams, StudyData, validate_study

AGREEMENT_RTOL = 1e-8


class TestMethod(str, enum.Enum):
    LR = "LR"
    WALD = "Wald"
    SCORE = "Score"
    DONNER = "DonnerAdjusted"
    PAIRWISE_WALD = "PairwiseWald"

    __test__ = False


@dataclass(frozen=True)
class TestResult:
    method: TestMethod
    statistic: float
    df: int
    p_value: float
    pair: tuple[int, int] | None = None

    __test__ = False

    def as_dict(self) -> dict:
        out = {
            "method": self.method.value,
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
        }
        if self.pair is not None:
            out["pair"] = list(self.pair)
        return out


def chi_square_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def _result(method, stat, df, pair=None):
    return TestResult(method, float(stat), int(df), chi_square_sf(stat, df), pair)


# --- information ----------------------------------------------------------

@dataclass(frozen=True)
class InfoMatrix:
    """Expected information for ``(pi_1, ..., pi_g, R)``.

    Only ``a`` (the ``pi`` diagonal), ``b`` (the ``pi``-``R`` column) and
    ``h`` (the ``R`` entry) are free; all other entries are zero.
    """

    a: np.ndarray
    b: np.ndarray
    h: float
    evaluated_at: ModelParams
    sizes: tuple[tuple[int, int], ...]

    @property
    def matrix(self) -> np.ndarray:
        g = self.a.size
        out = np.zeros((g + 1, g + 1))
        out[np.arange(g), np.arange(g)] = self.a
        out[:g, g] = out[g, :g] = self.b
        out[g, g] = self.h
        return out


def information_batch(counts, pi, R):
    """Information entries ``(a, b, h)`` for stacked studies.

    ``counts`` is ``(B, g, 5)``, ``pi`` is ``(B, g)`` and ``R`` is ``(B,)``;
    returns ``a`` and ``b`` of shape ``(B, g)`` and ``h`` of shape ``(B,)``.
    Entries are ``nan`` where the parameters are not interior.
    """
    counts = np.asarray(counts, dtype=float)
    m = counts[..., :3].sum(axis=-1)
    n = counts[..., 3:].sum(axis=-1)
    Rg = np.asarray(R, dtype=float)[..., None]
    p0 = Rg * pi**2 - 2 * pi + 1
    q = 1 - Rg * pi
    bil = m > 0
    bad = (pi <= 0) | (pi >= 1) | ~(Rg > 0) | (bil & ((p0 <= 0) | (q <= 0)))
    p0 = np.where(bil & ~bad, p0, 1.0)
    q = np.where(bil & ~bad, q, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = 2 * m * (2 * Rg**2 * pi**2 - Rg * pi**2 - 2 * Rg * pi + 1) / (pi * p0 * q) + n / (pi * (1 - pi))
        b = -2 * (1 - Rg) * pi**2 * m / (p0 * q)
        h = np.sum(pi**2 * m * (Rg * pi - 2 * pi + 1) / (Rg * p0 * q), axis=-1)
    a = np.where(bad, np.nan, a)
    b = np.where(bad, np.nan, b)
    h = np.where(bad.any(axis=-1), np.nan, h)
    return a, b, h


def information_matrix(params: ModelParams, data: StudyData) -> InfoMatrix:
    """Expected information at ``params`` for the group sizes in ``data``."""
    pi = np.asarray(params.pi, dtype=float)
    if pi.size != data.g:
        raise ValueError(f"{pi.size} proportions for {data.g} groups")
    a, b, h = information_batch(data.counts[None], pi[None], np.array([params.R]))
    if not (np.all(np.isfinite(a)) and np.isfinite(h[0])):
        raise DomainError("information needs interior parameters")
    sizes = tuple((int(mi), int(ni)) for mi, ni in zip(data.m, data.n))
    return InfoMatrix(a[0], b[0], float(h[0]), params, sizes)


def _schur(info: InfoMatrix) -> float:
    return info.h - float(np.sum(info.b**2 / info.a))


def information_inverse(params: ModelParams, data: StudyData) -> np.ndarray:
    """Closed-form inverse of :func:`information_matrix`."""
    info = information_matrix(params, data)
    return _inverse_from(info)


def _inverse_from(info: InfoMatrix) -> np.ndarray:
    a, b = info.a, info.b
    schur = _schur(info)
    if schur <= 1e-12:
        raise SingularInformation(f"R-block Schur complement {schur:.3g} is not positive")
    f = 1.0 / schur
    w = b / a
    g = a.size
    inv = np.empty((g + 1, g + 1))
    inv[:g, :g] = f * np.outer(w, w)
    inv[np.arange(g), np.arange(g)] += 1.0 / a
    inv[:g, g] = inv[g, :g] = -w * f
    inv[g, g] = f
    return inv


def _check_agreement(name, matrix_value, simplified_value):
    scale = max(abs(matrix_value), abs(simplified_value))
    if abs(matrix_value - simplified_value) > AGREEMENT_RTOL * scale + 1e-12:
        raise SimplifiedFormMismatch(
            f"{name}: matrix form {matrix_value!r} vs simplified form {simplified_value!r}",
            matrix_value,
            simplified_value,
        )


def _require_groups(data: StudyData):
    if data.g < 2:
        raise ValueError("need at least 2 groups")
    if data.M == 0:
        raise RNotEstimable("no bilateral subjects: R is not estimable")


# --- likelihood ratio -----------------------------------------------------

def lr_test(data: StudyData, h0: MleFit | None = None, h1: MleFit | None = None) -> TestResult:
    data = validate_study(data)
    _require_groups(data)
    h0 = h0 or constrained_mle(data)
    h1 = h1 or unconstrained_mle(data)
    stat = 2.0 * (h1.log_lik - h0.log_lik)
    if -1e-9 < stat < 0:
        stat = 0.0
    return _result(TestMethod.LR, stat, data.g - 1)


# --- Wald -----------------------------------------------------------------

def contrast_matrix(g: int) -> np.ndarray:
    """Successive differences ``pi_k - pi_{k+1}``; the ``R`` column is zero."""
    C = np.zeros((g - 1, g + 1))
    idx = np.arange(g - 1)
    C[idx, idx] = 1.0
    C[idx, idx + 1] = -1.0
    return C


def _wald_quadratic(beta, inv, C):
    cb = C @ beta
    return float(cb @ np.linalg.solve(C @ inv @ C.T, cb))


def wald_simplified(pi, info: InfoMatrix) -> float:
    """Omnibus Wald statistic written through ``a``, ``b`` and ``h`` only."""
    a, b, h = info.a, info.b, info.h
    pi = np.asarray(pi, dtype=float)
    sa, sb = a.sum(), b.sum()
    D = sb * (np.outer(b, a) + np.outer(a, b)) - h * np.outer(a, a) - sa * np.outer(b, b)
    diag = (h * a - b**2) * (sa - a) - a * (sb - b) ** 2
    D[np.diag_indices_from(D)] = diag
    return float(pi @ D @ pi / (h * sa - sb**2))


def wald_test(data: StudyData, h1: MleFit | None = None, check: bool = True) -> TestResult:
    data = validate_study(data)
    _require_groups(data)
    h1 = h1 or unconstrained_mle(data)
    info = information_matrix(h1.params, data)
    inv = _inverse_from(info)
    beta = np.append(h1.pi_hat, h1.R_hat)
    stat = _wald_quadratic(beta, inv, contrast_matrix(data.g))
    if check:
        _check_agreement("Wald", stat, wald_simplified(h1.pi_hat, info))
    return _result(TestMethod.WALD, max(stat, 0.0), data.g - 1)


def pairwise_wald_simplified(pi, info: InfoMatrix, i: int, j: int) -> float:
    a, b, h = info.a, info.b, info.h
    ratio = b**2 / a
    others = ratio.sum() - ratio[i] - ratio[j]
    num = a[i] * a[j] * (pi[i] - pi[j]) ** 2 * (ratio.sum() - h)
    den = (a[i] + a[j]) * (others - h) + (b[i] + b[j]) ** 2
    return float(num / den)


def pairwise_wald(data: StudyData, i: int, j: int, h1: MleFit | None = None,
                  check: bool = True) -> TestResult:
    """Wald test of ``pi_i = pi_j`` (zero-based indices) at the unconstrained fit."""
    data = validate_study(data)
    _require_groups(data)
    if i == j or not (0 <= i < data.g and 0 <= j < data.g):
        raise ValueError(f"invalid group pair ({i}, {j}) for {data.g} groups")
    h1 = h1 or unconstrained_mle(data)
    info = information_matrix(h1.params, data)
    inv = _inverse_from(info)
    c = np.zeros((1, data.g + 1))
    c[0, i], c[0, j] = 1.0, -1.0
    beta = np.append(h1.pi_hat, h1.R_hat)
    stat = _wald_quadratic(beta, inv, c)
    if check:
        _check_agreement("pairwise Wald", stat, pairwise_wald_simplified(h1.pi_hat, info, i, j))
    return _result(TestMethod.PAIRWISE_WALD, max(stat, 0.0), 1, pair=(i, j))


# --- score ----------------------------------------------------------------

def score_simplified(U, info: InfoMatrix) -> float:
    a, b = info.a, info.b
    U = np.asarray(U, dtype=float)
    return float(np.sum(U**2 / a) + np.sum(b * U / a) ** 2 / _schur(info))


def score_test(data: StudyData, h0: MleFit | None = None, check: bool = True) -> TestResult:
    data = validate_study(data)
    _require_groups(data)
    h0 = h0 or constrained_mle(data)
    params = h0.params
    U = score_gradient(data, params)
    U[-1] = 0.0
    info = information_matrix(params, data)
    inv = _inverse_from(info)
    stat = float(U @ inv @ U)
    if check:
        _check_agreement("score", stat, score_simplified(U[:-1], info))
    return _result(TestMethod.SCORE, max(stat, 0.0), data.g - 1)


# --- Donner's adjusted chi-square -----------------------------------------

def anova_icc_batch(counts) -> np.ndarray:
    """One-way ANOVA intraclass correlation for stacked ``(B, g, 5)`` counts.

    Subjects are clusters of size 2 (bilateral) or 1 (unilateral); cluster
    totals are centred on their own group's proportion.  Returns 0 where
    the estimator is undefined.
    """
    X = np.asarray(counts, dtype=float)
    m0, m1, m2, n0, n1 = (X[..., k] for k in range(5))
    g = X.shape[-2]
    n_clusters = X.sum(axis=(-2, -1))
    organs_g = 2 * (m0 + m1 + m2) + n0 + n1
    n_organs = organs_g.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(organs_g > 0, (m1 + 2 * m2 + n1) / organs_g, 0.0)
        # sum over clusters of (y - k p)^2 / k, and of y (k - y) / k
        ssb = np.sum(
            m0 * (2 * p) ** 2 / 2 + m1 * (1 - 2 * p) ** 2 / 2 + m2 * (2 - 2 * p) ** 2 / 2
            + n0 * p**2 + n1 * (1 - p) ** 2,
            axis=-1,
        )
        ssw = 0.5 * m1.sum(axis=-1)
        msb = ssb / (n_clusters - g)
        msw = ssw / (n_organs - n_clusters)
        k0 = (n_organs - np.sum(np.where(organs_g > 0, (4 * (m0 + m1 + m2) + n0 + n1) / organs_g, 0.0),
                                axis=-1)) / (n_clusters - g)
        den = msb + (k0 - 1) * msw
        rho = (msb - msw) / den
    ok = (n_organs - n_clusters > 0) & (n_clusters - g > 0) & (den > 0)
    return np.where(ok & np.isfinite(rho), rho, 0.0)


def anova_icc(data: StudyData) -> float:
    """One-way ANOVA estimate of the intraclass correlation for one study."""
    return float(anova_icc_batch(data.counts[None])[0])


def donner_batch(counts, rho=None):
    """Donner's adjusted chi-square for stacked studies.

    Returns ``(statistic, valid)``; ``valid`` is False where the pooled
    organ response rate is 0 or 1 or a design effect is not positive.
    """
    X = np.asarray(counts, dtype=float)
    m = X[..., :3].sum(axis=-1)
    n = X[..., 3:].sum(axis=-1)
    A = X[..., 1] + X[..., 4] + 2 * X[..., 2]
    Mi = 2 * m + n
    theta = A.sum(axis=-1) / Mi.sum(axis=-1)
    if rho is None:
        rho = anova_icc_batch(X)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), theta.shape)
    deff = (2 * m * (1 + rho[..., None]) + n) / Mi
    t = theta[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        pearson = (A - Mi * t) ** 2 / (Mi * t) + (Mi - A - Mi * (1 - t)) ** 2 / (Mi * (1 - t))
        stat = np.sum(pearson / deff, axis=-1)
    valid = (theta > 0) & (theta < 1) & np.all(deff > 0, axis=-1)
    return np.where(valid, stat, np.nan), valid


def donner_adjusted_test(data: StudyData, rho: float | None = None) -> TestResult:
    """Pearson chi-square on organ counts, each group's term deflated by its design effect.

    ``rho`` defaults to :func:`anova_icc`.
    """
    data = validate_study(data)
    if data.g < 2:
        raise ValueError("need at least 2 groups")
    X = data.counts
    A = X[:, 1] + X[:, 4] + 2 * X[:, 2]
    theta = A.sum() / (2 * data.m + data.n).sum()
    if theta <= 0 or theta >= 1:
        raise DegenerateData("pooled organ response rate is 0 or 1")
    stat, valid = donner_batch(X[None], rho)
    if not valid[0]:
        raise DegenerateData(f"nonpositive design effect at rho={rho:.4g}")
    return _result(TestMethod.DONNER, float(stat[0]), data.g - 1)


METHODS = {
    "lr": TestMethod.LR,
    "wald": TestMethod.WALD,
    "score": TestMethod.SCORE,
    "donner": TestMethod.DONNER,
}


def run_tests(data: StudyData, methods=("lr", "wald", "score", "donner"), check: bool = True,
              h0: MleFit | None = None, h1: MleFit | None = None):
    """Run several omnibus tests, fitting each model at most once."""
    data = validate_study(data)
    if data.g < 2:
        raise ValueError("need at least 2 groups")
    wanted = [METHODS[m] if not isinstance(m, TestMethod) else m for m in methods]
    if h0 is None and {TestMethod.LR, TestMethod.SCORE} & set(wanted):
        h0 = constrained_mle(data)
    if h1 is None and {TestMethod.LR, TestMethod.WALD} & set(wanted):
        h1 = unconstrained_mle(data)
    out = {}
    for method in wanted:
        if method is TestMethod.LR:
            out[method] = lr_test(data, h0=h0, h1=h1)
        elif method is TestMethod.WALD:
            out[method] = wald_test(data, h1=h1, check=check)
        elif method is TestMethod.SCORE:
            out[method] = score_test(data, h0=h0, check=check)
        elif method is TestMethod.DONNER:
            out[method] = donner_adjusted_test(data)
    return out


# --- batched statistics ---------------------------------------------------

@dataclass
class BatchStatistics:
    """Omnibus statistics for a stack of studies.

    ``stats[name]`` holds one value per study and ``valid[name]`` marks the
    studies where that statistic is defined (its fits converged to interior
    points and the information is invertible).
    """

    stats: dict
    valid: dict
    h0: object = None
    h1: object = None


def _wald_batch(pi, a, b, h):
    """Matrix-form omnibus Wald statistic using the closed-form inverse."""
    B, g = pi.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        f = 1.0 / (h - np.sum(b**2 / a, axis=-1))
        w = b / a
        inv = f[:, None, None] * w[:, :, None] * w[:, None, :]
        idx = np.arange(g)
        inv[:, idx, idx] += 1.0 / a
        C = contrast_matrix(g)[:, :g]
        cb = pi @ C.T
        V = C @ inv @ C.T
    ok = np.all(np.isfinite(V), axis=(1, 2)) & np.isfinite(f) & (f > 0)
    V[~ok] = np.eye(g - 1)
    stat = np.einsum("bi,bi->b", cb, np.linalg.solve(V, cb[..., None])[..., 0])
    return np.where(ok, stat, np.nan), ok


def _score_batch(U, a, b, h):
    with np.errstate(divide="ignore", invalid="ignore"):
        schur = h - np.sum(b**2 / a, axis=-1)
        stat = np.sum(U**2 / a, axis=-1) + np.sum(b * U / a, axis=-1) ** 2 / schur
    ok = np.isfinite(stat) & (schur > 1e-12)
    return np.where(ok, stat, np.nan), ok


def batch_statistics(counts, methods=("lr", "wald", "score", "donner"),
                     domain: str = "feasible") -> BatchStatistics:
    """Compute the requested omnibus statistics for every study in ``counts``.

    Each fit is run once for the whole stack.  A statistic that cannot be
    computed for a study is ``nan`` there and its ``valid`` flag is False.
    """
    from .mle import constrained_mle_batch, gradient_batch, unconstrained_mle_batch

    counts = np.asarray(counts, dtype=float)
    wanted = [METHODS[m].value if not isinstance(m, TestMethod) else m.value for m in methods]
    stats, valid = {}, {}
    h0 = h1 = None
    if {"LR", "Score", "Wald"} & set(wanted):
        h0 = constrained_mle_batch(counts)
    if {"LR", "Wald"} & set(wanted):
        R_init = np.where(h0.ok, h0.R, 1.0)
        h1 = unconstrained_mle_batch(counts, R_init, domain=domain)
    if "LR" in wanted:
        ok = h0.ok & h1.converged
        stat = 2.0 * (h1.log_lik - h0.log_lik)
        stat = np.where((stat < 0) & (stat > -1e-9), 0.0, stat)
        ok &= stat >= 0
        stats["LR"], valid["LR"] = np.where(ok, stat, np.nan), ok
    if "Wald" in wanted:
        a, b, h = information_batch(counts, h1.pi, h1.R)
        stat, ok = _wald_batch(h1.pi, a, b, h)
        ok &= h1.converged
        stats["Wald"], valid["Wald"] = np.where(ok, np.maximum(stat, 0.0), np.nan), ok
    if "Score" in wanted:
        pi0 = np.broadcast_to(h0.pi[:, None], counts.shape[:2])
        R0 = np.where(h0.ok, h0.R, 1.0)
        U, _ = gradient_batch(counts, pi0, R0)
        a, b, h = information_batch(counts, pi0, R0)
        stat, ok = _score_batch(U, a, b, h)
        ok &= h0.ok
        stats["Score"], valid["Score"] = np.where(ok, np.maximum(stat, 0.0), np.nan), ok
    if "DonnerAdjusted" in wanted:
        stats["DonnerAdjusted"], valid["DonnerAdjusted"] = donner_batch(counts)
    return BatchStatistics(stats, valid, h0, h1)
