"""Maximum likelihood estimation under Rosner's model.

Two fits are needed by the homogeneity tests:

* the constrained fit (``pi_1 = ... = pi_g``), which has a closed form, and
* the unconstrained fit, where each ``pi_i`` solves a quartic for fixed ``R``
  and ``R`` is updated by Fisher scoring.

The kernels here are batched: ``counts`` has shape ``(B, g, 5)``, ``pi`` has
shape ``(B, g)`` and ``R`` has shape ``(B,)``, so the simulation harness can
fit thousands of replicates per call.  The single-study functions at the end
of the module are thin wrappers that turn flags into exceptions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .exceptions import (
    DegenerateData,
    DomainError,
    NoConvergence,
    NoInteriorRoot,
    RNotEstimable,
)
from .model import (
    FEASIBILITY_TOL,
    GroupCounts,
    ModelParams,
    StudyData,
    pi_upper,
    rho_from,
    validate_study,
)

GRADIENT_TOL = 1e-6
R_STEP_TOL = 1e-5
MAX_ITER = 500
MAX_HALVINGS = 30

#: ``"feasible"`` keeps every bilateral cell probability in [0, 1];
#: ``"likelihood"`` only requires cells with positive counts to be positive.
DOMAINS = ("feasible", "likelihood")


class FitMethod(str, enum.Enum):
    CLOSED_FORM = "ClosedForm"
    FISHER_SCORING = "FisherScoring"
    NUMERIC_FALLBACK = "NumericFallback"


@dataclass(frozen=True)
class MleFit:
    """Result of a constrained or unconstrained fit.

    For a constrained fit ``pi_hat`` repeats the common estimate once per
    group.  ``R_hat`` is ``nan`` when there are no bilateral subjects.
    """

    pi_hat: tuple[float, ...]
    R_hat: float
    log_lik: float
    converged: bool
    iterations: int
    gradient_norm: float
    method: FitMethod
    constrained: bool = False

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.pi_hat, self.R_hat)

    @property
    def rho_hat(self) -> tuple[float, ...]:
        if math.isnan(self.R_hat):
            return tuple(math.nan for _ in self.pi_hat)
        return tuple(rho_from(p, self.R_hat) for p in self.pi_hat)

    def as_dict(self) -> dict:
        return {
            "pi_hat": list(self.pi_hat),
            "R_hat": self.R_hat,
            "rho_hat": list(self.rho_hat),
            "log_lik": self.log_lik,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "method": self.method.value,
        }


# --- batched derivatives --------------------------------------------------

def _split(counts):
    return tuple(counts[..., k] for k in range(5))


def _term(cnt, num, den):
    """``num / den`` where ``cnt > 0``, else 0 (keeps 0/0 out of the sums)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(cnt > 0, num / den, 0.0)


def gradient_batch(counts, pi, R):
    """dl/dpi_i, shape ``(B, g)``, and dl/dR, shape ``(B,)``."""
    m0, m1, m2, n0, n1 = _split(counts)
    Rg = R[..., None]
    p0 = Rg * pi**2 - 2 * pi + 1
    d_pi = (
        _term(m2, 2 * m2, pi)
        + _term(m0, (2 * Rg * pi - 2) * m0, p0)
        + _term(m1, (4 * Rg * pi - 2) * m1, 2 * pi * (Rg * pi - 1))
        + _term(n1, n1, pi)
        - _term(n0, n0, 1 - pi)
    )
    d_R = (
        _term(m2, m2, Rg)
        + _term(m0, pi**2 * m0, p0)
        + _term(m1, pi * m1, Rg * pi - 1)
    ).sum(axis=-1)
    return d_pi, d_R


def hessian_batch(counts, pi, R):
    """Observed second derivatives: ``pi`` diagonal, ``pi``-``R`` column, ``R`` entry."""
    m0, m1, m2, n0, n1 = _split(counts)
    Rg = R[..., None]
    p0 = Rg * pi**2 - 2 * pi + 1
    rp1 = Rg * pi - 1
    h_pipi = (
        _term(m0, m0 * (-2 * Rg**2 * pi**2 + 4 * Rg * pi + 2 * Rg - 4), p0**2)
        - _term(m2, 2 * m2, pi**2)
        - _term(m1, (2 * Rg**2 * pi**2 - 2 * Rg * pi + 1) * m1, pi**2 * rp1**2)
        - _term(n1, n1, pi**2)
        - _term(n0, n0, (1 - pi) ** 2)
    )
    h_piR = -_term(m1, m1, rp1**2) - _term(m0, 2 * (pi - 1) * pi * m0, p0**2)
    h_RR = -(
        _term(m2, m2, Rg**2) + _term(m1, pi**2 * m1, rp1**2) + _term(m0, pi**4 * m0, p0**2)
    ).sum(axis=-1)
    return h_pipi, h_piR, h_RR


def group_loglik_batch(counts, pi, R, domain="feasible"):
    """Per-group log-likelihood, ``-inf`` outside the domain.

    ``pi`` may carry a trailing candidate axis: with ``counts`` of shape
    ``(B, g, 5)`` and ``pi`` of shape ``(B, g, k)`` every candidate is scored.
    """
    cand = pi.ndim == counts.ndim
    if cand:
        cnts = [c[..., None] for c in _split(counts)]
        Rg = R[..., None, None]
    else:
        cnts = list(_split(counts))
        Rg = R[..., None]
    args = [Rg * pi**2 - 2 * pi + 1, 2 * pi * (1 - Rg * pi), Rg * pi**2, 1 - pi, pi]
    shape = np.broadcast_shapes(pi.shape, cnts[0].shape)
    total = np.zeros(shape)
    outside = np.zeros(shape, dtype=bool)
    for cnt, arg in zip(cnts, args):
        pos = cnt > 0
        bad = pos & ~(arg > 0)
        outside |= bad
        with np.errstate(divide="ignore", invalid="ignore"):
            total = total + np.where(pos & ~bad, cnt * np.log(np.where(arg > 0, arg, 1.0)), 0.0)
    if domain == "feasible":
        # a group with bilateral subjects needs all three cells valid, observed or not
        has_bilateral = (cnts[0] + cnts[1] + cnts[2]) > 0
        for arg in args[:3]:
            outside |= has_bilateral & (arg < -FEASIBILITY_TOL)
    outside |= ~((pi >= 0) & (pi <= 1))
    return np.where(outside, -np.inf, total)


def loglik_batch(counts, pi, R, domain="feasible"):
    return group_loglik_batch(counts, pi, R, domain).sum(axis=-1)


# --- per-group quartic ----------------------------------------------------

def printed_quartic_coefficients(group: GroupCounts, R: float, n_total: float) -> np.ndarray:
    """Quartic coefficients in the published dot-product form.

    ``n_total`` fills the ``2N`` term of the quadratic coefficient.
    """
    D = group.as_array()
    a = R**2 * (2 * group.m + group.n)
    b = -R * (np.array([4, 5, 6, 3, 3]) + R * np.array([2, 2, 2, 0, 1])) @ D
    c = R * np.array([4, 7, 8, 1, 4]) @ D + 2 * n_total + 2 * group.m2
    d = -np.array([2, 3 + 2 * R, 6 + 2 * R, 1, 3 + R]) @ D
    e = group.m1 + 2 * group.m2 + group.n1
    return np.array([a, b, c, d, e], dtype=float)


def cleared_coefficients(counts, R):
    """Numerator of dl/dpi_i over ``pi (1 - pi) (1 - R pi) (R pi^2 - 2 pi + 1)``.

    Works row-wise on ``(..., 5)`` counts with ``R`` broadcast against the
    leading axes.  Matches the published form except for the constant in
    the quadratic coefficient, which is ``2 (m_i + n_i) + 2 m_2i``.
    """
    counts = np.asarray(counts, dtype=float)
    R = np.asarray(R, dtype=float)
    m0, m1, m2, n0, n1 = _split(counts)
    m = m0 + m1 + m2
    n = n0 + n1
    a = R**2 * (2 * m + n)
    b = -R * (4 * m0 + 5 * m1 + 6 * m2 + 3 * n0 + 3 * n1 + R * (2 * m + n1))
    c = R * (4 * m0 + 7 * m1 + 8 * m2 + n0 + 4 * n1) + 2 * (m + n) + 2 * m2
    d = -(2 * m0 + (3 + 2 * R) * m1 + (6 + 2 * R) * m2 + n0 + (3 + R) * n1)
    e = m1 + 2 * m2 + n1
    return np.stack(np.broadcast_arrays(a, b, c, d, e), axis=-1)


def _reference_root(group: GroupCounts, R: float):
    """A stationary point of the group log-likelihood located by bracketing."""
    counts = group.as_array()[None, None, :]
    upper = 1.0 if group.m == 0 else pi_upper(R)
    grid = np.linspace(0, upper, 2001)[1:-1]
    vals = gradient_batch(np.broadcast_to(counts[0], (grid.size, 1, 5)), grid[:, None],
                          np.full(grid.size, R))[0][:, 0]
    ok = np.isfinite(vals)
    sign_change = np.flatnonzero(ok[:-1] & ok[1:] & (np.sign(vals[:-1]) * np.sign(vals[1:]) < 0))
    if not sign_change.size:
        return None

    def f(p):
        return gradient_batch(counts, np.array([[p]]), np.array([R]))[0][0, 0]

    k = sign_change[0]
    return optimize.brentq(f, grid[k], grid[k + 1], xtol=1e-15, rtol=1e-15)


def quartic_coefficients(group: GroupCounts, R: float, n_total: float | None = None) -> np.ndarray:
    """Coefficients ``(a, b, c, d, e)`` of the stationarity quartic for one group.

    When ``n_total`` is given the published form is tried first and kept only
    if it vanishes at a bracketed root of dl/dpi_i; otherwise the
    cleared-denominator form is returned.
    """
    if R <= 0:
        raise ValueError(f"R must be positive, got {R}")
    derived = cleared_coefficients(group.as_array(), R)
    if n_total is None:
        return derived
    printed = printed_quartic_coefficients(group, R, n_total)
    root = _reference_root(group, R)
    if root is None:
        return derived
    scale = np.abs(printed) @ np.abs(root) ** np.arange(4, -1, -1)
    if abs(np.polyval(printed, root)) <= 1e-8 * max(scale, 1.0):
        return printed
    return derived


def quartic_real_roots(coefs):
    """Real roots of quartics ``(..., 5)`` via companion-matrix eigenvalues.

    Complex roots come back as ``nan``; each real root gets three Newton
    polishing steps on the polynomial.
    """
    coefs = np.asarray(coefs, dtype=float)
    shape = coefs.shape[:-1]
    flat = coefs.reshape(-1, 5)
    comp = np.zeros((flat.shape[0], 4, 4))
    comp[:, 0, :] = -flat[:, 1:] / flat[:, :1]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    eig = np.linalg.eigvals(comp)
    real = np.abs(eig.imag) <= 1e-7 * np.maximum(1.0, np.abs(eig.real))
    x = np.where(real, eig.real, np.nan)
    deriv = flat[:, :-1] * np.array([4.0, 3.0, 2.0, 1.0])
    for _ in range(3):
        p = _horner(flat, x)
        dp = _horner(deriv, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dp != 0, p / dp, 0.0)
        x = np.where(np.isfinite(step), x - step, x)
    return x.reshape(shape + (4,))


def _horner(coefs, x):
    out = np.zeros_like(x)
    for k in range(coefs.shape[1]):
        out = out * x + coefs[:, k : k + 1]
    return out


def _pi_upper_batch(counts, R, domain):
    """Upper end of the admissible ``pi`` interval per group, ``(B, g)``."""
    m0, m1, m2, _, _ = _split(counts)
    Rg = np.broadcast_to(R[..., None], m0.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_R = np.where(Rg > 1, 1.0 / Rg, 1.0)
        p0_root = np.where(Rg < 1, 1.0 / (1.0 + np.sqrt(np.abs(1.0 - Rg))), 1.0)
    if domain == "feasible":
        bil = (m0 + m1 + m2) > 0
        return np.where(bil, np.minimum(inv_R, p0_root), 1.0)
    upper = np.ones(m0.shape)
    upper = np.where(m1 > 0, np.minimum(upper, inv_R), upper)
    upper = np.where(m0 > 0, np.minimum(upper, p0_root), upper)
    return upper


def solve_pi_batch(counts, R, domain="feasible"):
    """Maximise each group's log-likelihood over ``pi`` at fixed ``R``.

    Candidates are the real quartic roots inside the admissible interval
    plus both interval ends.  Returns ``(pi, interior)``, each ``(B, g)``;
    ``interior`` is False where an interval end won.
    """
    coefs = cleared_coefficients(counts, R[..., None])
    roots = quartic_real_roots(coefs)
    upper = _pi_upper_batch(counts, R, domain)
    inside = (roots > 0) & (roots < upper[..., None])
    roots = np.where(inside, roots, np.nan)
    cand = np.concatenate([roots, np.zeros(upper.shape + (1,)), upper[..., None]], axis=-1)
    ll = group_loglik_batch(counts, np.nan_to_num(cand, nan=-1.0), R, domain)
    best = np.argmax(ll, axis=-1)
    pi = np.take_along_axis(cand, best[..., None], axis=-1)[..., 0]
    best_ll = np.take_along_axis(ll, best[..., None], axis=-1)[..., 0]
    interior = (best < 4) & np.isfinite(best_ll)
    return _newton_pi(counts, pi, R, interior), interior


def _newton_pi(counts, pi, R, mask, steps=2):
    for _ in range(steps):
        d_pi, _ = gradient_batch(counts, pi, R)
        h_pipi, _, _ = hessian_batch(counts, pi, R)
        with np.errstate(divide="ignore", invalid="ignore"):
            new = pi - d_pi / h_pipi
        ok = mask & (h_pipi < 0) & np.isfinite(new) & (new > 0) & (new < 1)
        pi = np.where(ok, new, pi)
    return pi


# --- constrained fit ------------------------------------------------------

def closed_form_h0_batch(pooled):
    """Closed-form constrained MLE from pooled counts ``(B, 5)``.

    ``pi`` is the admissible root of
    ``2 T^2 p^3 - T A p^2 + C p - N1 (N1 + S1 + S2) = 0`` written in
    trigonometric form, with ``T = M + N`` the number of subjects.
    Bilateral-only and unilateral-only rows use their exact special cases.
    """
    S0, S1, S2, N0, N1 = _split(np.asarray(pooled, dtype=float))
    M = S0 + S1 + S2
    N = N0 + N1
    T = M + N
    A = N0 + 5 * N1 + 2 * S0 + 3 * S1 + 4 * S2
    C = (
        (3 * N1 + S1 + 2 * S2) * S0
        + N1 * (4 * N1 + 5 * S1 + 6 * S2 + 2 * N0)
        + S1 * (S1 + 3 * S2 + N0)
        + (2 * S2 + N0) * S2
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = A * A - 6 * C
        arg = (18 * A * C - 2 * A**3 - 108 * T * N1 * (N1 + S1 + S2)) / (2 * disc**1.5)
        theta = np.arccos(np.clip(arg, -1.0, 1.0)) / 3
        pi = (A + np.sqrt(disc) * (np.cos(theta) - np.sqrt(3) * np.sin(theta))) / (6 * T)
        pi = np.where(disc > 0, pi, np.nan)
        R = (2 * T * pi**2 + (-2 * M - N0 - 3 * N1 - S1) * pi + N1 + S1) / (
            pi * (N1 - pi * (2 * M + N0 + 3 * N1 - 2 * T * pi))
        )
        s = S1 + 2 * S2
        pi = np.where(N == 0, s / (2 * M), pi)
        R = np.where(N == 0, 4 * M * S2 / s**2, R)
        pi = np.where(M == 0, N1 / N, pi)
        R = np.where(M == 0, np.nan, R)
    return pi, R


def _profile_R(pooled, pi):
    """Admissible root in ``R`` of dl/dR = 0 for one pooled group at fixed ``pi``."""
    S0, S1, S2 = pooled[:3]
    M = S0 + S1 + S2
    qa = pi**3 * M
    qb = pi * (S2 * (1 - 3 * pi) - S0 * pi + S1 * (1 - 2 * pi))
    qc = -S2 * (1 - 2 * pi)
    lo = max(0.0, (2 * pi - 1) / pi**2)
    hi = 1.0 / pi
    roots = np.roots([qa, qb, qc])
    roots = roots[np.isreal(roots)].real
    cands = np.concatenate([roots[(roots > lo) & (roots <= hi)], [hi], [lo] if lo > 0 else []])
    lls = loglik_batch(np.broadcast_to(pooled, (cands.size, 1, 5)),
                       np.full((cands.size, 1), pi), cands)
    return float(cands[int(np.argmax(lls))])


def _numeric_h0(pooled):
    """Constrained MLE by profiling ``R`` out and maximising over ``pi``."""
    counts = pooled[None, None, :]

    def ll(p, r):
        return float(loglik_batch(counts, np.array([[p]]), np.array([r]))[0])

    with np.errstate(all="ignore"):
        res = optimize.minimize_scalar(lambda p: -ll(p, _profile_R(pooled, p)),
                                       bounds=(1e-9, 1 - 1e-9), method="bounded",
                                       options={"xatol": 1e-12})
    pi = float(res.x)
    R = _profile_R(pooled, pi)
    for _ in range(50):
        d_pi, d_R = gradient_batch(counts, np.array([[pi]]), np.array([R]))
        grad = np.array([d_pi[0, 0], d_R[0]])
        if not np.all(np.isfinite(grad)) or np.hypot(*grad) < 1e-10:
            break
        h_pp, h_pR, h_RR = hessian_batch(counts, np.array([[pi]]), np.array([R]))
        H = np.array([[h_pp[0, 0], h_pR[0, 0]], [h_pR[0, 0], h_RR[0]]])
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            break
        base = ll(pi, R)
        for _ in range(MAX_HALVINGS):
            if 0 < pi + step[0] < 1 and R + step[1] > 0 and ll(pi + step[0], R + step[1]) >= base - 1e-12:
                pi, R = pi + step[0], R + step[1]
                break
            step = step / 2
        else:
            break
    return pi, R


def _R_zero_boundary(pooled):
    """Rows without concordant responders whose constrained maximum is at ``R = 0``.

    With ``S2 = 0`` the likelihood is concave in ``R``; at ``R = 0`` the
    ``pi`` stationarity condition is a quadratic, and if dl/dR is not
    positive there the maximum lies on the ``R = 0`` edge.
    """
    S0, S1, S2, N0, N1 = _split(pooled)
    K = S1 + N1
    qa = 2 * (S0 + K + N0)
    qb = -(2 * S0 + 3 * K + N0)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.sqrt(np.maximum(qb * qb - 4 * qa * K, 0.0))
        pi = (-qb - disc) / (2 * qa)
        slope = S0 * pi**2 / (1 - 2 * pi) - S1 * pi
    return (S2 == 0) & (S0 + S1 > 0) & (pi > 0) & (pi < 0.5) & (slope <= 0)


@dataclass
class H0Batch:
    pi: np.ndarray
    R: np.ndarray
    log_lik: np.ndarray
    residual: np.ndarray
    fallback: np.ndarray
    ok: np.ndarray


def _h0_residual(pooled, pi, R):
    has_m = pooled[:, :3].sum(axis=1) > 0
    R_eval = np.where(has_m, R, 1.0)
    d_pi, d_R = gradient_batch(pooled[:, None, :], pi[:, None], R_eval)
    res = np.where(has_m, np.hypot(d_pi[:, 0], d_R), np.abs(d_pi[:, 0]))
    return np.where(np.isfinite(res), res, np.inf)


def _h0_interior(pooled, pi, R):
    has_m = pooled[:, :3].sum(axis=1) > 0
    with np.errstate(invalid="ignore"):
        ok = (pi > 0) & (pi < 1)
        bil_ok = (R > 0) & (R * pi < 1 - FEASIBILITY_TOL) & (R * pi**2 - 2 * pi + 1 > FEASIBILITY_TOL)
    return ok & (~has_m | bil_ok)


def constrained_mle_batch(counts) -> H0Batch:
    """Constrained MLE for every study in a ``(B, g, 5)`` stack."""
    counts = np.asarray(counts, dtype=float)
    pooled = counts.sum(axis=1)
    pi, R = closed_form_h0_batch(pooled)
    residual = _h0_residual(pooled, pi, R)
    degenerate = (pooled[:, [1, 2, 4]].sum(axis=1) == 0) | (pooled[:, [0, 1, 3]].sum(axis=1) == 0)
    # without discordant pairs dl/dR > 0 everywhere, so R-hat sits on R pi = 1
    degenerate |= (pooled[:, 1] == 0) & (pooled[:, :3].sum(axis=1) > 0)
    degenerate |= _R_zero_boundary(pooled)
    closed_exact = (pooled[:, 3:].sum(axis=1) == 0) | (pooled[:, :3].sum(axis=1) == 0)
    fallback = (residual > GRADIENT_TOL) & ~degenerate & ~closed_exact
    for k in np.flatnonzero(fallback):
        pi[k], R[k] = _numeric_h0(pooled[k])
    if np.any(fallback):
        residual[fallback] = _h0_residual(pooled[fallback], pi[fallback], R[fallback])
    ok = ~degenerate & _h0_interior(pooled, pi, R)
    has_m = pooled[:, :3].sum(axis=1) > 0
    pi_g = np.broadcast_to(pi[:, None], counts.shape[:2])
    ll = loglik_batch(counts, pi_g, np.where(has_m, R, 1.0))
    return H0Batch(pi, R, ll, residual, fallback, ok)


# --- unconstrained fit ----------------------------------------------------

@dataclass
class H1Batch:
    pi: np.ndarray
    R: np.ndarray
    log_lik: np.ndarray
    gradient_norm: np.ndarray
    iterations: np.ndarray
    interior: np.ndarray
    converged: np.ndarray


def unconstrained_mle_batch(counts, R_init, tol=R_STEP_TOL, max_iter=MAX_ITER,
                            domain="feasible") -> H1Batch:
    """Unconstrained MLE for every study in a ``(B, g, 5)`` stack.

    Alternates the per-group quartic solve with a Fisher-scoring step in
    ``R`` (halved while it leaves the domain or lowers the likelihood) until
    ``|dR| < tol``, then polishes jointly with Newton steps.
    """
    counts = np.asarray(counts, dtype=float)
    B = counts.shape[0]
    R = np.asarray(R_init, dtype=float).copy()
    R = np.where(np.isfinite(R) & (R > 0), R, 1.0)
    pi, interior = solve_pi_batch(counts, R, domain)
    iters = np.zeros(B, dtype=int)
    active = np.ones(B, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        c, p, r = counts[idx], pi[idx], R[idx]
        _, d_R = gradient_batch(c, p, r)
        _, _, h_RR = hessian_batch(c, p, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(h_RR < 0, -d_R / h_RR, np.sign(d_R) * 0.1 * r)
        step = np.where(np.isfinite(step), step, 0.0)
        base = loglik_batch(c, p, r, domain)
        r_new = r.copy()
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(MAX_HALVINGS):
            cand = r + step
            good = pending & (cand > 0)
            if np.any(good):
                ll = np.full(idx.size, -np.inf)
                ll[good] = loglik_batch(c[good], p[good], cand[good], domain)
                good &= ll >= base - 1e-12
            r_new = np.where(good, cand, r_new)
            pending &= ~good
            if not np.any(pending):
                break
            step = step / 2
        delta = np.abs(r_new - r)
        R[idx] = r_new
        pi[idx], interior[idx] = solve_pi_batch(c, r_new, domain)
        iters[idx] += 1
        active[idx] = delta >= tol

    all_interior = interior.all(axis=1)
    pi, R, extra = _joint_polish(counts, pi, R, all_interior, domain)
    iters += extra
    d_pi, d_R = gradient_batch(counts, pi, R)
    gnorm = np.sqrt(np.sum(d_pi**2, axis=1) + d_R**2)
    gnorm = np.where(np.isfinite(gnorm), gnorm, np.inf)
    ll = loglik_batch(counts, pi, R, domain)
    converged = all_interior & (gnorm < GRADIENT_TOL)
    return H1Batch(pi, R, ll, gnorm, iters, interior, converged)


def _joint_polish(counts, pi, R, mask, domain, max_steps=50):
    """Newton steps on the full gradient; the Hessian is an arrowhead matrix."""
    pi = pi.copy()
    R = R.copy()
    extra = np.zeros(R.shape, dtype=int)
    active = mask.copy()
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        c, p, r = counts[idx], pi[idx], R[idx]
        d_pi, d_R = gradient_batch(c, p, r)
        gnorm = np.sqrt(np.sum(d_pi**2, axis=1) + d_R**2)
        h_pipi, h_piR, h_RR = hessian_batch(c, p, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            schur = h_RR - np.sum(h_piR**2 / h_pipi, axis=1)
            dR = (-d_R + np.sum(h_piR * d_pi / h_pipi, axis=1)) / schur
            dpi = (-d_pi - h_piR * dR[:, None]) / h_pipi
        usable = (
            (gnorm >= 1e-3 * GRADIENT_TOL)
            & np.all(h_pipi < 0, axis=1)
            & (schur < 0)
            & np.isfinite(dR)
            & np.all(np.isfinite(dpi), axis=1)
        )
        base = loglik_batch(c, p, r, domain)
        moved = np.zeros(idx.size, dtype=bool)
        pending = usable.copy()
        for _ in range(MAX_HALVINGS):
            if not np.any(pending):
                break
            new_p, new_r = p + dpi, r + dR
            good = pending & np.all((new_p > 0) & (new_p < 1), axis=1) & (new_r > 0)
            if np.any(good):
                ll = np.full(idx.size, -np.inf)
                ll[good] = loglik_batch(c[good], new_p[good], new_r[good], domain)
                good &= ll >= base - 1e-9
            p = np.where(good[:, None], new_p, p)
            r = np.where(good, new_r, r)
            moved |= good
            pending &= ~good
            dpi, dR = dpi / 2, dR / 2
        pi[idx], R[idx] = p, r
        extra[idx] += moved
        active[idx] = moved
    return pi, R, extra


# --- single-study API -----------------------------------------------------

def score_gradient(data: StudyData, params: ModelParams) -> np.ndarray:
    """Gradient ``(dl/dpi_1, ..., dl/dpi_g, dl/dR)`` of the log-likelihood."""
    d_pi, d_R = gradient_batch(data.counts[None], np.asarray(params.pi)[None], np.array([params.R]))
    out = np.append(d_pi[0], d_R[0])
    if not np.all(np.isfinite(out)):
        raise DomainError("gradient undefined: parameters on the boundary")
    return out


def observed_hessian(data: StudyData, params: ModelParams) -> np.ndarray:
    """Second derivatives of the log-likelihood; the ``pi`` block is diagonal."""
    h_pipi, h_piR, h_RR = hessian_batch(
        data.counts[None], np.asarray(params.pi)[None], np.array([params.R])
    )
    g = data.g
    H = np.zeros((g + 1, g + 1))
    H[np.arange(g), np.arange(g)] = h_pipi[0]
    H[:g, g] = H[g, :g] = h_piR[0]
    H[g, g] = h_RR[0]
    if not np.all(np.isfinite(H)):
        raise DomainError("Hessian undefined: parameters on the boundary")
    return H


def solve_pi_given_R(group: GroupCounts, R: float, domain: str = "feasible") -> float:
    """MLE of one group's proportion when ``R`` is held fixed."""
    counts = group.as_array()[None, None, :]
    if counts.sum() == 0:
        raise ValueError("group has no subjects")
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    pi, interior = solve_pi_batch(counts, np.array([float(R)]), domain)
    if not interior[0, 0]:
        raise NoInteriorRoot(f"maximum at boundary pi={pi[0, 0]:.6g} for R={R}",
                             boundary_value=float(pi[0, 0]))
    return float(pi[0, 0])


def constrained_mle(data: StudyData) -> MleFit:
    """MLE of the common proportion and ``R`` under homogeneity."""
    data = validate_study(data)
    fit = constrained_mle_batch(data.counts[None])
    pi, R = float(fit.pi[0]), float(fit.R[0])
    if not fit.ok[0]:
        raise DegenerateData(f"constrained MLE on the boundary: pi-hat = {pi:.6g}, R-hat = {R:.6g}")
    return MleFit(
        pi_hat=tuple([pi] * data.g),
        R_hat=R,
        log_lik=float(fit.log_lik[0]),
        converged=bool(fit.residual[0] < GRADIENT_TOL),
        iterations=0,
        gradient_norm=float(fit.residual[0]),
        method=FitMethod.NUMERIC_FALLBACK if fit.fallback[0] else FitMethod.CLOSED_FORM,
        constrained=True,
    )


def unconstrained_mle(data: StudyData, tol: float = R_STEP_TOL, max_iter: int = MAX_ITER,
                      R_init: float | None = None, domain: str = "feasible") -> MleFit:
    """MLE of group proportions and the shared ``R`` without homogeneity.

    Starts from the constrained ``R`` unless ``R_init`` is given.  Raises
    :class:`NoInteriorRoot` when some ``pi_i`` ends on the edge of its
    interval and :class:`NoConvergence` (carrying the best iterate) when
    the gradient norm stays above ``1e-6``.
    """
    data = validate_study(data)
    if data.M == 0:
        raise RNotEstimable("no bilateral subjects: R is not estimable")
    if R_init is None:
        h0 = constrained_mle_batch(data.counts[None])
        R_init = float(h0.R[0]) if h0.ok[0] else 1.0
    fit = unconstrained_mle_batch(data.counts[None], np.array([R_init]), tol, max_iter, domain)
    pi = fit.pi[0]
    if not fit.interior[0].all():
        k = int(np.flatnonzero(~fit.interior[0])[0])
        raise NoInteriorRoot(
            f"group {k + 1}: maximum at boundary pi={pi[k]:.6g} (R={fit.R[0]:.6g})",
            boundary_value=float(pi[k]),
        )
    result = MleFit(
        pi_hat=tuple(float(p) for p in pi),
        R_hat=float(fit.R[0]),
        log_lik=float(fit.log_lik[0]),
        converged=bool(fit.converged[0]),
        iterations=int(fit.iterations[0]),
        gradient_norm=float(fit.gradient_norm[0]),
        method=FitMethod.FISHER_SCORING,
    )
    if not result.converged:
        raise NoConvergence(
            f"gradient norm {result.gradient_norm:.3g} after {result.iterations} iterations",
            fit=result,
        )
    return result
