import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from corrtest import mle
from corrtest.exceptions import DegenerateData, NoConvergence, NoInteriorRoot, RNotEstimable
from corrtest.mle import (
    FitMethod,
    constrained_mle,
    constrained_mle_batch,
    quartic_coefficients,
    score_gradient,
    solve_pi_given_R,
    unconstrained_mle,
    unconstrained_mle_batch,
)
from corrtest.model import GroupCounts, ModelParams, StudyData, log_likelihood, pi_upper

from conftest import RP, random_study


def interior_studies(seed, count, **kwargs):
    """Random studies whose unconstrained MLE is interior."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        data, pi, R = random_study(rng, **kwargs)
        try:
            fit = unconstrained_mle(data)
        except (NoInteriorRoot, DegenerateData):
            continue
        out.append((data, fit))
    return out


def brute_force_max(data, constrained):
    """Multi-start Nelder-Mead on the log-likelihood over the feasible region."""
    g = data.g

    def negll(x):
        pi = np.full(g, x[0]) if constrained else x[:-1]
        params = ModelParams(pi, x[-1])
        if not params.is_feasible():
            return np.inf
        try:
            return -log_likelihood(data, params)
        except Exception:
            return np.inf

    best = np.inf
    rng = np.random.default_rng(0)
    for _ in range(8):
        pi0 = rng.uniform(0.2, 0.6, size=1 if constrained else g)
        x0 = np.append(pi0, rng.uniform(0.8, 1.0 / pi0.max()))
        res = optimize.minimize(negll, x0, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
        best = min(best, res.fun)
    return -best


class TestConstrained:
    def test_worked_estimates(self, worked):
        fit = constrained_mle(worked)
        assert fit.method is FitMethod.CLOSED_FORM
        assert round(fit.pi_hat[0], 4) == 0.6482
        assert round(fit.R_hat, 4) == 1.3182
        assert round(fit.rho_hat[0], 4) == 0.5862
        assert fit.gradient_norm < 1e-8
        assert fit.pi_hat == (fit.pi_hat[0],) * 2

    def test_bilateral_only(self, rp):
        fit = constrained_mle(rp)
        S1, S2, M = 37, 87, 216
        assert fit.pi_hat[0] == (S1 + 2 * S2) / (2 * M)
        assert fit.R_hat == 4 * M * S2 / (S1 + 2 * S2) ** 2
        grad = score_gradient(rp, fit.params)
        assert abs(grad[:-1].sum()) < 1e-8 and abs(grad[-1]) < 1e-8

    def test_unilateral_only(self):
        data = StudyData.from_array([[0, 0, 0, 40, 10], [0, 0, 0, 30, 20]])
        fit = constrained_mle(data)
        assert fit.pi_hat[0] == 30 / 100
        assert np.isnan(fit.R_hat)

    def test_degenerate(self):
        with pytest.raises(DegenerateData):
            constrained_mle(StudyData.from_array([[5, 0, 0, 3, 0], [2, 0, 0, 4, 0]]))

    def test_numeric_fallback_agrees_with_closed_form(self, worked):
        pooled = worked.counts.sum(axis=0)
        pi, R = mle._numeric_h0(pooled)
        fit = constrained_mle(worked)
        assert pi == pytest.approx(fit.pi_hat[0], abs=1e-9)
        assert R == pytest.approx(fit.R_hat, abs=1e-8)

    def test_fallback_is_used_when_closed_form_misses(self, monkeypatch, worked):
        closed_form = mle.closed_form_h0_batch

        def off_by_a_bit(pooled):
            pi, R = closed_form(pooled)
            return pi + 0.01, R

        monkeypatch.setattr(mle, "closed_form_h0_batch", off_by_a_bit)
        fit = constrained_mle(worked)
        assert fit.method is FitMethod.NUMERIC_FALLBACK
        assert round(fit.pi_hat[0], 4) == 0.6482
        assert fit.gradient_norm < 1e-6

    def test_random_against_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            data, _, _ = random_study(rng, g=3)
            fit = constrained_mle(data)
            assert fit.log_lik >= brute_force_max(data, constrained=True) - 1e-7

    def test_closed_form_residual_on_300_random_studies(self):
        rng = np.random.default_rng(9)
        counts = np.stack([random_study(rng, g=3)[0].counts for _ in range(300)])
        fit = constrained_mle_batch(counts)
        assert np.all(fit.ok)
        assert np.all(fit.residual < 1e-6)
        assert fit.fallback.mean() < 0.02


class TestGradient:
    def test_finite_differences_50_points(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            data, pi, R = random_study(rng)
            grad = score_gradient(data, ModelParams(pi, R))
            x = np.append(pi, R)
            h = 1e-6
            for k in range(x.size):
                up, dn = x.copy(), x.copy()
                up[k] += h
                dn[k] -= h
                fd = (log_likelihood(data, ModelParams(up[:-1], up[-1]))
                      - log_likelihood(data, ModelParams(dn[:-1], dn[-1]))) / (2 * h)
                assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-5)

    def test_hessian_finite_differences(self, worked):
        x = np.array([0.6, 0.5, 1.2])
        H = mle.observed_hessian(worked, ModelParams(x[:2], x[2]))
        h = 1e-5
        for k in range(3):
            up, dn = x.copy(), x.copy()
            up[k] += h
            dn[k] -= h
            col = (score_gradient(worked, ModelParams(up[:2], up[2]))
                   - score_gradient(worked, ModelParams(dn[:2], dn[2]))) / (2 * h)
            assert H[:, k] == pytest.approx(col, rel=1e-5)

    def test_zero_at_unconstrained_mle(self, worked):
        fit = unconstrained_mle(worked)
        assert np.all(np.abs(score_gradient(worked, fit.params)) < 1e-6)

    def test_chain_rule_at_constrained_mle(self, worked):
        grad = score_gradient(worked, constrained_mle(worked).params)
        assert abs(grad[0] + grad[1]) < 1e-8


class TestQuartic:
    def test_all_responders(self):
        coefs = quartic_coefficients(GroupCounts(0, 0, 7, 0, 0), 1.2)
        assert coefs[4] == 14
        # the only roots in (0, 1] sit at the feasibility edge
        roots = np.roots(coefs)
        real = roots[np.isreal(roots)].real
        assert np.any(np.isclose(real, 1 / 1.2))

    def test_worked_group(self):
        group = GroupCounts(9, 7, 23, 20, 34)
        roots = np.roots(quartic_coefficients(group, 1.3172))
        real = roots[np.isreal(roots)].real
        assert np.min(np.abs(real - 0.6528)) < 1e-4

    def test_printed_form_with_group_total(self):
        group = GroupCounts(9, 7, 23, 20, 34)
        printed = mle.printed_quartic_coefficients(group, 1.3, group.m + group.n)
        assert printed == pytest.approx(mle.cleared_coefficients(group.as_array(), 1.3))
        assert quartic_coefficients(group, 1.3, n_total=group.m + group.n) == pytest.approx(printed)

    def test_global_N_reading_is_rejected(self):
        group = GroupCounts(9, 7, 23, 20, 34)
        coefs = quartic_coefficients(group, 1.3172, n_total=109)
        assert coefs == pytest.approx(mle.cleared_coefficients(group.as_array(), 1.3172))

    def test_100_random_groups(self):
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(100):
            counts = rng.integers(0, 40, size=5)
            if counts.sum() == 0:
                continue
            group = GroupCounts.from_sequence(counts)
            R = rng.uniform(0.5, 2.0)
            roots = mle.quartic_real_roots(quartic_coefficients(group, R))
            upper = pi_upper(R) if group.m else 1.0
            inside = roots[np.isfinite(roots) & (roots > 0) & (roots < upper)]
            data = StudyData((group,))
            for r in inside:
                grad = mle.gradient_batch(data.counts[None], np.array([[r]]), np.array([R]))[0]
                scale = group.m + group.n
                assert abs(grad[0, 0]) < 1e-6 * max(1.0, scale)
                checked += 1
        assert checked > 50

    def test_nonpositive_R(self):
        with pytest.raises(ValueError):
            quartic_coefficients(GroupCounts(1, 1, 1, 1, 1), 0.0)


class TestSolvePi:
    def test_worked_group(self):
        assert solve_pi_given_R(GroupCounts(9, 7, 23, 20, 34), 1.3172) == pytest.approx(0.6528, abs=1e-4)

    @given(st.integers(1, 50), st.integers(1, 50), st.floats(0.3, 3.0))
    def test_unilateral_only_is_binomial(self, n0, n1, R):
        assert solve_pi_given_R(GroupCounts(0, 0, 0, n0, n1), R) == pytest.approx(n1 / (n0 + n1))

    @given(st.integers(1, 30), st.integers(0, 30), st.integers(0, 30))
    def test_symmetric_group(self, m0, m1, n0):
        assert solve_pi_given_R(GroupCounts(m0, m1, m0, n0, n0), 1.0) == pytest.approx(0.5)

    def test_boundary_reported(self):
        with pytest.raises(NoInteriorRoot) as info:
            solve_pi_given_R(GroupCounts(2, 0, 9, 0, 5), 1.5)
        assert info.value.boundary_value == pytest.approx(1 / 1.5)

    def test_stationary(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            counts = rng.integers(1, 30, size=5)
            group = GroupCounts.from_sequence(counts)
            R = rng.uniform(0.6, 1.6)
            pi = solve_pi_given_R(group, R)
            grad = mle.gradient_batch(counts[None, None].astype(float), np.array([[pi]]), np.array([R]))[0]
            assert abs(grad[0, 0]) < 1e-6


class TestUnconstrained:
    def test_worked_estimates(self, worked):
        fit = unconstrained_mle(worked)
        assert [round(p, 4) for p in fit.pi_hat] == [0.6528, 0.6425]
        assert round(fit.R_hat, 4) == 1.3172
        assert [round(r, 4) for r in fit.rho_hat] == [0.5964, 0.5699]
        assert fit.converged and fit.gradient_norm < 1e-6
        assert fit.method is FitMethod.FISHER_SCORING

    def test_single_bilateral_group_matches_constrained(self):
        data = StudyData.from_array([[15, 6, 7, 0, 0]])
        h0, h1 = constrained_mle(data), unconstrained_mle(data)
        assert h1.pi_hat[0] == pytest.approx(h0.pi_hat[0], abs=1e-8)
        assert h1.R_hat == pytest.approx(h0.R_hat, abs=1e-7)

    def test_rp_against_brute_force(self, rp):
        fit = unconstrained_mle(rp)
        assert fit.log_lik >= brute_force_max(rp, constrained=False) - 1e-7

    def test_random_against_brute_force(self):
        for data, fit in interior_studies(6, 6, g=2):
            assert fit.log_lik >= brute_force_max(data, constrained=False) - 1e-7

    def test_nesting_and_convergence(self):
        for data, fit in interior_studies(7, 60):
            assert fit.log_lik >= constrained_mle(data).log_lik - 1e-10
            assert fit.gradient_norm < 1e-6
            assert fit.params.is_feasible()

    def test_identical_groups(self):
        data = StudyData.from_array([[10, 8, 12, 9, 11]] * 3)
        h0, h1 = constrained_mle(data), unconstrained_mle(data)
        assert np.allclose(h1.pi_hat, h0.pi_hat[0], atol=1e-6)
        assert h1.R_hat == pytest.approx(h0.R_hat, abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.permutations(range(4)))
    def test_permutation_equivariance(self, perm):
        data = StudyData.from_array(RP)
        fit = unconstrained_mle(data)
        fit_p = unconstrained_mle(data.subset(perm))
        assert fit_p.pi_hat == pytest.approx([fit.pi_hat[k] for k in perm], abs=1e-8)
        assert fit_p.R_hat == pytest.approx(fit.R_hat, abs=1e-8)
        assert fit_p.log_lik == pytest.approx(fit.log_lik, abs=1e-9)

    def test_consistency(self):
        pi, R = np.array([0.3, 0.45, 0.6]), 1.4
        rng = np.random.default_rng(8)
        from corrtest.simulation import generate_study

        errors = []
        for size in (100, 400, 1600, 6400):
            errs = []
            for _ in range(20):
                data = generate_study([size] * 3, [size] * 3, pi, R, rng)
                fit = unconstrained_mle(data)
                errs.append(np.abs(np.append(fit.pi_hat, fit.R_hat) - np.append(pi, R)).mean())
            errors.append(np.mean(errs))
        ratios = np.array(errors[:-1]) / np.array(errors[1:])
        assert np.all(ratios > 1.4) and np.all(ratios < 3.0)

    def test_R_not_estimable(self):
        with pytest.raises(RNotEstimable):
            unconstrained_mle(StudyData.from_array([[0, 0, 0, 3, 4], [0, 0, 0, 5, 1]]))

    def test_boundary_raises(self):
        with pytest.raises(NoInteriorRoot):
            unconstrained_mle(StudyData.from_array([[5, 0, 9, 3, 6], [9, 6, 4, 8, 3]]))

    def test_no_convergence_carries_fit(self, monkeypatch, worked):
        monkeypatch.setattr(mle, "GRADIENT_TOL", 0.0)
        with pytest.raises(NoConvergence) as info:
            unconstrained_mle(worked)
        assert round(info.value.fit.R_hat, 4) == 1.3172
        assert not info.value.fit.converged

    def test_batch_matches_single(self):
        pairs = interior_studies(10, 20, g=3)
        counts = np.stack([d.counts for d, _ in pairs])
        h0 = constrained_mle_batch(counts)
        batch = unconstrained_mle_batch(counts, h0.R)
        for k, (_, fit) in enumerate(pairs):
            assert batch.pi[k] == pytest.approx(fit.pi_hat, abs=1e-12)
            assert batch.R[k] == pytest.approx(fit.R_hat, abs=1e-12)

    def test_R_steps_never_decrease_likelihood(self, worked, monkeypatch):
        seen = []
        original = mle.solve_pi_batch

        def spy(counts, R, domain="feasible"):
            pi, interior = original(counts, R, domain)
            seen.append(float(mle.loglik_batch(counts, pi, R)[0]))
            return pi, interior

        monkeypatch.setattr(mle, "solve_pi_batch", spy)
        unconstrained_mle(worked, R_init=0.8)
        assert len(seen) > 3
        assert np.all(np.diff(seen) >= -1e-10)


class TestBoundaryShortcuts:
    def test_no_discordant_pairs_is_degenerate(self):
        with pytest.raises(DegenerateData):
            constrained_mle(StudyData.from_array([[5, 0, 3, 2, 2], [4, 0, 1, 3, 3]]))

    def test_R_zero_shortcut_matches_numeric_search(self):
        rng = np.random.default_rng(12)
        flagged = 0
        for _ in range(200):
            pooled = np.array([rng.integers(50, 100), rng.integers(0, 6), 0,
                               rng.integers(50, 100), rng.integers(0, 6)], dtype=float)
            if pooled[1] == 0:
                continue
            pi, R = mle._numeric_h0(pooled)
            shortcut = bool(mle._R_zero_boundary(pooled[None])[0])
            flagged += shortcut
            if shortcut:
                assert R < 1e-4
            else:
                assert R > 1e-4
        assert flagged > 10
