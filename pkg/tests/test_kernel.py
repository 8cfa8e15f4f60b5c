"""Distribution kernel: pmf, moments, truncation geometry, sampler."""

import math
import time

import numpy as np
import pytest
from scipy import stats

from svyhurdle.kernel import (
    BetaBinParams,
    ClampWarning,
    dominance_threshold,
    factorial_moment,
    intensity_report,
    log_pmf,
    log_zero_prob_arrays,
    moments,
    pmf,
    sample_ztbb,
    sample_ztbb_arrays,
    truncated_moments,
    variance_decomposition,
    zero_prob,
    ztbb_cell_derivs,
)


def exhaustive_pmf(p: BetaBinParams) -> np.ndarray:
    """Full pmf vector over the support 0..n, from log_pmf."""
    return np.exp([log_pmf(p, y) for y in range(p.n + 1)])


# ---------------------------------------------------------------------------
# pmf and zero probability
# ---------------------------------------------------------------------------


class TestPmf:
    def test_normalization_on_grid(self):
        for n in (1, 2, 7, 23, 60):
            for mu in (0.05, 0.3, 0.7, 0.95):
                for kappa in (0.1, 1.0, 12.0, 500.0):
                    total = exhaustive_pmf(BetaBinParams(n, mu, kappa)).sum()
                    assert abs(total - 1.0) < 1e-12

    def test_zero_prob_matches_pmf_at_zero(self):
        p = BetaBinParams(9, 0.37, 4.2)
        assert zero_prob(p) == pytest.approx(math.exp(log_pmf(p, 0)), rel=1e-13)

    def test_zero_prob_n1_is_one_minus_mu(self):
        p = BetaBinParams(1, 0.42, 3.0)
        assert zero_prob(p) == pytest.approx(0.58, abs=1e-14)

    def test_consecutive_ratio_recursion(self):
        # p0(n+1) / p0(n) = (b + n) / (kappa + n)
        mu, kappa = 0.3, 2.5
        b = (1 - mu) * kappa
        for n in range(1, 20):
            r = zero_prob(BetaBinParams(n + 1, mu, kappa)) / zero_prob(BetaBinParams(n, mu, kappa))
            assert r == pytest.approx((b + n) / (kappa + n), rel=1e-12)

    def test_zero_prob_monotone_mu_kappa_n(self):
        base = zero_prob(BetaBinParams(5, 0.3, 2.0))
        assert zero_prob(BetaBinParams(5, 0.4, 2.0)) < base
        assert zero_prob(BetaBinParams(5, 0.3, 3.0)) < base
        assert zero_prob(BetaBinParams(6, 0.3, 2.0)) < base

    def test_arrays_agree_with_scalar(self):
        n = np.array([3, 8, 21])
        mu = np.array([0.2, 0.5, 0.8])
        got = log_zero_prob_arrays(n, mu, 4.0)
        want = [math.log(zero_prob(BetaBinParams(int(k), float(m), 4.0)))
                for k, m in zip(n, mu)]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_pmf_vector_call(self):
        p = BetaBinParams(6, 0.45, 3.0)
        ys = np.arange(7)
        np.testing.assert_allclose(pmf(p, ys), exhaustive_pmf(p), rtol=1e-12)

    def test_invalid_params_raise(self):
        with pytest.raises(ValueError):
            BetaBinParams(0, 0.5, 1.0)
        with pytest.raises(ValueError):
            BetaBinParams(5, 0.0, 1.0)
        with pytest.raises(ValueError):
            BetaBinParams(5, 0.5, -1.0)

    def test_clamp_warning_channel(self):
        with pytest.warns(ClampWarning):
            BetaBinParams(5, 1e-15, 1.0)
        with pytest.warns(ClampWarning):
            BetaBinParams(5, 0.5, 1e12)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


class TestMoments:
    def test_mean_variance_formulas(self):
        p = BetaBinParams(5, 0.3, 2.0)
        mean, var = moments(p)
        assert mean == pytest.approx(1.5, abs=1e-12)
        # n mu (1-mu) (kappa + n) / (kappa + 1)
        assert var == pytest.approx(5 * 0.3 * 0.7 * 7 / 3, rel=1e-12)

    def test_moments_match_exhaustive(self):
        p = BetaBinParams(11, 0.62, 7.7)
        probs = exhaustive_pmf(p)
        ys = np.arange(p.n + 1)
        mean, var = moments(p)
        assert mean == pytest.approx(probs @ ys, abs=1e-10)
        assert var == pytest.approx(probs @ ys**2 - (probs @ ys) ** 2, abs=1e-10)

    def test_factorial_moments_vs_enumeration(self):
        p = BetaBinParams(7, 0.4, 3.0)
        probs = exhaustive_pmf(p)
        ys = np.arange(p.n + 1)
        for r in (1, 2, 3):
            fall = np.ones_like(ys, dtype=float)
            for j in range(r):
                fall = fall * (ys - j)
            assert factorial_moment(p, r) == pytest.approx(probs @ fall, abs=1e-10)

    def test_factorial_moment_above_n_is_zero(self):
        assert factorial_moment(BetaBinParams(4, 0.3, 2.0), 5) == 0.0


# ---------------------------------------------------------------------------
# truncated moments
# ---------------------------------------------------------------------------


class TestTruncatedMoments:
    def test_reference_cell(self):
        tm = truncated_moments(BetaBinParams(5, 0.3, 2.0))
        assert tm.mean == pytest.approx(2.40770, abs=1e-5)
        assert tm.var == pytest.approx(1.74707, abs=1e-5)

    def test_truncation_identity_exhaustive(self):
        # E[Y^k | Y>0] (1 - p0) = E[Y^k] for k in {1, 2, 3}
        for (n, mu, kappa) in ((5, 0.3, 2.0), (12, 0.55, 0.7), (30, 0.15, 40.0)):
            p = BetaBinParams(n, mu, kappa)
            probs = exhaustive_pmf(p)
            ys = np.arange(n + 1)
            p0 = probs[0]
            for k in (1, 2, 3):
                uncond = probs @ ys.astype(float) ** k
                cond = (probs[1:] @ ys[1:].astype(float) ** k) / (1 - p0)
                assert cond * (1 - p0) == pytest.approx(uncond, abs=1e-10)
            tm = truncated_moments(p)
            mean_pos = (probs[1:] @ ys[1:]) / (1 - p0)
            var_pos = (probs[1:] @ ys[1:] ** 2) / (1 - p0) - mean_pos**2
            assert tm.mean == pytest.approx(mean_pos, abs=1e-10)
            assert tm.var == pytest.approx(var_pos, abs=1e-10)


# ---------------------------------------------------------------------------
# intensity geometry
# ---------------------------------------------------------------------------


class TestIntensity:
    def test_reference_elasticity(self):
        rep = intensity_report(BetaBinParams(10, 0.3, 10.0))
        assert rep.elasticity == pytest.approx(0.734979, abs=1e-6)
        assert rep.omega == pytest.approx(1 - rep.elasticity, abs=1e-12)

    def test_dh_dmu_matches_finite_difference(self):
        n, kappa = 10, 10.0
        h = lambda m: intensity_report(BetaBinParams(n, m, kappa)).h
        step = 1e-6
        fd = (h(0.3 + step) - h(0.3 - step)) / (2 * step)
        rep = intensity_report(BetaBinParams(n, 0.3, kappa))
        assert rep.dh_dmu == pytest.approx(fd, rel=1e-6)

    def test_single_trial_degeneracy(self):
        rep = intensity_report(BetaBinParams(1, 0.4, 2.0))
        assert rep.h == pytest.approx(1.0, abs=1e-14)
        assert rep.elasticity == 0.0
        assert rep.omega == 1.0

    def test_boundary_small_mu(self):
        # h(mu -> 0) -> 1 / Lambda0 with Lambda0 = kappa sum_j 1/(kappa + j)
        rep = intensity_report(BetaBinParams(2, 1e-8, 1.0))
        assert rep.h == pytest.approx(2.0 / 3.0, abs=1e-6)

    def test_elasticity_vanishes_at_tiny_kappa(self):
        rep = intensity_report(BetaBinParams(10, 0.3, 1e-6))
        assert rep.elasticity < 0.01


# ---------------------------------------------------------------------------
# variance decomposition
# ---------------------------------------------------------------------------


class TestVarianceDecomposition:
    def test_mixture_oracle(self):
        p = BetaBinParams(5, 0.3, 2.0)
        q = 0.7
        dec = variance_decomposition(p, q)
        probs = exhaustive_pmf(p)
        p0 = probs[0]
        ys = np.arange(p.n + 1)
        mix = np.concatenate([[1 - q], q * probs[1:] / (1 - p0)])
        mean = mix @ ys
        var = mix @ ys**2 - mean**2
        assert dec.mean == pytest.approx(mean, abs=1e-10)
        assert dec.var_total == pytest.approx(var, abs=1e-10)

    def test_components_identity(self):
        p = BetaBinParams(8, 0.45, 3.0)
        dec = variance_decomposition(p, 0.55)
        tm = truncated_moments(p)
        assert dec.var_total == pytest.approx(
            0.55 * tm.var + 0.55 * 0.45 * tm.mean**2, abs=1e-12)
        assert dec.var_conditional == pytest.approx(0.55 * tm.var, abs=1e-12)
        assert dec.binary_component == pytest.approx(0.55 * 0.45 * tm.mean**2, abs=1e-12)

    def test_cv_recursion(self):
        dec = variance_decomposition(BetaBinParams(10, 0.4, 5.0), 0.6)
        assert dec.cv_sq_total == pytest.approx(
            (dec.cv_sq_conditional + 1 - 0.6) / 0.6, rel=1e-12)

    def test_overdispersion_binomial_limit(self):
        dec = variance_decomposition(BetaBinParams(200, 0.3, 1e6), 1 - 1e-9)
        assert dec.overdispersion == pytest.approx(1.0, abs=1e-3)

    def test_q_domain(self):
        p = BetaBinParams(5, 0.3, 2.0)
        with pytest.raises(ValueError):
            variance_decomposition(p, 0.0)
        with pytest.raises(ValueError):
            variance_decomposition(p, 1.0)


# ---------------------------------------------------------------------------
# dominance threshold
# ---------------------------------------------------------------------------


class TestDominanceThreshold:
    def test_reference_values(self):
        assert dominance_threshold(BetaBinParams(50, 0.30, 7.0), 0.64) == pytest.approx(1.87, abs=0.01)
        assert dominance_threshold(BetaBinParams(50, 0.45, 15.0), 0.50) == pytest.approx(1.10, abs=0.01)

    def test_single_trial_threshold_zero(self):
        assert dominance_threshold(BetaBinParams(1, 0.5, 2.0), 0.5) == 0.0

    def test_q_one_rejected(self):
        with pytest.raises(ValueError):
            dominance_threshold(BetaBinParams(5, 0.5, 2.0), 1.0)


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------


class TestSampler:
    def test_strictly_positive_and_bounded(self):
        rng = np.random.default_rng(7)
        draws = sample_ztbb_arrays(np.full(5000, 6), np.full(5000, 0.25), 1.5, rng)
        assert draws.min() >= 1
        assert draws.max() <= 6

    def test_deterministic_under_seed(self):
        n = np.full(100, 9)
        mu = np.full(100, 0.4)
        a = sample_ztbb_arrays(n, mu, 3.0, np.random.default_rng(42))
        b = sample_ztbb_arrays(n, mu, 3.0, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_mean_matches_truncated_moment(self):
        rng = np.random.default_rng(123)
        m = 200_000
        draws = sample_ztbb_arrays(np.full(m, 5), np.full(m, 0.3), 2.0, rng)
        tm = truncated_moments(BetaBinParams(5, 0.3, 2.0))
        mc_se = math.sqrt(tm.var / m)
        assert abs(draws.mean() - tm.mean) < 3 * mc_se

    def test_scalar_sampler_agrees_with_pmf(self):
        rng = np.random.default_rng(5)
        p = BetaBinParams(4, 0.5, 2.0)
        draws = np.array([sample_ztbb(p, rng) for _ in range(20_000)])
        probs = exhaustive_pmf(p)
        cond = probs[1:] / (1 - probs[0])
        counts = np.bincount(draws, minlength=5)[1:]
        chi2 = (((counts - 20_000 * cond) ** 2) / (20_000 * cond)).sum()
        pval = stats.chi2.sf(chi2, df=len(cond) - 1)
        assert pval > 0.001

    def test_rejection_cap_names_cell(self):
        rng = np.random.default_rng(0)
        with pytest.raises(RuntimeError, match=r"mu=1e-09"):
            sample_ztbb_arrays(np.array([2]), np.array([1e-9]), 1.0, rng, max_tries=50)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_ztbb_arrays(np.array([2, 3]), np.array([0.5]), 1.0, rng)


# ---------------------------------------------------------------------------
# derivative bundle
# ---------------------------------------------------------------------------


class TestCellDerivs:
    def test_gradient_matches_finite_difference(self):
        y, n, mu, kappa = 3, 10, 0.35, 6.0

        def ll(m, c):
            p = BetaBinParams(n, m, math.exp(c))
            return log_pmf(p, y) - math.log1p(-zero_prob(p))

        d = ztbb_cell_derivs(np.array([y]), np.array([n]), np.array([mu]), kappa, order=2)
        step = 1e-6
        c0 = math.log(kappa)
        fd_mu = (ll(mu + step, c0) - ll(mu - step, c0)) / (2 * step)
        fd_c = (ll(mu, c0 + step) - ll(mu, c0 - step)) / (2 * step)
        assert d.d_mu[0] == pytest.approx(fd_mu, rel=1e-6)
        assert d.d_c[0] == pytest.approx(fd_c, rel=1e-6)

    def test_loglik_value(self):
        y, n, mu, kappa = 2, 7, 0.3, 2.0
        p = BetaBinParams(n, mu, kappa)
        d = ztbb_cell_derivs(np.array([y]), np.array([n]), np.array([mu]), kappa)
        want = log_pmf(p, y) - math.log1p(-zero_prob(p))
        assert d.ll[0] == pytest.approx(want, rel=1e-12)


class TestRuntime:
    def test_reference_cell_is_fast(self):
        p = BetaBinParams(5, 0.3, 2.0)
        zero_prob(p), moments(p), truncated_moments(p)
        t0 = time.perf_counter()
        zero_prob(p)
        moments(p)
        truncated_moments(p)
        assert time.perf_counter() - t0 < 1e-3
