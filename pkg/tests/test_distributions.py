"""Log-densities, samplers and divergences checked against dense or naive oracles."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlvm.distributions import (
    BERNOULLI_EPS,
    BernoulliProduct,
    DistributionError,
    GaussianDiag,
    GaussianDiagRank1,
    GaussianIso,
    bernoulli_logpmf,
    gaussian_logpdf,
    kl_gaussian_to_std,
    log_sum_exp,
    make_rng,
    sample,
)


def dense_logpdf(x, mean, cov):
    r = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (r @ np.linalg.solve(cov, r) + logdet + len(x) * math.log(2 * math.pi))


def random_rank1(rng, d):
    return GaussianDiagRank1(rng.standard_normal(d), rng.uniform(0.3, 2.0, d), rng.standard_normal(d))


class TestGaussianLogpdf:
    def test_standard_normal_at_zero(self):
        val = gaussian_logpdf(np.zeros(1), GaussianIso(np.zeros(1), 1.0))
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
        assert val == pytest.approx(-0.918938533204673, abs=1e-12)

    def test_bivariate_at_mean(self):
        val = gaussian_logpdf(np.ones(2), GaussianDiag(np.ones(2), np.ones(2)))
        assert val == pytest.approx(-math.log(2 * math.pi), abs=1e-14)
        assert val == pytest.approx(-1.8378770664093453, abs=1e-12)

    def test_diag_rank1_against_dense(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = random_rank1(rng, 3)
            x = rng.standard_normal(3)
            expected = dense_logpdf(x, q.mean, np.diag(q.diag) + np.outer(q.u, q.u))
            assert gaussian_logpdf(x, q) == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_diag_against_dense(self):
        rng = np.random.default_rng(1)
        mean, diag, x = rng.standard_normal(4), rng.uniform(0.1, 3, 4), rng.standard_normal(4)
        assert gaussian_logpdf(x, GaussianDiag(mean, diag)) == pytest.approx(dense_logpdf(x, mean, np.diag(diag)), rel=1e-12)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(DistributionError):
            GaussianIso(np.zeros(2), 0.0)
        with pytest.raises(DistributionError):
            GaussianDiag(np.zeros(2), np.array([1.0, -1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DistributionError):
            gaussian_logpdf(np.zeros(3), GaussianIso(np.zeros(2), 1.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 10), st.floats(1e-3, 10.0), st.integers(0, 2**31))
    def test_floored_density_bound(self, p, xi, seed):
        rng = np.random.default_rng(seed)
        dist = GaussianDiag(rng.standard_normal(p), xi + rng.exponential(1.0, p))
        x = rng.standard_normal(p) * 3
        assert gaussian_logpdf(x, dist) <= -0.5 * p * math.log(2 * math.pi * xi) + 1e-12


class TestBernoulliLogpmf:
    def test_fair_coins(self):
        x = np.array([1, 0, 1, 1, 0.0])
        assert bernoulli_logpmf(x, BernoulliProduct(np.full(5, 0.5))) == pytest.approx(5 * math.log(0.5))

    def test_single_coordinate(self):
        assert bernoulli_logpmf(np.ones(1), BernoulliProduct(np.array([0.9]))) == pytest.approx(-0.10536051565782628, abs=1e-12)

    def test_random_against_product(self):
        rng = np.random.default_rng(2)
        probs = rng.uniform(0.05, 0.95, 8)
        x = (rng.random(8) < 0.5).astype(float)
        # product of masses in exact rational arithmetic, then log
        prod = Fraction(1)
        for xi, pi in zip(x, probs):
            prod *= Fraction(pi) if xi else 1 - Fraction(pi)
        assert bernoulli_logpmf(x, BernoulliProduct(probs)) == pytest.approx(math.log(prod), rel=1e-13)

    def test_non_binary_rejected(self):
        with pytest.raises(DistributionError):
            bernoulli_logpmf(np.array([0.5]), BernoulliProduct(np.array([0.5])))

    def test_saturated_probabilities_stay_finite(self):
        val = bernoulli_logpmf(np.array([0.0, 1.0]), BernoulliProduct(np.array([1.0, 0.0])))
        assert val == pytest.approx(2 * math.log(BERNOULLI_EPS), rel=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**31))
    def test_never_positive(self, p, seed):
        rng = np.random.default_rng(seed)
        probs = rng.random(p)
        x = (rng.random(p) < 0.5).astype(float)
        assert bernoulli_logpmf(x, BernoulliProduct(probs)) <= 0.0


class TestSample:
    def test_iso_mean_clt(self):
        draws = sample(GaussianIso(np.zeros(2), 1.0), make_rng(0), size=100_000)
        assert np.all(np.abs(draws.mean(axis=0)) < 3 / math.sqrt(100_000))

    def test_rank1_covariance(self):
        q = GaussianDiagRank1(np.zeros(3), np.array([1.0, 0.5, 2.0]), np.array([0.8, -0.6, 0.3]))
        draws = sample(q, make_rng(1), size=100_000)
        cov = np.cov(draws.T)
        target = q.covariance
        assert np.all(np.abs(cov - target) <= 0.05 * np.abs(target).max())
        np.testing.assert_allclose(np.diag(cov), np.diag(target), rtol=0.05)

    def test_bernoulli_all_ones(self):
        np.testing.assert_array_equal(sample(BernoulliProduct(np.ones(4)), make_rng(0)), np.ones(4))

    def test_seed_reproducible(self):
        q = GaussianDiagRank1(np.zeros(2), np.ones(2), np.ones(2))
        np.testing.assert_array_equal(sample(q, make_rng(5), 10), sample(q, make_rng(5), 10))


class TestLogSumExp:
    def test_two_zeros(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2))

    def test_no_underflow(self):
        assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000 + math.log(2), abs=1e-12)

    def test_random_against_extended_precision(self):
        v = np.random.default_rng(3).standard_normal(10) * 5
        expected = float(np.log(np.sum(np.exp(v.astype(np.longdouble)))))
        assert log_sum_exp(v) == pytest.approx(expected, rel=1e-14)

    def test_empty_rejected(self):
        with pytest.raises(DistributionError):
            log_sum_exp([])

    def test_all_minus_infinity(self):
        assert log_sum_exp([-np.inf, -np.inf]) == -np.inf


class TestKL:
    def test_standard_normal(self):
        q = GaussianDiagRank1(np.zeros(3), np.ones(3), np.zeros(3))
        assert kl_gaussian_to_std(q) == pytest.approx(0.0, abs=1e-15)

    def test_shifted_mean(self):
        mu = np.array([1.0, -2.0])
        assert kl_gaussian_to_std(GaussianDiagRank1(mu, np.ones(2), np.zeros(2))) == pytest.approx(0.5 * mu @ mu)

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        q = random_rank1(rng, 3)
        z = sample(q, make_rng(9), size=1_000_000)
        cov = q.covariance
        chol = np.linalg.cholesky(cov)
        r = np.linalg.solve(chol, (z - q.mean).T)
        log_q = -0.5 * (np.sum(r * r, axis=0) + 2 * np.log(np.diag(chol)).sum() + 3 * math.log(2 * math.pi))
        log_p = -0.5 * (np.sum(z * z, axis=1) + 3 * math.log(2 * math.pi))
        terms = log_q - log_p
        se = terms.std() / math.sqrt(terms.size)
        assert abs(kl_gaussian_to_std(q) - terms.mean()) < 3 * se

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31))
    def test_nonnegative(self, d, seed):
        assert kl_gaussian_to_std(random_rank1(np.random.default_rng(seed), d)) >= -1e-12
