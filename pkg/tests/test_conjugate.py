import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvi_ibll.conjugate import (
    ConjugateBLL,
    GaussianPrior,
    NoiseModel,
    NotPositiveDefiniteError,
    fit_posterior,
    log_evidence,
    predictive,
    spd_cholesky,
)


def random_instance(seed, n=50, m=8, noise_var=0.3):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((n, m))
    y = phi @ rng.standard_normal(m) + math.sqrt(noise_var) * rng.standard_normal(n)
    a = rng.standard_normal((m, m))
    prior = GaussianPrior(rng.standard_normal(m) * 0.3, a @ a.T / m + np.eye(m))
    return phi, y, prior, NoiseModel.from_var(noise_var)


def dense_posterior(phi, y, prior, noise):
    """Textbook formulas with explicit inverses."""
    prec = prior.precision + phi.T @ phi / noise.var
    cov = np.linalg.inv(prec)
    return cov @ (prior.precision @ prior.mean + phi.T @ y / noise.var), prec


def gaussian_log_density(y, mean, cov):
    d = y - mean
    sign, logdet = np.linalg.slogdet(2 * np.pi * cov)
    return -0.5 * (logdet + d @ np.linalg.solve(cov, d))


class TestFitPosterior:
    def test_identity_design(self):
        post = fit_posterior(np.eye(2), [1.0, 2.0], GaussianPrior.isotropic(2), NoiseModel.from_var(1.0))
        np.testing.assert_allclose(post.precision, 2 * np.eye(2))
        np.testing.assert_allclose(post.mean, [0.5, 1.0])

    def test_zero_targets(self):
        phi = np.random.default_rng(1).standard_normal((30, 4))
        post = fit_posterior(phi, np.zeros(30), GaussianPrior.isotropic(4), NoiseModel.from_var(0.5))
        np.testing.assert_allclose(post.mean, 0.0, atol=1e-15)

    def test_matches_dense_oracle(self):
        phi, y, prior, noise = random_instance(0)
        post = fit_posterior(phi, y, prior, noise)
        mean, prec = dense_posterior(phi, y, prior, noise)
        np.testing.assert_allclose(post.mean, mean, atol=1e-10)
        np.testing.assert_allclose(post.precision, prec, atol=1e-10)

    def test_shape_checks(self):
        with pytest.raises(ValueError, match="rows"):
            fit_posterior(np.ones((3, 2)), np.ones(4), GaussianPrior.isotropic(2), NoiseModel(0.0))
        with pytest.raises(ValueError, match="dimension"):
            fit_posterior(np.ones((3, 2)), np.ones(3), GaussianPrior.isotropic(3), NoiseModel(0.0))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_precision_symmetric_and_dominates_prior(self, seed):
        phi, y, prior, noise = random_instance(seed, n=20, m=5)
        post = fit_posterior(phi, y, prior, noise)
        assert np.max(np.abs(post.precision - post.precision.T)) < 1e-12
        assert np.linalg.eigvalsh(post.precision)[0] > 0
        assert np.linalg.eigvalsh(post.precision - prior.precision)[0] > -1e-10


def test_non_pd_error_reports_eigenvalue():
    with pytest.raises(NotPositiveDefiniteError, match="smallest eigenvalue ~ -1"):
        spd_cholesky(np.diag([1.0, -1.0]))


def test_jitter_rescues_semidefinite():
    chol = spd_cholesky(np.ones((3, 3)))
    assert np.all(np.isfinite(chol))


class TestPredictive:
    def test_identity_continuation(self):
        noise = NoiseModel.from_var(1.0)
        post = fit_posterior(np.eye(2), [1.0, 2.0], GaussianPrior.isotropic(2), noise)
        mean, var = predictive([1.0, 0.0], post, noise)
        assert mean == pytest.approx(0.5)
        assert var == pytest.approx(1.5)

    def test_zero_features(self):
        phi, y, prior, noise = random_instance(2)
        post = fit_posterior(phi, y, prior, noise)
        mean, var = predictive(np.zeros(8), post, noise)
        assert mean == 0.0
        assert var == noise.var

    def test_monte_carlo_oracle(self):
        phi, y, prior, noise = random_instance(3)
        post = fit_posterior(phi, y, prior, noise)
        rng = np.random.default_rng(0)
        x = rng.standard_normal(8)
        beta = rng.multivariate_normal(post.mean, np.linalg.inv(post.precision), size=200_000)
        ys = beta @ x + math.sqrt(noise.var) * rng.standard_normal(len(beta))
        mean, var = predictive(x, post, noise)
        assert abs(ys.mean() - mean) < 4 * ys.std() / math.sqrt(len(ys))
        assert abs(ys.var() - var) < 4 * var * math.sqrt(2 / len(ys))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_variance_at_least_noise(self, seed):
        phi, y, prior, noise = random_instance(seed, n=10, m=4)
        post = fit_posterior(phi, y, prior, noise)
        x = np.random.default_rng(seed).standard_normal((6, 4)) * 5
        _, var = predictive(x, post, noise)
        assert np.all(var >= noise.var)

    def test_variance_shrinks_with_duplicates(self):
        rng = np.random.default_rng(5)
        phi = rng.standard_normal((4, 3))
        x = rng.standard_normal(3)
        noise, prior = NoiseModel.from_var(0.5), GaussianPrior.isotropic(3)
        variances = []
        for reps in range(1, 6):
            big = np.tile(phi, (reps, 1))
            post = fit_posterior(big, np.zeros(len(big)), prior, noise)
            variances.append(predictive(x, post, noise)[1])
        assert all(a > b for a, b in zip(variances, variances[1:]))


class TestLogEvidence:
    def test_one_dimensional(self):
        value = log_evidence([[1.0]], [0.0], GaussianPrior([0.0], [[1.0]]), NoiseModel.from_var(1.0))
        expected = -0.5 * math.log(2 * math.pi * 2.0)
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(-1.26551, abs=1e-5)

    def test_maximised_at_prior_mean(self):
        phi, _, prior, noise = random_instance(4, n=6, m=3)
        at_mode = log_evidence(phi, phi @ prior.mean, prior, noise)
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = phi @ prior.mean + 0.1 * rng.standard_normal(6)
            assert log_evidence(phi, y, prior, noise) < at_mode

    def test_matches_dense_gaussian(self):
        phi, y, prior, noise = random_instance(6, n=20, m=5)
        cov = noise.var * np.eye(20) + phi @ np.linalg.inv(prior.precision) @ phi.T
        assert log_evidence(phi, y, prior, noise) == pytest.approx(
            gaussian_log_density(y, phi @ prior.mean, cov), abs=1e-9
        )

    def test_sequential_updates(self):
        """Chain rule: log p(y) = sum_i log p(y_i | y_<i)."""
        phi, y, prior, noise = random_instance(7, n=20, m=5)
        total = 0.0
        current = prior
        for i in range(20):
            cov = np.linalg.inv(current.precision)
            mean = phi[i] @ current.mean
            var = noise.var + phi[i] @ cov @ phi[i]
            total += -0.5 * (math.log(2 * math.pi * var) + (y[i] - mean) ** 2 / var)
            post = fit_posterior(phi[i : i + 1], y[i : i + 1], current, noise)
            current = GaussianPrior(post.mean, post.precision)
        assert log_evidence(phi, y, prior, noise) == pytest.approx(total, abs=1e-8)

    def test_data_and_weight_forms_agree(self):
        phi, y, prior, noise = random_instance(8, n=60, m=6)
        a = log_evidence(phi, y, prior, noise, method="data")
        b = log_evidence(phi, y, prior, noise, method="weights")
        assert a == pytest.approx(b, abs=1e-8)

    def test_large_n_uses_weight_form(self):
        phi, y, prior, noise = random_instance(9, n=700, m=4)
        assert log_evidence(phi, y, prior, noise) == log_evidence(phi, y, prior, noise, method="weights")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_implied_kernel_gram_is_psd(seed):
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((12, 5))
    a = rng.standard_normal((5, 5))
    prec = a @ a.T + 0.1 * np.eye(5)
    gram = phi @ np.linalg.solve(prec, phi.T)
    assert np.max(np.abs(gram - gram.T)) < 1e-8 * np.max(np.abs(gram))
    assert np.linalg.eigvalsh(0.5 * (gram + gram.T))[0] > -1e-8 * np.max(np.abs(gram))


def test_conjugate_bll_fit_improves_evidence():
    phi, y, _, _ = random_instance(10, n=80, m=6)
    fitted = ConjugateBLL.fit(phi, y)
    default = ConjugateBLL.fit(phi, y, optimize_hyper=False)
    assert log_evidence(phi, y, fitted.prior, fitted.noise) >= log_evidence(phi, y, default.prior, default.noise)
    assert np.isfinite(fitted.test_nll(phi, y))
