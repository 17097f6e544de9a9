"""Exact Bayesian last layer with a conjugate Gaussian weight prior.

Used both as a baseline model and as the analytic oracle for the diffusion
sampler: with an identity generator and a standard normal auxiliary prior the
diffusion posterior must reproduce :func:`fit_posterior`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg, optimize

LOG_2PI = np.log(2.0 * np.pi)
WOODBURY_THRESHOLD = 512
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def spd_cholesky(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-10 to 1e-6."""
    a = np.asarray(a, dtype=np.float64)
    scale = max(float(np.mean(np.abs(np.diag(a)))), 1.0)
    for jitter in _JITTERS:
        try:
            return linalg.cholesky(a + jitter * scale * np.eye(len(a)), lower=True)
        except linalg.LinAlgError:
            continue
    smallest = float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])
    raise NotPositiveDefiniteError(f"{what} is not positive definite (smallest eigenvalue ~ {smallest:.3e})")


def _logdet_from_chol(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        prec = np.atleast_2d(np.asarray(self.precision, dtype=np.float64))
        if prec.shape != (len(mean), len(mean)):
            raise ValueError(f"prior precision shape {prec.shape} does not match mean length {len(mean)}")
        if not np.allclose(prec, prec.T, atol=1e-12):
            raise ValueError("prior precision must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)

    @classmethod
    def isotropic(cls, dim: int, precision: float = 1.0) -> "GaussianPrior":
        return cls(np.zeros(dim), precision * np.eye(dim))

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise, stored as log variance."""

    log_var: float

    @classmethod
    def from_var(cls, var: float) -> "NoiseModel":
        if not var > 0:
            raise ValueError(f"noise variance must be positive, got {var}")
        return cls(float(np.log(var)))

    @property
    def var(self) -> float:
        return float(np.exp(self.log_var))


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    precision: np.ndarray

    @cached_property
    def chol(self) -> np.ndarray:
        return spd_cholesky(self.precision, "posterior precision")

    @cached_property
    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(len(self.mean)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, len(self.mean)))
        # x = mean + L^{-T} z has covariance (L L^T)^{-1}
        return self.mean + linalg.solve_triangular(self.chol, z.T, lower=True, trans="T").T


def _check_design(phi: np.ndarray, y: np.ndarray, prior: GaussianPrior) -> tuple[np.ndarray, np.ndarray]:
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if phi.shape[0] != len(y):
        raise ValueError(f"feature matrix has {phi.shape[0]} rows but y has {len(y)} entries")
    if phi.shape[1] != prior.dim:
        raise ValueError(f"feature dimension {phi.shape[1]} does not match prior dimension {prior.dim}")
    return phi, y


def fit_posterior(phi, y, prior: GaussianPrior, noise: NoiseModel) -> GaussianPosterior:
    phi, y = _check_design(phi, y, prior)
    inv_var = 1.0 / noise.var
    precision = prior.precision + inv_var * (phi.T @ phi)
    precision = 0.5 * (precision + precision.T)
    chol = spd_cholesky(precision, "posterior precision")
    rhs = prior.precision @ prior.mean + inv_var * (phi.T @ y)
    mean = linalg.cho_solve((chol, True), rhs)
    post = GaussianPosterior(mean, precision)
    post.__dict__["chol"] = chol
    return post


def predictive(phi_x, post: GaussianPosterior, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance for one feature vector or a matrix of rows."""
    phi_x = np.asarray(phi_x, dtype=np.float64)
    single = phi_x.ndim == 1
    rows = np.atleast_2d(phi_x)
    if rows.shape[1] != len(post.mean):
        raise ValueError(f"feature dimension {rows.shape[1]} does not match posterior dimension {len(post.mean)}")
    mean = rows @ post.mean
    half = linalg.solve_triangular(post.chol, rows.T, lower=True)
    var = noise.var + np.sum(half * half, axis=0)
    return (mean[0], var[0]) if single else (mean, var)


def log_evidence(phi, y, prior: GaussianPrior, noise: NoiseModel, method: str = "auto") -> float:
    """log N(y | Phi mu0, sigma^2 I + Phi Lambda0^{-1} Phi^T).

    ``method`` is "data" (N x N covariance), "weights" (M x M Woodbury form) or
    "auto", which picks "data" for N <= 512.
    """
    phi, y = _check_design(phi, y, prior)
    n = len(y)
    if method == "auto":
        method = "data" if n <= WOODBURY_THRESHOLD else "weights"
    resid = y - phi @ prior.mean
    if method == "data":
        prior_chol = spd_cholesky(prior.precision, "prior precision")
        half = linalg.solve_triangular(prior_chol, phi.T, lower=True)
        cov = noise.var * np.eye(n) + half.T @ half
        chol = spd_cholesky(cov, "marginal covariance")
        alpha = linalg.solve_triangular(chol, resid, lower=True)
        return float(-0.5 * (n * LOG_2PI + _logdet_from_chol(chol) + alpha @ alpha))
    if method == "weights":
        post = fit_posterior(phi, y, prior, noise)
        prior_chol = spd_cholesky(prior.precision, "prior precision")
        delta = post.mean - prior.mean
        fit = phi @ post.mean - y
        quad = fit @ fit / noise.var + delta @ prior.precision @ delta
        return float(
            -0.5 * n * (LOG_2PI + noise.log_var)
            - 0.5 * (_logdet_from_chol(post.chol) - _logdet_from_chol(prior_chol))
            - 0.5 * quad
        )
    raise ValueError(f"unknown evidence method {method!r}")


def gaussian_logpdf(y, mean, var) -> np.ndarray:
    y, mean, var = np.asarray(y), np.asarray(mean), np.asarray(var)
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


@dataclass
class ConjugateBLL:
    """Conjugate last layer with isotropic prior precision and noise fitted by evidence."""

    prior: GaussianPrior
    noise: NoiseModel
    posterior: GaussianPosterior

    @classmethod
    def fit(cls, phi, y, optimize_hyper: bool = True, prior_precision: float = 1.0, noise_var: float = 1.0):
        phi = np.asarray(phi, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        dim = phi.shape[1]

        def neg_evidence(z):
            return -log_evidence(phi, y, GaussianPrior.isotropic(dim, np.exp(z[0])), NoiseModel(z[1]))

        z0 = np.array([np.log(prior_precision), np.log(noise_var)])
        if optimize_hyper:
            res = optimize.minimize(neg_evidence, z0, method="L-BFGS-B", bounds=[(-12.0, 12.0), (-12.0, 8.0)])
            z0 = res.x
        prior = GaussianPrior.isotropic(dim, float(np.exp(z0[0])))
        noise = NoiseModel(float(z0[1]))
        return cls(prior, noise, fit_posterior(phi, y, prior, noise))

    def predict(self, phi) -> tuple[np.ndarray, np.ndarray]:
        return predictive(np.atleast_2d(phi), self.posterior, self.noise)

    def test_nll(self, phi, y) -> float:
        mean, var = self.predict(phi)
        return float(-np.mean(gaussian_logpdf(np.asarray(y).reshape(-1), mean, var)))
