"""Predictive mixtures and evaluation metrics (NLL, RMSE, ECE, ROC-AUC)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PredictiveMixture:
    """Uniform mixture over posterior samples.

    Regression: ``means`` and ``variances`` of shape (n_samples, n_points).
    Classification: ``probs`` of shape (n_samples, n_points, C).
    """

    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        if self.probs is None:
            if self.means is None or self.variances is None:
                raise ValueError("regression mixtures need means and variances")
            means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
            variances = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), means.shape)
            if np.any(variances <= 0):
                raise ValueError("mixture component variances must be positive")
            object.__setattr__(self, "means", means)
            object.__setattr__(self, "variances", variances)
        else:
            probs = np.asarray(self.probs, dtype=np.float64)
            if probs.ndim == 2:
                probs = probs[None]
            if not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-8):
                raise ValueError("class probabilities must sum to one")
            object.__setattr__(self, "probs", probs)

    @property
    def is_classification(self) -> bool:
        return self.probs is not None

    @property
    def n_components(self) -> int:
        return (self.probs if self.is_classification else self.means).shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_components, 1.0 / self.n_components)

    def mean(self) -> np.ndarray:
        if self.is_classification:
            return self.probs.mean(axis=0)
        return self.means.mean(axis=0)

    def variance(self) -> np.ndarray:
        """Total predictive variance per point (regression)."""
        m = self.means.mean(axis=0)
        return (self.variances + self.means**2).mean(axis=0) - m**2

    def log_density(self, y) -> np.ndarray:
        """log p(y_i) for each test point, log-sum-exp over components."""
        if self.is_classification:
            labels = np.asarray(y).astype(int).reshape(-1)
            p = self.mean()[np.arange(len(labels)), labels]
            return np.log(np.maximum(p, 1e-300))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        comp = -0.5 * (LOG_2PI + np.log(self.variances) + (y - self.means) ** 2 / self.variances)
        return special.logsumexp(comp, axis=0) - np.log(self.n_components)

    def entropy(self) -> np.ndarray:
        p = self.mean()
        return -np.sum(np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0), axis=-1)

    def ood_score(self) -> np.ndarray:
        """Predictive entropy (classification) or total variance (regression)."""
        return self.entropy() if self.is_classification else self.variance()


def nll(mixture: PredictiveMixture, y) -> float:
    y = np.asarray(y).reshape(-1)
    n_points = (mixture.probs if mixture.is_classification else mixture.means).shape[1]
    if len(y) != n_points:
        raise ValueError(f"{len(y)} targets for {n_points} predictions")
    return float(-np.mean(mixture.log_density(y)))


def rmse(means, y) -> float:
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(means) != len(y):
        raise ValueError(f"{len(y)} targets for {len(means)} predictions")
    return float(np.sqrt(np.mean((means - y) ** 2)))


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=-1) == np.asarray(labels)))


def ece(probs, labels, n_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probs must be (n, C) with one label per row")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    # bins are (lo, hi]; confidence 0 joins the first bin
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        mask = idx == b
        if mask.any():
            total += mask.mean() * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def roc_auc(scores, labels) -> float:
    """Rank-based AUC (Mann-Whitney) with midranks for ties; label 1 is positive."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = stats.rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mixture_from_weights(phi: np.ndarray, beta: np.ndarray, noise_var: float | None = None) -> PredictiveMixture:
    """Mixture for features (n_points, M) and sampled weights (n_samples, M, C)."""
    out = np.einsum("pm,smc->spc", phi, beta)
    if noise_var is None:
        return PredictiveMixture(probs=special.softmax(out, axis=-1))
    return PredictiveMixture(means=out[..., 0], variances=np.full(out.shape[:2], noise_var))


def predict(bundle, x, n_samples: int, rng: np.random.Generator) -> PredictiveMixture:
    """Predictive mixture under the diffusion posterior of a trained model bundle."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    beta = bundle.sample_weights(n_samples, rng)
    phi = bundle.feature_matrix(x)
    return mixture_from_weights(phi, beta, bundle.noise_var if bundle.task == "regression" else None)


def mc_stderr(values) -> float:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0


def metric_record(metric: str, values) -> dict:
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return {"metric": metric, "value": float(values.mean()), "mc_stderr": mc_stderr(values), "n_seeds": len(values)}
