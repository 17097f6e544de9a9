"""Diffusion-based variational inference for implicit Bayesian last layers."""

from .conjugate import GaussianPosterior, GaussianPrior, NoiseModel, fit_posterior, log_evidence
from .data import Dataset, load_boston, load_csv, make_synthetic, prepare_splits
from .diffusion import DiffusionSchedule, ScoreNet, elbo_estimate, kappa, sample_posterior
from .metrics import PredictiveMixture, ece, nll, rmse
from .trainer import ModelBundle, TrainConfig, train, train_map

__version__ = "0.1.0"

__all__ = [
    "DiffusionSchedule",
    "Dataset",
    "GaussianPosterior",
    "GaussianPrior",
    "ModelBundle",
    "NoiseModel",
    "PredictiveMixture",
    "ScoreNet",
    "TrainConfig",
    "ece",
    "elbo_estimate",
    "fit_posterior",
    "kappa",
    "load_boston",
    "load_csv",
    "log_evidence",
    "make_synthetic",
    "nll",
    "prepare_splits",
    "rmse",
    "sample_posterior",
    "train",
    "train_map",
]
