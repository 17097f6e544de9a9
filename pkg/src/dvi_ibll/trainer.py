"""Joint stochastic-gradient training of features, generator, score net and noise.

Each step draws a mini-batch, simulates reverse-SDE paths and takes an AdamW
step on the negative ELBO. Validation NLL picks the returned snapshot.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .autodiff import (
    AdamWState,
    Mlp,
    MlpConfig,
    NonFiniteGradientError,
    Tensor,
    adamw_step,
    as_tensor,
    grad,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from .conjugate import ConjugateBLL
from .data import Dataset
from .diffusion import (
    CategoricalLikelihood,
    DiffusionSchedule,
    ElboEstimate,
    GaussianLikelihood,
    NonFiniteElboError,
    NonFiniteScoreError,
    ScoreNet,
    elbo_estimate,
    sample_posterior,
)
from .implicit_prior import AuxiliaryPrior, GeneratorNet, generate_weights
from .metrics import nll, predict, rmse

log = logging.getLogger(__name__)

GROUPS = ("features", "generator", "score", "noise")


class TrainingDiverged(RuntimeError):
    pass


class FeatureNet:
    """phi(x; theta): an MLP whose activated last hidden layer is the feature vector."""

    def __init__(
        self,
        input_dim: int,
        hidden_dims: tuple[int, ...] = (50, 50),
        rng: np.random.Generator | None = None,
        activation: str = "leaky_relu",
        mlp: Mlp | None = None,
    ):
        self.input_dim = input_dim
        if mlp is None and hidden_dims:
            hidden_dims = tuple(hidden_dims)
            cfg = MlpConfig(input_dim, hidden_dims[:-1], hidden_dims[-1], activation, activate_output=True)
            mlp = Mlp(cfg, rng if rng is not None else np.random.default_rng(0))
        self.mlp = mlp

    @classmethod
    def identity(cls, dim: int) -> "FeatureNet":
        return cls(dim, hidden_dims=())

    @property
    def n_features(self) -> int:
        return self.input_dim if self.mlp is None else self.mlp.cfg.output_dim

    @property
    def params(self) -> dict[str, Tensor]:
        return {} if self.mlp is None else self.mlp.params

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"feature net expects {self.input_dim} inputs, got shape {x.shape}")
        return x if self.mlp is None else self.mlp(x)


@dataclass
class ModelBundle:
    features: FeatureNet
    generator: GeneratorNet
    score: ScoreNet
    likelihood: GaussianLikelihood | CategoricalLikelihood
    schedule: DiffusionSchedule
    aux_prior: AuxiliaryPrior
    frozen: frozenset[str] = frozenset()

    def __post_init__(self):
        m = self.features.n_features
        if self.generator.n_features != m:
            raise ValueError(f"generator emits {self.generator.n_features} features per output, feature net has {m}")
        if self.generator.aux_dim != self.aux_prior.dim or self.score.dim != self.aux_prior.dim:
            raise ValueError("auxiliary dimension differs between prior, generator and score net")
        if self.generator.n_outputs != self.likelihood.n_outputs:
            raise ValueError("generator output count does not match the likelihood")
        if self.score.schedule != self.schedule:
            raise ValueError("score net was built for a different schedule")
        unknown = set(self.frozen) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    @classmethod
    def build(
        cls,
        input_dim: int,
        feature_dims: tuple[int, ...] = (50, 50),
        aux_dim: int | None = None,
        n_outputs: int = 1,
        task: str = "regression",
        schedule: DiffusionSchedule | None = None,
        generator_hidden: tuple[int, ...] = (64,),
        score_hidden: tuple[int, ...] = (64, 64),
        log_noise_var: float = 0.0,
        seed: int = 0,
        score_affine_skip: bool = True,
    ) -> "ModelBundle":
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
        features = FeatureNet(input_dim, tuple(feature_dims), rngs[0]) if feature_dims else FeatureNet.identity(input_dim)
        m = features.n_features
        k = aux_dim or m
        schedule = schedule or DiffusionSchedule.stationary()
        if generator_hidden is None:
            generator = GeneratorNet.identity(k) if k == m * n_outputs else None
            if generator is None:
                raise ValueError("identity generator needs K = M * C")
        else:
            generator = GeneratorNet(k, m, n_outputs, tuple(generator_hidden), rngs[1])
        score = ScoreNet(k, schedule, tuple(score_hidden), rngs[2], affine_skip=score_affine_skip)
        likelihood = GaussianLikelihood(log_noise_var) if task == "regression" else CategoricalLikelihood(n_outputs)
        return cls(features, generator, score, likelihood, schedule, AuxiliaryPrior(k))

    @property
    def task(self) -> str:
        return "regression" if isinstance(self.likelihood, GaussianLikelihood) else "classification"

    @property
    def noise_var(self) -> float:
        return self.likelihood.var if self.task == "regression" else float("nan")

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        return {
            "features": self.features.params,
            "generator": self.generator.params,
            "score": self.score.params,
            "noise": self.likelihood.params,
        }

    def trainable_groups(self) -> dict[str, dict[str, Tensor]]:
        return {k: v for k, v in self.param_groups().items() if k not in self.frozen and v}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{g}/{n}": p.data.copy() for g, ps in self.param_groups().items() for n, p in ps.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for g, ps in self.param_groups().items():
            for n, p in ps.items():
                value = np.asarray(state[f"{g}/{n}"], dtype=np.float64)
                if value.shape != p.shape:
                    raise ValueError(f"shape mismatch for {g}/{n}: {value.shape} vs {p.shape}")
                p.data = value.copy()

    def architecture(self) -> dict:
        f = self.features.mlp
        return {
            "input_dim": self.features.input_dim,
            "feature_dims": [] if f is None else [*f.cfg.hidden_dims, f.cfg.output_dim],
            "aux_dim": self.aux_prior.dim,
            "n_outputs": self.generator.n_outputs,
            "task": self.task,
            "schedule": self.schedule.to_dict(),
            "generator_hidden": list(self.generator.mlp.cfg.hidden_dims),
            "score_hidden": list(self.score.mlp.cfg.hidden_dims),
            "score_affine_skip": self.score.affine_skip,
            "frozen": sorted(self.frozen),
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "ModelBundle":
        bundle = cls.build(
            input_dim=arch["input_dim"],
            feature_dims=tuple(arch["feature_dims"]),
            aux_dim=arch["aux_dim"],
            n_outputs=arch["n_outputs"],
            task=arch["task"],
            schedule=DiffusionSchedule(**arch["schedule"]),
            generator_hidden=tuple(arch["generator_hidden"]),
            score_hidden=tuple(arch["score_hidden"]),
            score_affine_skip=arch.get("score_affine_skip", True),
        )
        bundle.frozen = frozenset(arch.get("frozen", ()))
        return bundle

    def save(self, path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.state_dict(), {"architecture": self.architecture(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["ModelBundle", dict]:
        arrays, meta = load_checkpoint(path)
        bundle = cls.from_architecture(meta["architecture"])
        bundle.load_state_dict(arrays)
        return bundle, meta

    # -- inference helpers ------------------------------------------------------
    def sample_omega(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_posterior(self.schedule, self.score, n, rng, dim=self.aux_prior.dim)

    def sample_weights(self, n: int, rng: np.random.Generator) -> np.ndarray:
        omega = self.sample_omega(n, rng)
        with no_grad():
            return generate_weights(self.generator, omega).data.copy()

    def feature_matrix(self, x) -> np.ndarray:
        with no_grad():
            return self.features(np.asarray(x, dtype=np.float64)).data.copy()

    def elbo(self, x, y, n_data: int, n_paths: int, rng=None, **kw):
        return elbo_estimate(
            x, y, n_data, self.features, self.generator, self.score, self.schedule, self.likelihood, n_paths, rng,
            aux_prior=self.aux_prior, **kw,
        )


def freeze(bundle: ModelBundle, *groups: str) -> ModelBundle:
    """Shallow copy of ``bundle`` whose listed parameter groups are excluded from training."""
    out = copy.copy(bundle)
    out.frozen = frozenset(bundle.frozen | set(groups))
    out.__post_init__()
    return out


def freeze_features(bundle: ModelBundle) -> ModelBundle:
    return freeze(bundle, "features")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lr_noise: float = 1e-2
    lr_overrides: dict[str, float] = field(default_factory=dict)
    weight_decay: float = 1e-4
    n_paths: int = 16
    antithetic: bool = True
    eval_paths: int = 256
    seed: int = 0
    patience: int = 20
    eval_interval: int = 1
    max_skip_fraction: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.n_paths < 1 or self.eval_paths < 1:
            raise ValueError("path counts must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        unknown = set(self.lr_overrides) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups in lr_overrides: {sorted(unknown)}")

    def group_lr(self, group: str) -> float:
        if group in self.lr_overrides:
            return self.lr_overrides[group]
        return self.lr_noise if group == "noise" else self.lr

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class EpochLog:
    epoch: int
    train_elbo: float
    val_nll: float
    val_rmse: float
    wall_seconds: float


LOG_COLUMNS = ("epoch", "train_elbo", "val_nll", "val_rmse", "wall_seconds")


def write_epoch_log(rows: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.epoch, f"{r.train_elbo:.10g}", f"{r.val_nll:.10g}", f"{r.val_rmse:.10g}", f"{r.wall_seconds:.3f}"])


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[EpochLog]
    step_elbos: list[float]
    best_epoch: int
    skipped_steps: int

    @property
    def best_val_nll(self) -> float:
        return min((r.val_nll for r in self.log if math.isfinite(r.val_nll)), default=float("nan"))


def evaluate(bundle: ModelBundle, data: Dataset, n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """(NLL, RMSE) of the predictive mixture; RMSE is NaN for classification."""
    mix = predict(bundle, data.X, n_samples, rng)
    if bundle.task == "regression":
        return nll(mix, data.y), rmse(mix.mean(), data.y)
    return nll(mix, data.y), float("nan")


def train(
    bundle: ModelBundle,
    train_data: Dataset,
    val_data: Dataset | None,
    config: TrainConfig,
    callback: Callable[[int, ElboEstimate], None] | None = None,
) -> TrainResult:
    """Maximise the ELBO over mini-batches; return the best-validation snapshot.

    Without validation data the final parameters are returned. Non-finite
    losses or gradients skip the step; more than ``max_skip_fraction`` skipped
    steps (checked once 100 steps have run) aborts training.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    path_rng = np.random.default_rng(seeds[1])
    groups = bundle.trainable_groups()
    states = {
        g: AdamWState(lr=config.group_lr(g), weight_decay=config.weight_decay if g != "noise" else 0.0) for g in groups
    }
    n = len(train_data)
    batch = min(config.batch_size, n)
    start = time.perf_counter()
    rows: list[EpochLog] = []
    step_elbos: list[float] = []
    skipped = steps = 0
    best = (float("inf"), -1, bundle.state_dict())
    since_best = 0

    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(n)
        epoch_elbos = []
        for lo in range(0, n - batch + 1, batch):
            idx = perm[lo : lo + batch]
            steps += 1
            try:
                est = bundle.elbo(train_data.X[idx], train_data.y[idx], n, config.n_paths, path_rng, antithetic=config.antithetic)
                loss = est.value * (-1.0 / n)
                names = [(g, k) for g, ps in groups.items() for k in ps]
                grads = grad(loss, [groups[g][k] for g, k in names])
                per_group: dict[str, dict[str, np.ndarray]] = {g: {} for g in groups}
                for (g, k), gv in zip(names, grads):
                    if not np.all(np.isfinite(gv)):
                        raise NonFiniteGradientError(f"{g}/{k}")
                    per_group[g][k] = gv
                for g, ps in groups.items():
                    adamw_step(states[g], ps, per_group[g])
            except (NonFiniteElboError, NonFiniteScoreError, NonFiniteGradientError, FloatingPointError) as exc:
                skipped += 1
                log.warning("step %d skipped: %s", steps, exc)
                if steps >= 100 and skipped > config.max_skip_fraction * steps:
                    raise TrainingDiverged(f"{skipped} of {steps} steps skipped (last: {exc})") from exc
                continue
            value = est.value.item()
            step_elbos.append(value)
            epoch_elbos.append(value)
            if callback is not None:
                callback(steps, est)

        train_elbo = float(np.mean(epoch_elbos)) if epoch_elbos else float("nan")
        val_nll = val_rmse = float("nan")
        evaluate_now = val_data is not None and (epoch % config.eval_interval == 0 or epoch == config.epochs)
        if evaluate_now:
            eval_rng = np.random.default_rng([config.seed, 1_000_003])
            val_nll, val_rmse = evaluate(bundle, val_data, config.eval_paths, eval_rng)
        rows.append(EpochLog(epoch, train_elbo, val_nll, val_rmse, time.perf_counter() - start))
        if evaluate_now:
            if val_nll < best[0]:
                best = (val_nll, epoch, bundle.state_dict())
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best[1])
                    break

    if steps >= 100 and skipped > config.max_skip_fraction * steps:
        raise TrainingDiverged(f"{skipped} of {steps} steps skipped")
    if val_data is not None and best[1] > 0:
        bundle.load_state_dict(best[2])
        best_epoch = best[1]
    else:
        best_epoch = rows[-1].epoch
    return TrainResult(bundle, rows, step_elbos, best_epoch, skipped)


# -- MAP-then-Bayes baseline ------------------------------------------------------


@dataclass
class MapBaseline:
    features: FeatureNet
    head: ConjugateBLL

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            phi = self.features(np.asarray(x, dtype=np.float64)).data
        return self.head.predict(phi)

    def nll(self, data: Dataset) -> float:
        with no_grad():
            phi = self.features(data.X).data
        return self.head.test_nll(phi, data.y)

    def rmse(self, data: Dataset) -> float:
        return rmse(self.predict(data.X)[0], data.y)


def train_map(
    input_dim: int,
    train_data: Dataset,
    val_data: Dataset | None,
    config: TrainConfig,
    feature_dims: tuple[int, ...] = (50, 50),
) -> MapBaseline:
    """Train features plus a point-estimate linear head on Gaussian NLL, then fit a
    conjugate last layer (evidence-optimised hyperparameters) on the frozen features."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    features = FeatureNet(input_dim, feature_dims, rng)
    m = features.n_features
    head = Mlp(MlpConfig(m, (), 1), rng)
    lik = GaussianLikelihood(0.0)
    groups = {"features": features.params, "head": head.params, "noise": lik.params}
    states = {g: AdamWState(lr=config.lr_noise if g == "noise" else config.lr, weight_decay=config.weight_decay if g != "noise" else 0.0) for g in groups}
    n = len(train_data)
    batch = min(config.batch_size, n)
    best = (float("inf"), None)
    since_best = 0

    def val_score() -> float:
        with no_grad():
            pred = head(features(val_data.X)).data[:, 0]
        var = lik.var
        return float(np.mean(0.5 * (np.log(2 * np.pi * var) + (val_data.y - pred) ** 2 / var)))

    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n - batch + 1, batch):
            idx = perm[lo : lo + batch]
            pred = head(features(train_data.X[idx])).reshape(-1)
            resid = (pred - train_data.y[idx]).square()
            loss = (resid * (-lik.log_var).exp() + lik.log_var).mean() * 0.5
            names = [(g, k) for g, ps in groups.items() for k in ps]
            grads = grad(loss, [groups[g][k] for g, k in names])
            for g in groups:
                adamw_step(states[g], groups[g], {k: gv for (gg, k), gv in zip(names, grads) if gg == g})
        if val_data is not None:
            score = val_score()
            if score < best[0]:
                best = (score, {k: p.data.copy() for k, p in features.params.items()})
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if best[1] is not None:
        for k, p in features.params.items():
            p.data = best[1][k].copy()
    with no_grad():
        phi = features(train_data.X).data
    return MapBaseline(features, ConjugateBLL.fit(phi, train_data.y))
