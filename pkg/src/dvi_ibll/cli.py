"""Command-line entry point: train, eval, oracle-check, benchmark, sample.

Errors are reported as a single JSON line on stderr and mapped to exit codes:
0 success, 2 config, 3 data, 4 numerical failure, 5 failed invariant.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from threadpoolctl import threadpool_limits

from . import oracles
from .conjugate import NotPositiveDefiniteError
from .data import DataError, Dataset, NormalizationStats, load_boston, load_csv, make_synthetic, normalize, prepare_splits
from .diffusion import DiffusionSchedule, NonFiniteElboError, NonFiniteScoreError
from .metrics import accuracy, ece, metric_record, nll, predict, rmse
from .trainer import ModelBundle, TrainConfig, TrainingDiverged, train, train_map, write_epoch_log

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 2, 3, 4, 5
THREADS_ENV = "DVI_IBLL_THREADS"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


# -- config schema ----------------------------------------------------------------


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpec(Strict):
    kind: Literal["linear", "heteroscedastic", "two_moons", "heavy_tail"]
    seed: int = 0
    n: int = Field(500, ge=10)
    n_features: int = Field(5, ge=1)
    noise: float = Field(0.5, ge=0)


class DataSpec(Strict):
    csv: Optional[str] = None
    builtin: Optional[Literal["boston"]] = None
    synthetic: Optional[SyntheticSpec] = None
    task: Literal["regression", "classification"] = "regression"

    @model_validator(mode="after")
    def one_source(self):
        given = [s for s in (self.csv, self.builtin, self.synthetic) if s is not None]
        if len(given) != 1:
            raise ValueError("data needs exactly one of csv, builtin, synthetic")
        return self


class ModelSpec(Strict):
    feature_dims: list[int] = [50, 50]
    aux_dim: Optional[int] = Field(None, ge=1)
    generator_hidden: Optional[list[int]] = [64]
    score_hidden: list[int] = [64, 64]
    score_affine_skip: bool = True
    log_noise_var: Optional[float] = None


class ScheduleSpec(Strict):
    lam: float = 1.0
    g: float = Field(math.sqrt(2.0), ge=0)
    sigma0_sq: float = Field(1.0, gt=0)
    T: float = Field(1.0, gt=0)
    n_steps: int = Field(100, ge=1)

    def build(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.lam, self.g, self.sigma0_sq, self.T, self.n_steps)


class TrainSpec(Strict):
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_noise: float = Field(1e-2, gt=0)
    lr_overrides: dict[str, float] = {}
    weight_decay: float = Field(1e-4, ge=0)
    n_paths: int = Field(16, ge=1)
    antithetic: bool = True
    eval_paths: int = Field(256, ge=1)
    patience: int = Field(20, ge=1)
    eval_interval: int = Field(1, ge=1)
    max_skip_fraction: float = Field(0.01, ge=0, le=1)

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class OracleSpec(Strict):
    n: int = Field(200, ge=10)
    input_dim: int = Field(5, ge=1)
    n_features: int = Field(16, ge=1)
    feature_scale: float = Field(0.15, gt=0)
    T: float = Field(2.0, gt=0)
    n_steps: int = Field(100, ge=1)
    train_steps: int = Field(2000, ge=0)
    lr: float = Field(3e-3, gt=0)
    score_hidden: list[int] = [128, 128]
    n_paths: int = Field(16, ge=2)
    eval_paths: int = Field(4096, ge=16)
    check_every: int = Field(50, ge=1)
    check_paths: int = Field(512, ge=2)
    seed: int = 0


class RunConfig(Strict):
    data: DataSpec = DataSpec(builtin="boston")
    model: ModelSpec = ModelSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    train: TrainSpec = TrainSpec()
    oracle: OracleSpec = OracleSpec()
    out_dir: str = "runs"
    seeds: list[int] = [0]
    eval_samples: int = Field(256, ge=1)
    baseline: bool = True


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_CONFIG, "config", f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(x) for x in first["loc"])
        raise CliError(EXIT_CONFIG, "config", f"{p}: {where}: {first['msg']}") from None


# -- shared helpers ----------------------------------------------------------------


def load_dataset(spec: DataSpec) -> Dataset:
    if spec.csv is not None:
        if not Path(spec.csv).is_file():
            raise CliError(EXIT_DATA, "data", f"data file not found: {spec.csv}")
        return load_csv(spec.csv, task=spec.task)
    if spec.builtin == "boston":
        return load_boston()
    s = spec.synthetic
    return make_synthetic(s.kind, s.seed, n=s.n, n_features=s.n_features, noise=s.noise)


def build_bundle(cfg: RunConfig, data: Dataset, train_data: Dataset, seed: int) -> ModelBundle:
    task = data.task
    n_out = data.n_classes if task == "classification" else 1
    log_noise = cfg.model.log_noise_var
    if log_noise is None:
        log_noise = initial_log_noise_var(train_data)
    return ModelBundle.build(
        data.n_features,
        feature_dims=tuple(cfg.model.feature_dims),
        aux_dim=cfg.model.aux_dim,
        n_outputs=n_out,
        task=task,
        schedule=cfg.schedule.build(),
        generator_hidden=None if cfg.model.generator_hidden is None else tuple(cfg.model.generator_hidden),
        score_hidden=tuple(cfg.model.score_hidden),
        log_noise_var=log_noise,
        seed=seed,
        score_affine_skip=cfg.model.score_affine_skip,
    )


def initial_log_noise_var(train_data: Dataset) -> float:
    """Start the noise variance at the training-target variance (0 for classification)."""
    if train_data.task == "classification":
        return 0.0
    return float(np.log(max(np.var(train_data.y), 1e-6)))


def test_metrics(bundle: ModelBundle, test: Dataset, n_samples: int, seed: int) -> dict[str, float]:
    mix = predict(bundle, test.X, n_samples, np.random.default_rng([seed, 7]))
    out = {"nll": nll(mix, test.y)}
    if bundle.task == "regression":
        out["rmse"] = rmse(mix.mean(), test.y)
    else:
        probs = mix.mean()
        out["accuracy"] = accuracy(probs, test.y)
        out["ece"] = ece(probs, test.y)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def parse_seeds(text: str | None, default: list[int]) -> list[int]:
    if text is None:
        return default
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, "config", f"--seeds must be comma-separated integers, got {text!r}") from None


def run_seed(cfg: RunConfig, data: Dataset, seed: int, out: Path) -> dict[str, float]:
    train_d, val_d, test_d = prepare_splits(data, seed)
    bundle = build_bundle(cfg, data, train_d, seed)
    result = train(bundle, train_d, val_d, cfg.train.build(seed))
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": seed, "stats": train_d.stats.to_dict(), "task": data.task, "best_epoch": result.best_epoch}
    result.bundle.save(out / "model.bin", meta)
    write_epoch_log(result.log, out / "epoch_log.csv")
    metrics = test_metrics(result.bundle, test_d, cfg.eval_samples, seed)
    if cfg.baseline and data.task == "regression":
        base = train_map(data.n_features, train_d, val_d, cfg.train.build(seed), tuple(cfg.model.feature_dims))
        metrics["baseline_nll"] = base.nll(test_d)
        metrics["baseline_rmse"] = base.rmse(test_d)
    write_json(out / "metrics.json", [metric_record(k, v) for k, v in metrics.items()])
    return metrics


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    data = load_dataset(cfg.data)
    for seed in parse_seeds(args.seeds, cfg.seeds):
        metrics = run_seed(cfg, data, seed, out / f"seed_{seed}")
        print(json.dumps({"seed": seed, **{k: round(v, 6) for k, v in metrics.items()}}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "config", "eval needs --checkpoint")
    bundle, meta = load_bundle(args.checkpoint)
    cfg = load_config(args.config)
    data = load_dataset(cfg.data)
    seed = int(meta.get("seed", 0))
    if args.data:
        # an explicit file is scored in full with the checkpoint's training stats
        if not Path(args.data).is_file():
            raise CliError(EXIT_DATA, "data", f"data file not found: {args.data}")
        raw = load_csv(args.data, task=meta.get("task", "regression"))
        check_width(raw, bundle)
        test_d = normalize(raw, NormalizationStats.from_dict(meta["stats"]))
    else:
        _, _, test_d = prepare_splits(data, seed)
        check_width(test_d, bundle)
    metrics = test_metrics(bundle, test_d, cfg.eval_samples, seed)
    records = [metric_record(k, v) for k, v in metrics.items()]
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "eval_metrics.json", records)
    print(json.dumps(records))
    return EXIT_OK


def check_width(data: Dataset, bundle: ModelBundle) -> None:
    if data.n_features != bundle.features.input_dim:
        raise CliError(EXIT_DATA, "data", f"dataset has {data.n_features} features, model expects {bundle.features.input_dim}")


def load_bundle(path: str) -> tuple[ModelBundle, dict]:
    if not Path(path).is_file():
        raise CliError(EXIT_CONFIG, "config", f"checkpoint not found: {path}")
    try:
        return ModelBundle.load(path)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, "data", f"{path}: unreadable checkpoint ({exc})") from None


def cmd_oracle_check(args) -> int:
    cfg = load_config(args.config)
    results = oracles.run_all(cfg.oracle)
    for r in results:
        print(r.line())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "oracle_check.json", [r.as_dict() for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    data = load_dataset(cfg.data)
    name = dataset_name(cfg.data)
    per_seed: dict[str, list[float]] = {}
    for seed in parse_seeds(args.seeds, cfg.seeds):
        metrics = run_seed(cfg, data, seed, out / f"seed_{seed}")
        for k, v in metrics.items():
            per_seed.setdefault(k, []).append(v)
    summary = {k: metric_record(k, v) for k, v in per_seed.items()}
    table = benchmark_table(name, summary)
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.txt").write_text(table + "\n", encoding="utf-8")
    write_json(out / "benchmark.json", {"dataset": name, "per_seed": per_seed, "summary": list(summary.values())})
    print(table)
    return EXIT_OK


def dataset_name(spec: DataSpec) -> str:
    if spec.csv:
        return Path(spec.csv).stem
    return spec.builtin or spec.synthetic.kind


def benchmark_table(name: str, summary: dict[str, dict]) -> str:
    """Rows per method, NLL and RMSE as mean +- stderr over seeds."""

    def cell(key: str) -> str:
        rec = summary.get(key)
        return "-" if rec is None else f"{rec['value']:.2f} ± {rec['mc_stderr']:.2f}"

    rows = [("DVI-IBLL", "nll", "rmse")]
    if "baseline_nll" in summary:
        rows.append(("MAP + conjugate BLL", "baseline_nll", "baseline_rmse"))
    n = next(iter(summary.values()))["n_seeds"] if summary else 0
    lines = [f"dataset: {name} ({n} seeds)", f"{'method':<22} {'NLL':>15} {'RMSE':>15}"]
    for label, a, b in rows:
        lines.append(f"{label:<22} {cell(a):>15} {cell(b):>15}")
    return "\n".join(lines)


def cmd_sample(args) -> int:
    if not args.checkpoint:
        raise CliError(EXIT_CONFIG, "config", "sample needs --checkpoint")
    if args.n < 1:
        raise CliError(EXIT_CONFIG, "config", f"--n must be >= 1, got {args.n}")
    bundle, meta = load_bundle(args.checkpoint)
    beta = bundle.sample_weights(args.n, np.random.default_rng([int(meta.get("seed", 0)), 11]))
    path = Path(args.out) if args.out else Path(args.checkpoint).with_name("weights.csv")
    if path.suffix != ".csv":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "weights.csv"
    _, m, c = beta.shape
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([f"beta_{i}_{j}" for i in range(m) for j in range(c)])
        for row in beta.reshape(len(beta), -1):
            w.writerow([repr(float(v)) for v in row])
    print(json.dumps({"samples": args.n, "path": str(path)}))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "oracle-check": cmd_oracle_check,
    "benchmark": cmd_benchmark,
    "sample": cmd_sample,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvi-ibll", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    parser.add_argument("--checkpoint", help="model checkpoint for eval/sample")
    parser.add_argument("--out", help="output directory (file for sample)")
    parser.add_argument("--seeds", help="comma-separated seeds, overriding the config")
    parser.add_argument("--data", help="CSV to score with eval instead of the test split")
    parser.add_argument("--n", type=int, default=1000, help="number of weight samples for sample")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = int(threads) if threads else None
    except ValueError:
        return report(CliError(EXIT_CONFIG, "config", f"{THREADS_ENV} must be an integer, got {threads!r}"))
    try:
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](args)
    except CliError as exc:
        return report(exc)
    except DataError as exc:
        return report(CliError(EXIT_DATA, "data", str(exc)))
    except (TrainingDiverged, NotPositiveDefiniteError, NonFiniteElboError, NonFiniteScoreError, FloatingPointError) as exc:
        return report(CliError(EXIT_NUMERICAL, "numerical", str(exc)))


def report(exc: CliError) -> int:
    print(json.dumps({"error": exc.kind, "exit_code": exc.code, "message": str(exc)}), file=sys.stderr)
    return exc.code


if __name__ == "__main__":
    sys.exit(main())
