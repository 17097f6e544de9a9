"""Dataset ingestion, normalisation, splitting and synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8
SPLIT_RATIOS = (0.72, 0.18, 0.10)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float | np.ndarray

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(), "y_mean": np.asarray(self.y_mean).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float), np.asarray(d["y_mean"], float))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...] = ()
    stats: NormalizationStats | None = None
    task: str = "regression"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y)
        y = y.astype(np.int64) if self.task == "classification" else y.astype(np.float64)
        if len(X) != len(y):
            raise DataError(f"X has {len(X)} rows but y has {len(y)}")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise DataError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{i}" for i in range(X.shape[1])))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.task == "classification" else 1

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])


def load_csv(path: str | Path, task: str = "regression") -> Dataset:
    """Read a headed CSV whose last column is the target."""
    path = Path(path)
    rows, names = [], None
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if names is None:
                if len(row) < 2:
                    raise DataError(f"{path}:{lineno}: header needs at least one feature and a target")
                names = [c.strip() for c in row]
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(names):
                raise DataError(f"{path}:{lineno}: expected {len(names)} columns, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{lineno}: non-finite value")
            rows.append(values)
    if names is None:
        raise DataError(f"{path}: empty file")
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    return Dataset(arr[:, :-1], arr[:, -1], tuple(names[:-1]), task=task, meta={"source": str(path), "target": names[-1]})


def write_csv(dataset: Dataset, path: str | Path, target_name: str = "y") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([*dataset.feature_names, dataset.meta.get("target", target_name)])
        for xi, yi in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi)) if dataset.task != "classification" else int(yi)])


def load_boston() -> Dataset:
    """The Boston housing table shipped with the package (506 rows, 13 features)."""
    with resources.as_file(resources.files("dvi_ibll") / "data" / "boston_housing.csv") as p:
        return load_csv(p)


def fit_stats(train: Dataset) -> NormalizationStats:
    x_mean = train.X.mean(axis=0)
    x_std = np.maximum(train.X.std(axis=0), STD_FLOOR)
    y_mean = 0.0 if train.task == "classification" else float(train.y.mean())
    return NormalizationStats(x_mean, x_std, y_mean)


def normalize(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    """Standardise inputs and centre (not scale) targets using training-split stats."""
    X = (dataset.X - stats.x_mean) / stats.x_std
    y = dataset.y if dataset.task == "classification" else dataset.y - stats.y_mean
    return replace(dataset, X=X, y=y, stats=stats)


def denormalize(dataset: Dataset) -> Dataset:
    stats = dataset.stats
    if stats is None:
        raise DataError("dataset is not normalised")
    X = dataset.X * stats.x_std + stats.x_mean
    y = dataset.y if dataset.task == "classification" else dataset.y + stats.y_mean
    return replace(dataset, X=X, y=y, stats=None)


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(SPLIT_RATIOS[1] * n + 1e-9))
    n_test = int(math.floor(SPLIT_RATIOS[2] * n + 1e-9))
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """0.72 / 0.18 / 0.10 train/val/test split; train absorbs rounding."""
    tr, va, te = split_indices(len(dataset), seed)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


def prepare_splits(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Split, then normalise all three parts with training-split stats."""
    train, val, test = split(dataset, seed)
    stats = fit_stats(train)
    return normalize(train, stats), normalize(val, stats), normalize(test, stats)


# -- synthetic data -------------------------------------------------------------

SYNTHETIC_KINDS = ("linear", "heteroscedastic", "two_moons", "heavy_tail")


def make_synthetic(
    kind: str, seed: int, n: int = 500, n_features: int = 5, noise: float = 0.5, df: float = 2.5
) -> Dataset:
    """Oracle fixtures.

    linear           y = X w + eps, w stored in ``meta["w"]``
    heteroscedastic  y = sin(x0) + x1 + eps with noise std growing in |x0|
    two_moons        interleaved half circles, labels 0/1, equal counts
    heavy_tail       y = X w + Student-t(df) noise scaled by ``noise``
    """
    rng = np.random.default_rng(seed)
    if kind == "linear":
        X = rng.standard_normal((n, n_features))
        w = rng.standard_normal(n_features)
        y = X @ w + noise * rng.standard_normal(n)
        return Dataset(X, y, meta={"kind": kind, "w": w, "noise": noise})
    if kind == "heteroscedastic":
        X = rng.uniform(-3, 3, size=(n, max(n_features, 2)))
        std = noise * (0.2 + np.abs(X[:, 0]))
        y = np.sin(X[:, 0]) + 0.5 * X[:, 1] + std * rng.standard_normal(n)
        return Dataset(X, y, meta={"kind": kind})
    if kind == "two_moons":
        return _two_moons(n, rng, noise=0.1 if noise == 0.5 else noise)
    if kind == "heavy_tail":
        X = rng.standard_normal((n, n_features))
        w = rng.standard_normal(n_features)
        y = X @ w + noise * rng.standard_t(df, size=n)
        return Dataset(X, y, meta={"kind": kind, "w": w, "df": df})
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")


def _two_moons(n: int, rng: np.random.Generator, noise: float) -> Dataset:
    n_a = n // 2
    n_b = n - n_a
    ta = rng.uniform(0, np.pi, n_a)
    tb = rng.uniform(0, np.pi, n_b)
    a = np.stack([np.cos(ta), np.sin(ta)], axis=1)
    b = np.stack([1.0 - np.cos(tb), 0.5 - np.sin(tb)], axis=1)
    X = np.concatenate([a, b]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n_a, int), np.ones(n_b, int)])
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], task="classification", meta={"kind": "two_moons"})


def make_ood_cluster(n: int, seed: int, center=(4.0, -3.0), spread: float = 0.3) -> np.ndarray:
    """Gaussian blob of inputs away from the two-moons support (raw coordinates)."""
    rng = np.random.default_rng(seed)
    return np.asarray(center, dtype=np.float64) + spread * rng.standard_normal((n, len(center)))
