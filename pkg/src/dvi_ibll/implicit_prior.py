"""Implicit last-layer weight prior: beta = G(omega), omega ~ N(0, I)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Mlp, MlpConfig, Tensor, as_tensor, parameter

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class AuxiliaryPrior:
    dim: int
    family: str = "standard_normal"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"auxiliary dimension must be >= 1, got {self.dim}")
        if self.family != "standard_normal":
            raise ValueError(f"unsupported auxiliary prior family {self.family!r}")


def sample_omega_prior(prior: AuxiliaryPrior, n: int, rng: np.random.Generator, antithetic: bool = False) -> np.ndarray:
    """Draw ``n`` i.i.d. auxiliary vectors, shape (n, K).

    With ``antithetic`` the second half mirrors the first (odd ``n`` gets one
    zero vector), so the sample mean is exactly zero.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    if not antithetic:
        return rng.standard_normal((n, prior.dim))
    half = rng.standard_normal((n // 2, prior.dim))
    parts = [half, -half]
    if n % 2:
        parts.append(np.zeros((1, prior.dim)))
    return np.concatenate(parts, axis=0)


def log_prior_density(prior: AuxiliaryPrior, omega):
    """log N(omega | 0, I) over the last axis; differentiable for tensors."""
    if isinstance(omega, Tensor):
        if omega.shape[-1] != prior.dim:
            raise ValueError(f"omega has dimension {omega.shape[-1]}, prior expects {prior.dim}")
        return omega.square().sum(axis=-1) * -0.5 - 0.5 * prior.dim * LOG_2PI
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape[-1] != prior.dim:
        raise ValueError(f"omega has dimension {omega.shape[-1]}, prior expects {prior.dim}")
    return -0.5 * prior.dim * LOG_2PI - 0.5 * np.sum(omega * omega, axis=-1)


class GeneratorNet:
    """Maps auxiliary vectors in R^K to last-layer weight matrices in R^{M x C}."""

    def __init__(
        self,
        aux_dim: int,
        n_features: int,
        n_outputs: int = 1,
        hidden_dims: tuple[int, ...] = (64,),
        rng: np.random.Generator | None = None,
        mlp: Mlp | None = None,
    ):
        self.aux_dim = aux_dim
        self.n_features = n_features
        self.n_outputs = n_outputs
        if mlp is None:
            cfg = MlpConfig(aux_dim, tuple(hidden_dims), n_features * n_outputs)
            mlp = Mlp(cfg, rng if rng is not None else np.random.default_rng(0))
        if mlp.cfg.input_dim != aux_dim or mlp.cfg.output_dim != n_features * n_outputs:
            raise ValueError("generator MLP dims do not match K -> M*C")
        self.mlp = mlp

    @classmethod
    def affine(cls, a: np.ndarray, b: np.ndarray | None = None, n_outputs: int = 1) -> "GeneratorNet":
        """Linear generator beta = A omega + b (A has shape (M*C, K))."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        out_dim, aux_dim = a.shape
        b = np.zeros(out_dim) if b is None else np.asarray(b, dtype=np.float64)
        cfg = MlpConfig(aux_dim, (), out_dim)
        mlp = Mlp(cfg, params={"0.weight": parameter(a.T.copy(), "0.weight"), "0.bias": parameter(b.copy(), "0.bias")})
        return cls(aux_dim, out_dim // n_outputs, n_outputs, mlp=mlp)

    @classmethod
    def identity(cls, dim: int) -> "GeneratorNet":
        return cls.affine(np.eye(dim))

    @property
    def params(self) -> dict[str, Tensor]:
        return self.mlp.params

    def __call__(self, omega) -> Tensor:
        return generate_weights(self, omega)


def generate_weights(gen: GeneratorNet, omega) -> Tensor:
    """beta = G(omega) reshaped to (..., M, C)."""
    omega = as_tensor(omega)
    if omega.shape[-1] != gen.aux_dim:
        raise ValueError(f"omega has dimension {omega.shape[-1]}, generator expects {gen.aux_dim}")
    flat = gen.mlp(omega)
    return flat.reshape(*omega.shape[:-1], gen.n_features, gen.n_outputs)
