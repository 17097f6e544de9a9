"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the kernels needed by small MLPs, the diffusion sampler and the ELBO are
provided. Broadcasting follows numpy; gradients are reduced back to operand
shapes on the way down.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

LEAKY_SLOPE = 0.01

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        return Tensor._make(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return Tensor._make(a @ b, (self, other), backward)

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(self.data[idx], (self,), backward)

    # -- reductions and shape ops ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    # -- elementwise functions -------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def leaky_relu(self, slope: float = LEAKY_SLOPE) -> "Tensor":
        a = self.data
        scale = np.where(a > 0, 1.0, slope)
        return Tensor._make(a * scale, (self,), lambda g: (g * scale,))

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * g * a,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = x.data
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(a - m), axis=axis, keepdims=True)
    out = np.log(s) + m

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a - out),)

    return Tensor._make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


class Tape:
    """Reverse-topological record of the operations that produced ``output``.

    Only nodes that require gradients are recorded; each is visited exactly
    once by :meth:`backward`.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        if not output.requires_grad:
            return
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes.reverse()

    def backward(self, seed: np.ndarray | float = 1.0) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {}
        if not self.nodes:
            return grads
        grads[id(self.output)] = np.broadcast_to(np.asarray(seed, dtype=np.float64), self.output.shape).copy()
        for node in self.nodes:
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads = Tape(loss).backward()
    return [grads.get(id(p), np.zeros(p.shape)).reshape(p.shape) for p in params]


# -- MLPs -----------------------------------------------------------------------

_ACTIVATIONS = {
    "leaky_relu": lambda t: t.leaky_relu(),
    "tanh": lambda t: t.tanh(),
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 1
    activation: str = "leaky_relu"
    activate_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "activate_output": self.activate_output,
        }


def init_mlp_params(cfg: MlpConfig, rng: np.random.Generator, zero_last: bool = False) -> dict[str, Tensor]:
    """He-style initialisation; ``zero_last`` makes the network output exactly zero."""
    params = {}
    n_layers = len(cfg.layer_dims)
    for i, (fan_in, fan_out) in enumerate(cfg.layer_dims):
        last = i == n_layers - 1
        scale = np.sqrt((1.0 if last and not cfg.activate_output else 2.0) / fan_in)
        w = rng.normal(0.0, scale, size=(fan_in, fan_out))
        if last and zero_last:
            w = np.zeros_like(w)
        params[f"{i}.weight"] = parameter(w, name=f"{i}.weight")
        params[f"{i}.bias"] = parameter(np.zeros(fan_out), name=f"{i}.bias")
    return params


def mlp_forward(cfg: MlpConfig, params: Mapping[str, Tensor], x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"MLP expects last dimension {cfg.input_dim}, got input of shape {x.shape}")
    act = _ACTIVATIONS[cfg.activation]
    n_layers = len(cfg.layer_dims)
    h = x
    for i in range(n_layers):
        h = h @ params[f"{i}.weight"] + params[f"{i}.bias"]
        if i < n_layers - 1 or cfg.activate_output:
            h = act(h)
    return h


class Mlp:
    """A multilayer perceptron owning its named parameters."""

    def __init__(
        self,
        cfg: MlpConfig,
        rng: np.random.Generator | None = None,
        params: Mapping[str, Tensor] | None = None,
        zero_last: bool = False,
    ):
        self.cfg = cfg
        if params is None:
            params = init_mlp_params(cfg, rng if rng is not None else np.random.default_rng(0), zero_last)
        self.params = dict(params)

    def __call__(self, x) -> Tensor:
        return mlp_forward(self.cfg, self.params, x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {value.shape} vs {p.shape}")
            p.data = value.copy()


# -- AdamW ----------------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    state: AdamWState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]
) -> AdamWState:
    """Decoupled-weight-decay Adam update, applied to ``params`` in place.

    The whole step is rejected before touching anything if a gradient is
    non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data * (1.0 - state.lr * state.weight_decay) - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"DVIBLL\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    """Write ``magic | u32 version | u32 header length | JSON header | <f8 values``.

    The header lists every array's name and shape in storage order; values are
    the arrays flattened in C order, concatenated.
    """
    entries, blobs = [], []
    for name, arr in arrays.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "arrays": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", raw, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset += 8
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = values.reshape(shape).copy()
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["meta"]
