"""Parameter containers, MLP forward pass, per-example gradients, SGD.

Networks are plain fully connected stacks (linear layers with tanh between
them, linear output). Parameters live in a `ParamSet`, a named, ordered
collection of float64 arrays with a flatten/unflatten bijection so that
gradient vectors, clipping, and optimizer steps all operate on one flat
vector of length s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = [
    "MLPArch",
    "ParamSet",
    "PerExampleGrads",
    "OptState",
    "xavier_init",
    "bind_params",
    "flatten_grads",
    "mlp_graph",
    "forward_mlp",
    "per_example_gradients",
    "grad_wrt_intermediate",
    "backprop_through",
    "cosine_lr",
    "sgd_step",
]

_ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "tanh": ad.tanh,
    "identity": lambda v: v,
}


@dataclass(frozen=True)
class MLPArch:
    """Shape of a fully connected network: in_dim -> hidden... -> out_dim."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        dims = (self.in_dim, *self.hidden, self.out_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer dimensions must be positive, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.in_dim, *self.hidden, self.out_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": list(self.hidden),
                "out_dim": self.out_dim, "activation": self.activation}

    @staticmethod
    def from_dict(d: dict) -> "MLPArch":
        return MLPArch(int(d["in_dim"]), tuple(int(h) for h in d["hidden"]),
                       int(d["out_dim"]), str(d.get("activation", "tanh")))


class ParamSet:
    """Ordered, named float64 parameter tensors with a flat-vector view."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        if not tensors:
            raise ValueError("ParamSet needs at least one tensor")
        self._tensors: dict[str, np.ndarray] = {}
        for name, t in tensors.items():
            arr = np.asarray(t, dtype=np.float64)
            if name in self._tensors:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._tensors[name] = arr
        self.size = int(sum(t.size for t in self._tensors.values()))
        if self.size <= 0:
            raise ValueError("ParamSet has zero scalar parameters")

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._tensors.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self._tensors.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """Rebuild a ParamSet with this one's names/shapes from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {vec.shape}")
        out, off = {}, 0
        for name, t in self._tensors.items():
            out[name] = vec[off:off + t.size].reshape(t.shape).copy()
            off += t.size
        return ParamSet(out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (self.names == other.names
                and all(np.array_equal(self[k], other[k]) for k in self.names))

    def __repr__(self):
        return f"ParamSet({self.names}, s={self.size})"


@dataclass
class PerExampleGrads:
    """Per-example gradient rows, batch order preserved: shape (B, s)."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("per-example gradients must be a 2-D matrix")

    @property
    def batch_size(self) -> int:
        return self.matrix.shape[0]

    def sum_rows(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def xavier_init(layer_dims: list[tuple[int, int]], seed: int) -> ParamSet:
    """Uniform Xavier weights in +-sqrt(6/(fan_in+fan_out)); zero biases.

    Deterministic for a given seed; parameter names are w0, b0, w1, b1, ...
    """
    if not layer_dims:
        raise ValueError("need at least one layer")
    for fan_in, fan_out in layer_dims:
        if fan_in <= 0 or fan_out <= 0:
            raise ValueError(f"non-positive layer dimension in {(fan_in, fan_out)}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(layer_dims):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(tensors)


def bind_params(params: ParamSet) -> dict[str, Var]:
    """Wrap every tensor as a grad-requiring leaf for one graph build."""
    return {name: Var(t, requires_grad=True) for name, t in params.items()}


def flatten_grads(pvars: Mapping[str, Var]) -> np.ndarray:
    """Flat gradient vector in parameter order; zeros where no grad flowed."""
    parts = []
    for v in pvars.values():
        g = v.grad if v.grad is not None else np.zeros_like(v.data)
        parts.append(np.asarray(g).ravel())
    return np.concatenate(parts)


def mlp_graph(pvars: Mapping[str, Var], x: Var, arch: MLPArch) -> Var:
    """Differentiable forward pass; x has shape (n, in_dim)."""
    act = _ACTIVATIONS[arch.activation]
    n_layers = len(arch.layer_dims())
    h = x
    for i in range(n_layers):
        h = ad.matmul(h, pvars[f"w{i}"]) + pvars[f"b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return h


def forward_mlp(params: ParamSet, x: np.ndarray, arch: MLPArch) -> np.ndarray:
    """Pure forward pass. Accepts (in_dim,) or (n, in_dim); rank is preserved."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.in_dim:
        raise ValueError(f"input shape {x.shape} does not match arch in_dim={arch.in_dim}")
    out = mlp_graph({k: Var(v) for k, v in params.items()}, Var(x), arch).data
    return out[0] if squeeze else out


def per_example_gradients(params: ParamSet,
                          loss_fn: Callable[[Mapping[str, Var], Var], Var],
                          batch: np.ndarray) -> PerExampleGrads:
    """Gradient of each example's loss term w.r.t. the flat parameter vector.

    loss_fn maps (bound parameter Vars, one example Var) to a scalar Var.
    Backprop is replayed once per example; row i is exactly the gradient of
    loss_fn at example i, so the mean of rows equals the mean-loss gradient.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[:, None]
    rows = np.empty((batch.shape[0], params.size))
    for i in range(batch.shape[0]):
        pvars = bind_params(params)
        loss = loss_fn(pvars, Var(batch[i]))
        if not isinstance(loss, Var) or loss.data.size != 1:
            raise ValueError("per-example loss must evaluate to a scalar")
        ad.backward(loss)
        rows[i] = flatten_grads(pvars)
    return PerExampleGrads(rows)


def grad_wrt_intermediate(loss: Var, intermediate: Var) -> np.ndarray:
    """Adjoint of an on-path intermediate, with propagation truncated there."""
    return ad.grad_wrt(loss, intermediate)


def backprop_through(intermediate_grad: np.ndarray, intermediate: Var,
                     pvars: Mapping[str, Var]) -> np.ndarray:
    """Push a (possibly modified) adjoint from an intermediate to the params.

    Composing grad_wrt_intermediate with backprop_through, unmodified, equals
    the direct gradient whenever every parameter path runs through the
    intermediate.
    """
    ad.backward_from(intermediate, intermediate_grad)
    return flatten_grads(pvars)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from base_lr at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    k = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * k / total_steps))


@dataclass
class OptState:
    """SGD bookkeeping: step counter plus the cosine-annealed learning rate."""

    base_lr: float
    total_steps: int
    step: int = 0

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.step, self.total_steps)

    def advanced(self) -> "OptState":
        return replace(self, step=self.step + 1)


def sgd_step(params: ParamSet, grad: np.ndarray, state: OptState) -> tuple[ParamSet, OptState]:
    """One descent step with the current annealed rate; returns new copies."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.size,):
        raise ValueError(f"gradient length {grad.shape} != parameter count {params.size}")
    new_flat = params.flatten() - state.lr * grad
    return params.unflatten(new_flat), state.advanced()
