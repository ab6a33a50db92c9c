"""Reverse-mode automatic differentiation over dense float64 arrays.

Tiny tape-free engine: every operation returns a `Var` that closes over its
parents and a backward function. Gradients are accumulated by walking the
graph in reverse topological order, which makes two things cheap that the
training code depends on:

* stopping the sweep at a chosen intermediate node (gradient truncation), and
* restarting a sweep from an intermediate node with an externally supplied
  adjoint (post-processing of a sanitized gradient).

All arrays are float64. Matmul is strictly 2-D; elementwise ops broadcast
with numpy semantics and reduce gradients back to the operand shapes.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

ArrayLike = Union[float, int, Sequence, np.ndarray]

__all__ = [
    "Var",
    "wrap",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "power",
    "tanh",
    "exp",
    "log",
    "clamp",
    "vsum",
    "vmean",
    "concat",
    "softmax",
    "backward",
    "grad_wrt",
    "backward_from",
]


def _f64(x: ArrayLike) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Var:
    """Graph node holding a float64 array and, after a sweep, its adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from absorbing Vars into object arrays; defer to our operators
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = _f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def wrap(x) -> Var:
    """Lift a constant to a non-differentiable leaf; pass Vars through."""
    return x if isinstance(x, Var) else Var(x)


def _accum(node: Var, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce a broadcast gradient back to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Var(a.data + b.data, _parents=(a, b), _backward=bw)


def sub(a, b) -> Var:
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Var(a.data - b.data, _parents=(a, b), _backward=bw)


def mul(a, b) -> Var:
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Var(a.data * b.data, _parents=(a, b), _backward=bw)


def div(a, b) -> Var:
    a, b = wrap(a), wrap(b)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Var(a.data / b.data, _parents=(a, b), _backward=bw)


def matmul(a, b) -> Var:
    a, b = wrap(a), wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Var(a.data @ b.data, _parents=(a, b), _backward=bw)


def power(a, p: float) -> Var:
    a = wrap(a)
    p = float(p)
    out = a.data ** p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return Var(out, _parents=(a,), _backward=bw)


def tanh(a) -> Var:
    a = wrap(a)
    t = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - t * t))

    return Var(t, _parents=(a,), _backward=bw)


def exp(a) -> Var:
    a = wrap(a)
    e = np.exp(a.data)

    def bw(g):
        _accum(a, g * e)

    return Var(e, _parents=(a,), _backward=bw)


def log(a) -> Var:
    a = wrap(a)

    def bw(g):
        _accum(a, g / a.data)

    return Var(np.log(a.data), _parents=(a,), _backward=bw)


def clamp(a, lo: float, hi: float) -> Var:
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    a = wrap(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * mask)

    return Var(np.clip(a.data, lo, hi), _parents=(a,), _backward=bw)


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return Var(out, _parents=(a,), _backward=bw)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return div(vsum(a, axis=axis, keepdims=keepdims), float(n))


def concat(vs: Iterable, axis: int = -1) -> Var:
    vs = [wrap(v) for v in vs]
    sizes = [v.data.shape[axis] for v in vs]
    out = np.concatenate([v.data for v in vs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for v, piece in zip(vs, np.split(g, splits, axis=axis)):
            _accum(v, piece)

    return Var(out, _parents=tuple(vs), _backward=bw)


def softmax(a, axis: int = -1) -> Var:
    a = wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Var(y, _parents=(a,), _backward=bw)


def _toposort(root: Var) -> list[Var]:
    """Post-order over the grad-requiring subgraph reachable from root."""
    order: list[Var] = []
    seen = {id(root)}
    stack: list[tuple[Var, Iterable[Var]]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _sweep(order: list[Var], root: Var, seed: np.ndarray, stop_at: Var | None) -> None:
    for v in order:
        v.grad = None
    root.grad = np.array(seed, dtype=np.float64)
    for v in reversed(order):
        if v.grad is None or v._backward is None:
            continue
        if stop_at is not None and v is stop_at:
            continue
        v._backward(v.grad)


def backward(root: Var, seed: ArrayLike | None = None) -> None:
    """Accumulate adjoints on every grad-requiring node reachable from root."""
    if not root.requires_grad:
        raise ValueError("backward() on a node with no differentiable inputs")
    order = _toposort(root)
    s = np.ones_like(root.data) if seed is None else _f64(seed)
    if s.shape != root.data.shape:
        raise ValueError(f"seed shape {s.shape} != output shape {root.data.shape}")
    _sweep(order, root, s, stop_at=None)


def grad_wrt(root: Var, node: Var, seed: ArrayLike | None = None) -> np.ndarray:
    """Adjoint of `node` for the sweep from `root`, truncated at `node`.

    Propagation stops at `node`: paths from root through it do not continue to
    its ancestors. Paths that bypass it are unaffected. Raises if `node` is not
    on the recorded computation path from grad-requiring leaves to `root`.
    """
    if not root.requires_grad:
        raise ValueError("grad_wrt() on a node with no differentiable inputs")
    order = _toposort(root)
    if not any(v is node for v in order):
        raise ValueError("node is not on the computation path of this output")
    s = np.ones_like(root.data) if seed is None else _f64(seed)
    if s.shape != root.data.shape:
        raise ValueError(f"seed shape {s.shape} != output shape {root.data.shape}")
    _sweep(order, root, s, stop_at=node)
    if node.grad is None:
        return np.zeros_like(node.data)
    return np.array(node.grad)


def backward_from(node: Var, adjoint: ArrayLike) -> None:
    """Restart a sweep at `node` with an externally supplied adjoint."""
    a = _f64(adjoint)
    if a.shape != node.data.shape:
        raise ValueError(f"adjoint shape {a.shape} != node shape {node.data.shape}")
    if not node.requires_grad:
        raise ValueError("backward_from() on a node with no differentiable inputs")
    order = _toposort(node)
    _sweep(order, node, a, stop_at=None)
