"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A :class:`Node`
wraps a tensor and records how it was produced so that :func:`backward` can
propagate gradients. Graphs live only as long as the Python objects that
reference them; there is no global tape.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericInputError, ShapeError

Tensor = np.ndarray

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    accumulates across :func:`backward` calls until :meth:`zero_grad`.
    """

    __slots__ = ("value", "_grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward: Callable | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = as_tensor(value)
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad
        self.name = name
        self._grad = None

    @classmethod
    def param(cls, value, name: str | None = None) -> "Node":
        return cls(value, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = None if g is None else as_tensor(g)

    def zero_grad(self) -> None:
        self._grad = None

    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_rows(self, idx)


def constant(x) -> Node:
    return Node(x)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, parents, op, backward) -> Node:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    return Node(value, parents, op, backward, requires_grad=True)


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"{op}: input contains non-finite values")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), "add", back)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), "sub", back)


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = av * bv

    def back(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(out, (a, b), "mul", back)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def back(g):
        return (g * c,)

    return _make(a.value * c, (a,), "scale", back)


def gelu(x: Node) -> Node:
    """Tanh-approximation GELU."""
    v = x.value
    v2 = v * v
    t = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (x,), "gelu", back)


def square(x: Node) -> Node:
    v = x.value

    def back(g):
        return (2.0 * v * g,)

    return _make(v * v, (x,), "square", back)


# ---------------------------------------------------------------- reductions

def sum_all(x: Node) -> Node:
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.value.sum()), (x,), "sum", back)


def mean_all(x: Node) -> Node:
    return scale(sum_all(x), 1.0 / x.value.size)


def sum_axis(x: Node, axis: int, keepdims: bool = False) -> Node:
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), "sum_axis", back)


# ---------------------------------------------------------------- shape ops

def reshape(x: Node, shape) -> Node:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _make(x.value.reshape(shape), (x,), "reshape", back)


def transpose(x: Node, axes=None) -> Node:
    if axes is None:
        axes = tuple(reversed(range(x.value.ndim)))
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(x.value.transpose(axes)), (x,), "transpose", back)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [_wrap(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, nodes, "concat", back)


def take_rows(x: Node, idx) -> Node:
    """Gather along the first axis; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    out = x.value[idx]

    def back(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), "take_rows", back)


def embedding(table: Node, ids) -> Node:
    return take_rows(table, ids)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {list(av.shape)} by {list(bv.shape)}")
    flat = bv.ndim == 2 and av.ndim > 2
    if flat:
        # one GEMM over all leading dims instead of a loop of small ones
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = np.matmul(av, bv)

    def back(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bv.T).reshape(av.shape)
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", back)


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalisers

def softmax(x: Node, axis: int = -1) -> Node:
    v = x.value
    _check_finite(v, "softmax")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), "softmax", back)


def _log_softmax(v: Tensor) -> Tensor:
    z = v - v.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-12) -> Node:
    v = x.value
    d = v.shape[-1]
    if d == 1 and eps == 0:
        raise NumericInputError("layer_norm: d == 1 with eps == 0 has degenerate variance")
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    xhat = xc * inv
    gv, bv = gain.value, bias.value
    out = xhat * gv + bv

    def back(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), "layer_norm", back)


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Node, targets) -> Node:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    v = logits.value
    targets = np.asarray(targets, dtype=np.int64)
    if v.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [p, V], got {list(v.shape)}")
    p, n_cls = v.shape
    if p == 0 or targets.size == 0:
        raise ValueError("cross_entropy: no positions to score")
    if targets.shape != (p,):
        raise ShapeError(f"cross_entropy: targets {list(targets.shape)} vs logits {list(v.shape)}")
    if targets.min() < 0 or targets.max() >= n_cls:
        raise IndexError(f"cross_entropy: target out of range [0, {n_cls})")
    _check_finite(v, "cross_entropy")
    logp = _log_softmax(v)
    rows = np.arange(p)
    loss = -logp[rows, targets].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / p),)

    return _make(np.asarray(loss), (logits,), "cross_entropy", back)


def l2_loss(pred: Node, target) -> Node:
    """Mean over rows of the squared Euclidean distance to ``target``."""
    t = as_tensor(target)
    v = pred.value
    if v.shape != t.shape:
        raise ShapeError(f"l2_loss: pred {list(v.shape)} vs target {list(t.shape)}")
    if v.ndim != 2 or v.shape[0] == 0:
        raise ShapeError(f"l2_loss: expected non-empty [p, d], got {list(v.shape)}")
    p = v.shape[0]
    diff = v - t
    loss = (diff * diff).sum() / p

    def back(g):
        return (diff * (2.0 * g / p),)

    return _make(np.asarray(loss), (pred,), "l2_loss", back)


def kl_div(pred_logits: Node, teacher, atol: float = 1e-6) -> Node:
    """Mean over rows of KL(teacher || softmax(pred_logits))."""
    t = as_tensor(teacher)
    v = pred_logits.value
    if v.shape != t.shape or v.ndim != 2 or v.shape[0] == 0:
        raise ShapeError(f"kl_div: logits {list(v.shape)} vs teacher {list(t.shape)}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > atol):
        raise NumericInputError("kl_div: teacher rows must be non-negative and sum to 1")
    _check_finite(v, "kl_div")
    p = v.shape[0]
    logq = _log_softmax(v)
    pos = t > 0
    logt = np.zeros_like(t)
    logt[pos] = np.log(t[pos])
    loss = np.where(pos, t * (logt - logq), 0.0).sum() / p

    def back(g):
        return ((np.exp(logq) - t) * (g / p),)

    return _make(np.asarray(loss), (pred_logits,), "kl_div", back)


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's ``grad``."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    grads: dict[int, Tensor] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()


def numerical_grad(f: Callable[[], float], x: Node, index, h: float = 1e-5) -> float:
    """Central finite difference of scalar ``f`` w.r.t. one entry of ``x``."""
    old = x.value[index]
    x.value[index] = old + h
    fp = float(f())
    x.value[index] = old - h
    fm = float(f())
    x.value[index] = old
    return (fp - fm) / (2 * h)
