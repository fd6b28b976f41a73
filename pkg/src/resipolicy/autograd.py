"""Minimal reverse-mode autodiff over float64 numpy arrays.

Each differentiable op records a hand-written vector-Jacobian product;
``backward()`` walks the graph in reverse topological order with a fixed
accumulation order, so gradients are exact up to float rounding and runs
are bitwise reproducible. When no input tracks gradients the ops skip
graph construction entirely, which makes the same forward code cheap to
reuse for inference.

All arrays are kept 2-D (vectors are 1xN rows); scalars are (1, 1).
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "track", "_parents", "_vjp")

    def __init__(self, value, track=False, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.track = track
        self._parents = _parents
        self._vjp = _vjp

    def __repr__(self):
        return f"Var(shape={self.value.shape}, track={self.track})"

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value.reshape(-1)[0])

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.track:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g

    # light operator sugar for readable model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _toposort(root):
    """Iterative DFS post-order over tracked nodes (deterministic)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.track:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.track and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _lift(x):
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, vjp):
    if not any(p.track for p in parents):
        return Var(value)
    return Var(value, track=True, _parents=tuple(parents), _vjp=vjp)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    val = a.value @ b.value

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return _node(val, (a, b), vjp)


def add(a, b):
    a, b = _lift(a), _lift(b)
    val = a.value + b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _node(val, (a, b), vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    val = a.value - b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _node(val, (a, b), vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    val = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _node(val, (a, b), vjp)


def scale(a, c):
    a = _lift(a)
    c = float(c)
    val = a.value * c

    def vjp(g):
        return (g * c,)

    return _node(val, (a,), vjp)


def tanh(a):
    a = _lift(a)
    y = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _node(y, (a,), vjp)


def sigmoid(a):
    a = _lift(a)
    x = a.value
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _node(y, (a,), vjp)


def softmax_rows(a):
    """Numerically stable softmax along axis 1; every row sums to 1."""
    a = _lift(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _node(y, (a,), vjp)


def square(a):
    a = _lift(a)
    val = a.value * a.value

    def vjp(g):
        return (2.0 * a.value * g,)

    return _node(val, (a,), vjp)


def clamp(a, lo, hi):
    """Entrywise clip; gradient passes only where the input is in range."""
    a = _lift(a)
    val = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)

    def vjp(g):
        return (g * inside,)

    return _node(val, (a,), vjp)


def concat_rows(items):
    items = [_lift(x) for x in items]
    val = np.concatenate([x.value for x in items], axis=0)
    sizes = [x.value.shape[0] for x in items]

    def vjp(g):
        out, at = [], 0
        for n in sizes:
            out.append(g[at : at + n])
            at += n
        return tuple(out)

    return _node(val, tuple(items), vjp)


def concat_cols(items):
    items = [_lift(x) for x in items]
    val = np.concatenate([x.value for x in items], axis=1)
    sizes = [x.value.shape[1] for x in items]

    def vjp(g):
        out, at = [], 0
        for n in sizes:
            out.append(g[:, at : at + n])
            at += n
        return tuple(out)

    return _node(val, tuple(items), vjp)


def gather_rows(a, idx):
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    val = a.value[idx].copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(val, (a,), vjp)


def slice_cols(a, j0, j1):
    a = _lift(a)
    val = a.value[:, j0:j1].copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, j0:j1] = g
        return (out,)

    return _node(val, (a,), vjp)


def transpose(a):
    a = _lift(a)

    def vjp(g):
        return (g.T,)

    return _node(a.value.T, (a,), vjp)


def reshape(a, shape):
    a = _lift(a)
    val = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return _node(val, (a,), vjp)


def sum_all(a):
    a = _lift(a)
    val = np.array([[a.value.sum()]])

    def vjp(g):
        return (np.full_like(a.value, g[0, 0]),)

    return _node(val, (a,), vjp)


def mean_all(a):
    a = _lift(a)
    n = a.value.size
    val = np.array([[a.value.sum() / n]])

    def vjp(g):
        return (np.full_like(a.value, g[0, 0] / n),)

    return _node(val, (a,), vjp)
