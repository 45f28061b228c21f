"""Dense rank-1/rank-2 tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
orders the recorded graph topologically and runs the closures once each,
in reverse.  Everything is float64.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericalError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim not in (1, 2):
            raise DimensionError(f"tensors are rank 1 or 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0


def tensor(values, requires_grad=False, name=None):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else tensor(x)


def _result(out, parents, backward_fn):
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite value produced by forward op")
    t = Tensor(out)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matvec(W, x):
    W, x = _wrap(W), _wrap(x)
    if W.data.ndim != 2 or x.data.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: cannot apply {W.shape} to {x.shape}")
    out = W.data @ x.data

    def bw(g):
        return np.outer(g, x.data), W.data.T @ g

    return _result(out, (W, x), bw)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b):
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "hadamard")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    a = _wrap(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def concat(parts):
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no parts")
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError(f"concat: rank-1 parts only, got {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts]), tuple(parts), bw)


def slice_op(x, start, stop):
    x = _wrap(x)
    if x.data.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for {x.shape}")
    n = x.shape[0]

    def bw(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop].copy(), (x,), bw)


def split(x, sizes):
    """Cut a rank-1 tensor into consecutive pieces of the given sizes."""
    if sum(sizes) != x.shape[0]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover {x.shape}")
    out, o = [], 0
    for s in sizes:
        out.append(slice_op(x, o, o + s))
        o += s
    return out


def sigmoid(x):
    x = _wrap(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh_op(x):
    x = _wrap(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def abs_op(x):
    x = _wrap(x)
    sg = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sg,))


def softmax(x):
    x = _wrap(x)
    if x.data.ndim != 1:
        raise DimensionError(f"softmax expects rank 1, got {x.shape}")
    e = np.exp(x.data - x.data.max())
    p = e / e.sum()

    def bw(g):
        return (p * (g - np.dot(g, p)),)

    return _result(p, (x,), bw)


def log_softmax(x):
    x = _wrap(x)
    if x.data.ndim != 1:
        raise DimensionError(f"log_softmax expects rank 1, got {x.shape}")
    shifted = x.data - x.data.max()
    lse = np.log(np.exp(shifted).sum())
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(),))


def sum_op(x):
    x = _wrap(x)
    shape = x.shape
    return _result(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def dot(a, b):
    """Inner product of two rank-1 tensors, as a shape-[1] tensor."""
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "dot")
    return _result(np.array([a.data @ b.data]), (a, b), lambda g: (g[0] * b.data, g[0] * a.data))


def affine(W, x, b):
    return add(matvec(W, x), b)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def dropout_mask(dim, rate, rng):
    """Inverted-dropout mask: Bernoulli(1 - rate) scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return tensor(np.ones(dim))
    keep = rng.random(dim) >= rate
    return tensor(keep / (1.0 - rate))
