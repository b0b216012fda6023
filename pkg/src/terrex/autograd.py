"""Minimal reverse-mode autodiff over numpy float64 arrays.

Only the operations the proxy/transformer network needs are provided. Each
op records its parents and a closure that maps the output gradient to
parent gradients; :meth:`Tensor.backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_kinks = None


@contextmanager
def record_kinks():
    """Collect the discrete choices (ReLU masks, max winners) made inside the block."""
    global _kinks
    prev, _kinks = _kinks, []
    try:
        yield _kinks
    finally:
        _kinks = prev


class Tensor:
    __slots__ = ("data", "grad", "parents", "_back", "requires_grad")

    def __init__(self, data, parents=(), back=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._back = back
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._back is None or node.grad is None:
                continue
            for p, g in zip(node.parents, node._back(node.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = const(a), const(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, (a, b), back)


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    if _kinks is not None:
        _kinks.append(on)
    return Tensor(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``a[idx]`` along the first axis; ``idx`` may have any shape."""
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], (a,), back)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max reduction; ties route the gradient to the first maximal entry."""
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    if _kinks is not None:
        _kinks.append(arg)
    out = np.take_along_axis(a.data, arg, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor(np.squeeze(out, axis=axis), (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor(s, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return Tensor(xhat * gain.data + bias.data, (x, gain, bias), back)


def affine(x, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)
