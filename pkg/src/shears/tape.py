"""Minimal reverse-mode tape over float32 numpy arrays.

Only leaves created with requires_grad=True receive gradients. Nodes whose
parents carry no gradient requirement record no backward closure, so an
inference-only forward pays nothing beyond cheap wrappers.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .linalg import F32, accum_matmul


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape


def _node(data, parents, bwd) -> Tensor:
    out = Tensor(data, any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(F32)


def _swap(x: np.ndarray) -> np.ndarray:
    return x.swapaxes(-1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = accum_matmul(a.data, b.data)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(accum_matmul(g, _swap(b.data)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(accum_matmul(_swap(a.data), g), b.data.shape)
        return ga, gb

    return _node(data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = F32(c)
    return _node(a.data * c, (a,), lambda g: ((g * c) if a.requires_grad else None,))


def transpose_last(a: Tensor) -> Tensor:
    return _node(_swap(a.data), (a,), lambda g: (_swap(g) if a.requires_grad else None,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _node(
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(old) if a.requires_grad else None,),
    )


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    data = a.data * s

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        return (g * (s * (1.0 + a.data * (1.0 - s))).astype(F32),)

    return _node(data, (a,), bwd)


def softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=-1, keepdims=True)).astype(F32)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        inner = (g * s).sum(axis=-1, keepdims=True)
        return ((s * (g - inner)).astype(F32),)

    return _node(s, (a,), bwd)


def mean_axis1(a: Tensor) -> Tensor:
    n = a.data.shape[1]
    data = a.data.mean(axis=1, dtype=np.float64).astype(F32)

    def bwd(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(g[:, None, :] / F32(n), a.data.shape).astype(F32),)

    return _node(data, (a,), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy with float64 log-sum-exp; scalar node."""
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    nll = -logp[np.arange(n), labels].mean()

    def bwd(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((float(g) / n * p).astype(F32),)

    return _node(np.float64(nll), (logits,), bwd)


def backward(root: Tensor) -> None:
    """Accumulate gradients of `root` (a scalar node) into requires_grad leaves."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
