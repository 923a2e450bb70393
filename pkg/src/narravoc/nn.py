"""Minimal reverse-mode autodiff over numpy arrays.

Only the handful of primitives the retrieval model needs: matmul, add,
elementwise products, gather, concat/slice, layernorm, gelu, softmax, L2
normalization, and the two loss heads (InfoNCE and cross-entropy).  Each op
records a backward closure; `backward()` runs the tape in reverse
topological order.  Arrays are float32 by default; pass float64 data for
high-precision gradient checking.
"""

from __future__ import annotations

import math

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._backward = backward
    return out


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        a._accumulate(g * s)

    return _result(a.data * s, (a,), bw)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    def bw(g):
        a._accumulate(_unbroadcast(g, a.data.shape))

    return _result(a.data + c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def bw(g):
        a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _result(data, (a, b), bw)


def gather(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _result(table.data[idx], (table,), bw)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _result(data, tuple(tensors), bw)


def index(a: Tensor, key) -> Tensor:
    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _result(a.data[key], (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        a._accumulate(g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        a._accumulate(g * da)

    return _result(data, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        a._accumulate(dx)
        axes = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=axes))
        bias._accumulate(g.sum(axis=axes))

    return _result(data, (a, gain, bias), bw)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; `mask` is an additive constant (use large
    negative values to forbid positions)."""
    z = a.data if mask is None else a.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (a,), bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x**2).sum(axis=-1, keepdims=True) + eps)
    y = x / norm

    def bw(g):
        a._accumulate((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm)

    return _result(y, (a,), bw)


def info_nce(t: Tensor, target_rows: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE over in-batch negatives.

    loss = -(1/B) sum_i log softmax_j(t_i . o_j / tau)[i], where o_j are the
    batch's target rows (constants: no gradient flows into the vocabulary).
    """
    o = np.asarray(target_rows, dtype=t.data.dtype)
    B = t.data.shape[0]
    logits = (t.data @ o.T) / tau
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    loss = float((lse.squeeze(-1) - np.diagonal(logits)).mean())
    p = np.exp(logits - lse)

    def bw(g):
        d = (p - np.eye(B, dtype=t.data.dtype)) @ o / (tau * B)
        t._accumulate(g * d)

    return _result(np.asarray(loss, dtype=t.data.dtype), (t,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over rows of `logits` (N, V)."""
    targets = np.asarray(targets)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    n = z.shape[0]
    picked = z[np.arange(n), targets]
    loss = float((lse.squeeze(-1) - picked).mean())
    p = np.exp(z - lse)

    def bw(g):
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
        logits._accumulate(g * d / n)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), bw)


class Adam:
    """Adam with bias correction over a name -> Tensor parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
