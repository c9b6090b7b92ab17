"""Reverse-mode taping over the small, closed set of operations the model uses.

Each operation computes its value with numpy and, when any input requires a
gradient, records a node holding its parents and a hand-written adjoint. There
is no general tracing: anything outside this vocabulary is not differentiable.

    w = param(np.ones(3))
    loss = sum_all(mul(w, w))
    backward(loss)        # w.grad == 2 * w.data
"""

from __future__ import annotations

import numpy as np

from . import ssm_scan


class UsageError(RuntimeError):
    """The tape was used incorrectly (e.g. backward on an unrecorded value)."""


class Var:
    __slots__ = ("data", "grad", "requires_grad", "parents", "adjoint", "name")

    def __init__(self, data, requires_grad=False, parents=(), adjoint=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.adjoint = adjoint
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}{self.data.shape}"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, name=None) -> Var:
    return Var(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def const(data) -> Var:
    return data if isinstance(data, Var) else Var(data)


def _node(value, parents, adjoint) -> Var:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Var(value, True, parents, adjoint)
    return Var(value)


def unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Var) -> None:
    """Accumulate ``d loss / d v`` into ``v.grad`` for every recorded ``v``."""
    if loss.data.size != 1:
        raise UsageError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise UsageError("loss was not recorded: no input requires a gradient")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if not v.parents:
            v.grad = g if v.grad is None else v.grad + g
            continue
        for p, gp in zip(v.parents, v.adjoint(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def neg(a) -> Var:
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Var:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def softplus(a) -> Var:
    return _node(ssm_scan.softplus(a.data), (a,), lambda g: (g * ssm_scan.sigmoid(a.data),))


def silu(a) -> Var:
    s = ssm_scan.sigmoid(a.data)
    return _node(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


# --- linear algebra and shape ----------------------------------------------

def matmul(a, b) -> Var:
    """Batched ``a @ b``; either operand may carry extra leading dimensions."""
    a, b = const(a), const(b)

    def adjoint(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), adjoint)


def transpose(a) -> Var:
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Var:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a) -> Var:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def take_rows(a, index) -> Var:
    """``a[index]`` along the first axis, for table lookups."""
    index = np.asarray(index)

    def adjoint(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), adjoint)


def select(a, index, axis) -> Var:
    """Drop ``axis`` by picking one position along it."""
    def adjoint(g):
        out = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _node(np.take(a.data, index, axis=axis), (a,), adjoint)


def concat(vs, axis) -> Var:
    vs = [const(v) for v in vs]
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]
    return _node(np.concatenate([v.data for v in vs], axis=axis), vs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def broadcast_to(a, shape) -> Var:
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),))


# --- fused network operations ------------------------------------------------

def layernorm(x, gamma, eps=1e-5) -> Var:
    """Normalize over the last axis, then scale by ``gamma``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def adjoint(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape)

    return _node(xhat * gamma.data, (x, gamma), adjoint)


def softmax(x) -> Var:
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)
    return _node(p, (x,), lambda g: (p * (g - (g * p).sum(-1, keepdims=True)),))


def cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def adjoint(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (g * grad / n,)

    return _node(np.asarray(loss), (logits,), adjoint)


def conv1d_depthwise(u, w, b) -> Var:
    """Per-channel convolution along the sequence axis, zero 'same' padding.

    ``u`` is ``(B, N, E)``, ``w`` is ``(E, k)`` with odd ``k`` and ``b`` is ``(E,)``.
    """
    k = w.shape[1]
    if k % 2 != 1:
        raise ValueError("depthwise kernel width must be odd")
    pad = k // 2
    N = u.shape[-2]
    up = np.pad(u.data, [(0, 0)] * (u.data.ndim - 2) + [(pad, pad), (0, 0)])
    out = b.data + sum(up[..., t:t + N, :] * w.data[:, t] for t in range(k))

    def adjoint(g):
        gw = np.stack([(g * up[..., t:t + N, :]).reshape(-1, g.shape[-1]).sum(0) for t in range(k)], axis=1)
        gup = np.zeros_like(up)
        for t in range(k):
            gup[..., t:t + N, :] += g * w.data[:, t]
        gb = g.reshape(-1, g.shape[-1]).sum(0)
        return gup[..., pad:pad + N, :], gw, gb

    return _node(out, (u, w, b), adjoint)


def zoh(delta, A, B):
    """Taped diagonal ZOH discretization; returns ``(abar, bbar)``."""
    abar, bbar = ssm_scan.zoh(delta.data, A.data, B.data)
    zeros = np.zeros_like(abar)

    def adj_abar(g):
        return ssm_scan.zoh_vjp(delta.data, A.data, B.data, g, zeros)[:2]

    def adj_bbar(g):
        return ssm_scan.zoh_vjp(delta.data, A.data, B.data, zeros, g)

    return _node(abar, (delta, A), adj_abar), _node(bbar, (delta, A, B), adj_bbar)


def scan(abar, bbar, cbar, x, *, residual=False, exclude_diagonal=False, reverse=False) -> Var:
    """Taped :func:`mambapro.ssm_scan.run_scan` output ``y``."""
    flags = dict(residual=residual, exclude_diagonal=exclude_diagonal, reverse=reverse)
    out = ssm_scan.run_scan(abar.data, bbar.data, cbar.data, x.data, **flags)
    return _node(out.y, (abar, bbar, cbar, x),
                 lambda g: ssm_scan.run_scan_vjp(abar.data, bbar.data, cbar.data, x.data, g, **flags))
