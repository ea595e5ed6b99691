"""A small reverse-mode tape over 2-D float64 arrays.

Only the ops the network needs are provided. Each op records a closure that
maps the output gradient to one gradient per parent; ``Tape.backward`` walks
the record in reverse creation order, which is a valid topological order.
"""

import numpy as np

from . import ops
from .ops import PROB_FLOOR, ShapeError


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "tape")

    def __init__(self, value, tape=None, requires_grad=False, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records ops for one forward pass over a :class:`ParamStore`.

    ``trainable`` limits which parameters are tracked; the rest enter the
    graph as constants and therefore get a zero gradient.
    """

    def __init__(self, params=None, trainable=None):
        self.params = params
        self.trainable = None if trainable is None else set(trainable)
        self.nodes = []
        self.leaves = {}

    def param(self, name):
        value = self.params.values[name]
        track = self.trainable is None or name in self.trainable
        if not track:
            return Var(value, self)
        if name not in self.leaves:
            self.leaves[name] = Var(value, self, requires_grad=True)
        return self.leaves[name]

    def constant(self, value):
        return Var(ops.as_tensor(value), self)

    def record(self, value, parents, backward_fn):
        needs = any(p.requires_grad for p in parents)
        out = Var(value, self, needs, parents if needs else (), backward_fn if needs else None)
        if needs:
            self.nodes.append(out)
        return out

    def backward(self, loss):
        if not self.nodes or loss.tape is not self:
            raise RuntimeError("backward() called before a forward pass was recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        for leaf in self.leaves.values():
            leaf.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        if self.params is not None:
            self.params.zero_grad()
            for name, leaf in self.leaves.items():
                if leaf.grad is not None:
                    self.params.grads[name] = leaf.grad.copy()


def backward(loss):
    """Populate parameter gradients of the store behind ``loss``."""
    if loss.tape is None:
        raise RuntimeError("backward() called before a forward pass was recorded")
    loss.tape.backward(loss)


def detach(x):
    return Var(x.value, x.tape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(a, b):
    value = ops.matmul(a.value, b.value)
    return a.tape.record(value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def add(a, b):
    """Elementwise sum; a 1-row operand is broadcast over rows."""
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape
    return a.tape.record(value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(a, c):
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def relu(a):
    return a.tape.record(ops.relu(a.value), (a,), lambda g: (relu_grad(g, a.value),))


def relu_grad(g, x):
    return g * (x > 0)


def conv1d_rows(x, kernel):
    """Row-wise same-length conv; ``kernel`` is a (1, k) parameter."""
    k = kernel.value.size

    def back(g):
        pad = (k - 1) // 2
        kv = kernel.value.ravel()
        n, d = x.shape
        gxp = np.zeros((n, d + 2 * pad))
        for j in range(k):
            gxp[:, j:j + d] += kv[j] * g
        gk = np.einsum("nij,ni->j", ops._windows(x.value, k), g).reshape(1, k)
        return gxp[:, pad:pad + d], gk

    return x.tape.record(ops.conv1d_rows(x.value, kernel.value), (x, kernel), back)


def log_softmax(a):
    value = ops.log_softmax(a.value, axis=1)

    def back(g):
        p = np.exp(value)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return a.tape.record(value, (a,), back)


def nll(logp, labels, mask=None):
    """Masked mean of ``-max(logp[label], log 1e-12)``; zero when nothing is selected."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if mask is None:
        mask = labels >= 0
    mask = np.asarray(mask, dtype=bool).ravel()
    rows = np.flatnonzero(mask)
    n_cls = logp.shape[1]
    if rows.size and (labels[rows].min() < 0 or labels[rows].max() >= n_cls):
        raise IndexError(f"label out of range for {n_cls} classes")
    picked = logp.value[rows, labels[rows]]
    floor = np.log(PROB_FLOOR)
    live = picked > floor
    value = -np.maximum(picked, floor).mean() if rows.size else 0.0

    def back(g):
        out = np.zeros_like(logp.value)
        if rows.size:
            out[rows[live], labels[rows[live]]] = -g.item() / rows.size
        return (out,)

    return logp.tape.record(np.array([[value]]), (logp,), back)


def total(a):
    """Sum of all entries as a (1, 1) Var."""
    return a.tape.record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g.item()),))
