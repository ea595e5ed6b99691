"""Parameter storage and descent steps."""

from dataclasses import dataclass, field

import numpy as np


class ParamStore:
    """Named float64 parameters with their latest gradients."""

    def __init__(self):
        self.values = {}
        self.grads = {}

    def add(self, name, value):
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.values[name] = np.array(value, dtype=np.float64, ndmin=2)

    def names(self, prefix=None):
        if prefix is None:
            return list(self.values)
        return [n for n in self.values if n == prefix or n.startswith(prefix + ".")]

    def zero_grad(self):
        self.grads = {n: np.zeros_like(v) for n, v in self.values.items()}

    def copy(self):
        out = ParamStore()
        out.values = {n: v.copy() for n, v in self.values.items()}
        out.grads = {n: g.copy() for n, g in self.grads.items()}
        return out

    def load_values(self, other):
        for n, v in other.values.items():
            self.values[n] = v.copy()

    def __contains__(self, name):
        return name in self.values

    def __len__(self):
        return len(self.values)


@dataclass
class OptimState:
    lr: float = 1e-3
    mode: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(params, state, scope=None):
    """Apply one update to the parameters named in ``scope`` (all when None).

    Anything outside ``scope`` is left untouched, array object included.
    """
    names = list(params.values) if scope is None else list(scope)
    for name in names:
        if name not in params.grads:
            raise KeyError(f"no gradient for in-scope parameter {name!r}")
    state.step += 1
    t = state.step
    for name in names:
        g = params.grads[name]
        if state.mode == "sgd":
            params.values[name] = params.values[name] - state.lr * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        params.values[name] = params.values[name] - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params
