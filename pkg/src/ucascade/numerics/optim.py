"""SGD and Adam over a flat ``{name: array}`` parameter store."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericalError


@dataclass
class OptimState:
    lr: float
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")


def optimizer_step(params, grads, state):
    """Update ``params`` in place from ``grads``; returns ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise ConfigError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}")
    state.step += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] -= (state.lr * g).astype(params[name].dtype)
        return params

    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] -= upd.astype(params[name].dtype)
    return params
