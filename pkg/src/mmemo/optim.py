"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericInputError
from .params import ModelParams


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
               lr: float | None = None) -> tuple[dict[str, np.ndarray], OptimState]:
    """One AdamW update. Pure: returns new parameter arrays and a new state."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericInputError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        decayed = p * (1.0 - lr * state.weight_decay)
        new_params[name] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = OptimState(state.lr, b1, b2, state.eps, state.weight_decay, t, new_m, new_v)
    return new_params, new_state


class AdamW:
    """Applies :func:`adamw_step` in place to a :class:`ModelParams` store."""

    def __init__(self, params: ModelParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, trainable=None):
        self.params = params
        self.trainable = list(trainable) if trainable is not None else list(params)
        self.state = OptimState(lr, betas[0], betas[1], eps, weight_decay)

    def step(self, lr: float | None = None) -> None:
        arrays = {k: self.params[k].value for k in self.trainable}
        grads = {k: self.params[k].grad for k in self.trainable}
        new, self.state = adamw_step(arrays, grads, self.state, lr)
        for k, arr in new.items():
            self.params[k].value = arr

    def zero_grad(self) -> None:
        self.params.zero_grad()


def linear_schedule(step: int, total: int, peak: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup from 0 to ``peak`` then linear decay to 0 at ``total``."""
    warmup = int(round(warmup_frac * total))
    if step <= 0:
        return 0.0 if warmup > 0 else peak
    if step >= total:
        return 0.0
    if step < warmup:
        return peak * step / warmup
    return peak * (total - step) / (total - warmup)
