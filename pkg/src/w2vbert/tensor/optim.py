"""Adam with bias correction and the warmup / inverse-square-root schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to ``peak_lr`` then decay as 1/sqrt(step)."""
    if step < 1:
        raise ValueError(f"learning rate is defined for step >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "OptimizerState":
        st = cls(**hyper)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> OptimizerState:
    """One bias-corrected Adam update.

    Parameters are updated by rebinding ``param.data`` to a new array; the
    state's moments are likewise replaced, never written in place.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.dtype.type
        m = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = dt(b2) * state.v[name] + dt(1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        if lr == 0.0:
            continue
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p.data = p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
    return state
