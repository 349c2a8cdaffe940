"""AdamW with decoupled weight decay and a linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def linear_decay_lr(step: int, total_steps: int, base_lr: float) -> float:
    """``base_lr * (1 - step / total_steps)``, floored at 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    return max(0.0, base_lr * (1.0 - step / total_steps))


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState) -> None:
    """One in-place AdamW update of every parameter that has a gradient.

    Parameters are keyed by name so the moment buffers can be checkpointed.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = state.lr
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
