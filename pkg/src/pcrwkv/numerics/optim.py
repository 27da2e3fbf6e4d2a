"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidStep
from .autograd import Node


@dataclass
class AdamWState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: list[Node],
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    state: AdamWState | None = None,
) -> AdamWState:
    """Apply one AdamW update in place and return the (mutated) state.

    Moment buffers are keyed by position in ``params``, so the caller must
    pass the parameters in the same order every step.
    """
    if state is None:
        state = AdamWState()
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.value)
            state.v[i] = np.zeros_like(p.value)
        v = state.v[i]
        # decay first, straight on the weights
        p.value *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise InvalidStep(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise InvalidStep(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
