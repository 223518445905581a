"""Adam optimizer and the warmup/decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError


@dataclass
class LrSchedule:
    """Linear warmup to base_lr, then stepwise multiplicative decay."""

    base_lr: float = 1e-3
    warmup_steps: int = 50
    decay_interval: int = 1000
    decay_factor: float = 0.95

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup_steps <= 0 or self.decay_interval <= 0:
            raise ContractError("LrSchedule: base_lr, warmup_steps, decay_interval must be positive")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ContractError(f"LrSchedule: decay_factor {self.decay_factor} outside (0, 1]")


def lr_at_step(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ContractError(f"lr_at_step: negative step {step}")
    if step <= schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    decays = (step - schedule.warmup_steps) // schedule.decay_interval
    return schedule.base_lr * schedule.decay_factor ** decays


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: list[tuple[str, Tensor]],
    state: OptimizerState,
    lr: float,
) -> None:
    """One bias-corrected Adam update in place; grads must be populated."""
    if lr < 0:
        raise ContractError(f"adam_step: negative learning rate {lr}")
    for name, p in params:
        g = p.grad
        if g is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        if g.shape != p.data.shape:
            raise ContractError(f"adam_step: grad shape mismatch on {name!r}")
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient on parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
