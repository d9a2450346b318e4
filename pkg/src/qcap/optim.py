"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    weight_decay: float = 0.02
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    decay: list[bool] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], decay_mask: list[bool] | None = None, **kwargs):
        """Zeroed moment buffers; by default only matrices (ndim >= 2) are decayed."""
        if decay_mask is None:
            decay_mask = [p.ndim >= 2 for p in params]
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            decay=list(decay_mask),
            **kwargs,
        )


def adamw_step(params: list[Tensor], state: OptimizerState, lr: float):
    """One in-place AdamW update of ``params`` from their ``.grad`` buffers."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match parameter list")
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"parameters {missing} have no gradient")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v, decay in zip(params, state.m, state.v, state.decay):
        g = p.grad
        if decay and state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass(frozen=True)
class LrSchedule:
    warmup_epochs: float = 2
    total_epochs: float = 50
    lr_warmup: float = 1.0e-5
    lr_peak: float = 2.0e-4
    lr_floor: float = 1.0e-6

    def __post_init__(self):
        if not self.lr_warmup <= self.lr_peak:
            raise ValueError("lr_warmup must not exceed lr_peak")
        if not self.lr_floor <= self.lr_peak:
            raise ValueError("lr_floor must not exceed lr_peak")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs)")


def lr_at(schedule: LrSchedule, epoch_fraction: float) -> float:
    """Learning rate at a (fractional) epoch position."""
    s = schedule
    if not 0 <= epoch_fraction < s.total_epochs:
        raise ValueError(f"epoch {epoch_fraction} outside [0, {s.total_epochs})")
    if epoch_fraction < s.warmup_epochs:
        frac = epoch_fraction / s.warmup_epochs
        return s.lr_warmup + (s.lr_peak - s.lr_warmup) * frac
    progress = (epoch_fraction - s.warmup_epochs) / (s.total_epochs - s.warmup_epochs)
    return s.lr_floor + 0.5 * (s.lr_peak - s.lr_floor) * (1.0 + math.cos(math.pi * progress))
