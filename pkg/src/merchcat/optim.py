"""SGD with momentum/weight decay and the one-cycle learning-rate policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import UsageError


@dataclass
class SgdState:
    """Mutable optimizer state; one velocity buffer per parameter."""

    learning_rate: float
    momentum: float
    weight_decay: float
    velocities: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float = 0.0,
                   momentum: float = 0.0, weight_decay: float = 0.0) -> "SgdState":
        return cls(
            learning_rate=learning_rate,
            momentum=momentum,
            weight_decay=weight_decay,
            velocities=[np.zeros_like(p.data) for p in params],
        )


def sgd_step(params: Sequence[Tensor], state: SgdState) -> None:
    """One momentum-SGD update over ``params`` (gradients read from ``.grad``).

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - lr * v
    """
    if len(params) != len(state.velocities):
        raise UsageError("optimizer state does not match the parameter list")
    for p, v in zip(params, state.velocities):
        if p.grad is None:
            raise UsageError("sgd_step called before gradients were populated")
        v *= state.momentum
        v += p.grad + state.weight_decay * p.data
        p.data -= state.learning_rate * v


@dataclass(frozen=True)
class OneCycleSchedule:
    """Linear warmup to ``lr_max`` followed by cosine annealing.

    Momentum moves opposite to the learning rate: it anneals from
    ``momentum_max`` down to ``momentum_min`` during warmup and back up
    during the cosine phase.
    """

    total_steps: int
    lr_max: float
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_start: float = 0.3
    momentum_max: float = 0.95
    momentum_min: float = 0.85

    def __post_init__(self):
        if self.total_steps < 1:
            raise UsageError("total_steps must be positive")
        if self.lr_max < 0:
            raise UsageError("lr_max must be nonnegative")
        if not 0.0 < self.pct_start < 1.0:
            raise UsageError("pct_start must lie in (0, 1)")
        if self.div_factor <= 0 or self.final_div_factor <= 0:
            raise UsageError("div factors must be positive")
        if self.peak_step < 1:
            raise UsageError(
                "total_steps too small: warmup phase would be empty"
            )

    @property
    def peak_step(self) -> int:
        return int(math.floor(self.pct_start * self.total_steps))


def one_cycle_at(schedule: OneCycleSchedule, step: int) -> tuple[float, float]:
    """Learning rate and momentum at ``step`` (0 <= step <= total_steps)."""
    if step < 0 or step > schedule.total_steps:
        raise UsageError(
            f"step {step} outside [0, {schedule.total_steps}]"
        )
    lr0 = schedule.lr_max / schedule.div_factor
    lr_final = schedule.lr_max / schedule.final_div_factor
    peak = schedule.peak_step
    if step <= peak:
        u = step / peak
        lr = lr0 + u * (schedule.lr_max - lr0)
        momentum = schedule.momentum_max + u * (
            schedule.momentum_min - schedule.momentum_max
        )
    else:
        u = (step - peak) / (schedule.total_steps - peak)
        w = 0.5 * (1.0 + math.cos(math.pi * u))
        lr = lr_final + (schedule.lr_max - lr_final) * w
        momentum = schedule.momentum_max + (
            schedule.momentum_min - schedule.momentum_max
        ) * w
    return lr, momentum
