"""Adam optimizer and the decaying learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import MissingGrad, NonFiniteGrad
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the parameter tensors.

    Every parameter must carry a gradient; a NaN/Inf gradient aborts the
    step before any parameter has been touched.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is None:
            raise MissingGrad(f"no gradient for parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGrad(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """Monotone decay from lr_start to lr_end over total_steps.

    kind: "cosine" (default), "linear", or "step" (geometric staircase with
    `drops` equal segments).
    """

    total_steps: int
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    kind: str = "cosine"
    drops: int = 4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.kind not in ("cosine", "linear", "step"):
            raise ValueError(f"unknown schedule kind: {self.kind!r}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a step; out-of-range steps clamp with a warning."""
    if step < 0 or step > schedule.total_steps:
        logger.warning("lr_at: step %d outside [0, %d]; clamping",
                       step, schedule.total_steps)
        step = min(max(step, 0), schedule.total_steps)
    frac = step / schedule.total_steps
    lo, hi = schedule.lr_end, schedule.lr_start
    if schedule.kind == "cosine":
        return lo + 0.5 * (hi - lo) * (1.0 + float(np.cos(np.pi * frac)))
    if schedule.kind == "linear":
        return hi + (lo - hi) * frac
    # step: geometric staircase, lr(total_steps) lands exactly on lr_end
    if schedule.drops < 2:
        return lo if step == schedule.total_steps else hi
    seg = min(int(frac * schedule.drops), schedule.drops - 1)
    return hi * (lo / hi) ** (seg / (schedule.drops - 1))
