"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, NonFiniteValue, StepOutOfRange


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5

    def validate(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidConfig(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0.0:
            raise InvalidConfig(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0.0:
            raise InvalidConfig(f"weight decay must be >= 0, got {self.weight_decay}")


class AdamWState:
    """First/second moment buffers plus the shared step counter.

    One instance owns the state for a whole parameter set, keyed by
    parameter name.  `step` counts completed updates and is shared by
    every parameter, so partial updates are not representable.
    """

    def __init__(self, shapes: dict[str, tuple], config: AdamWConfig | None = None):
        self.config = config or AdamWConfig()
        self.config.validate()
        self.step = 0
        self.m = {name: np.zeros(shape, dtype=np.float64) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape, dtype=np.float64) for name, shape in shapes.items()}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float) -> None:
    """Apply one decoupled-weight-decay Adam update in place.

    Parameters without a gradient entry are left untouched (they still
    decay only when actually updated, keeping frozen weights frozen).
    """
    cfg = state.config
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteValue(f"non-finite gradient for {name}")
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p -= lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * p)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    """Cosine decay from base_lr (step 0) to min_lr (step == total_steps)."""
    if total_steps <= 0:
        raise StepOutOfRange(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    if min_lr > base_lr:
        raise InvalidConfig(f"min_lr {min_lr} exceeds base_lr {base_lr}")
    cos_term = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return min_lr + (base_lr - min_lr) * cos_term
