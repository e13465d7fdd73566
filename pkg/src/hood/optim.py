"""SGD with momentum under a truncated cosine learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BASE_LR = 3e-2
MOMENTUM = 0.9
SCHEDULE_CONST = 7 * math.pi / 16
HORIZON = 500_000


def cosine_lr(iteration: int, base_lr: float = BASE_LR, const: float = SCHEDULE_CONST,
              horizon: int = HORIZON) -> float:
    """``base_lr * cos(const * iteration / horizon)``; iterations past the horizon hold the final rate."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    it = min(iteration, horizon)
    return base_lr * math.cos(const * it / horizon)


@dataclass
class OptimizerState:
    velocity: list = field(default_factory=list)
    iteration: int = 0
    base_lr: float = BASE_LR
    momentum: float = MOMENTUM
    const: float = SCHEDULE_CONST
    horizon: int = HORIZON

    def lr(self) -> float:
        return cosine_lr(self.iteration, self.base_lr, self.const, self.horizon)


def sgd_momentum_step(params, grads, state: OptimizerState):
    """One in-place update: ``v <- m*v + g``, ``p <- p - lr*v``.

    ``params`` are tensors (their ``.data`` is replaced) or bare arrays
    (updated in place).  Returns ``params``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.velocity:
        state.velocity = [np.zeros_like(_arr(p)) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    lr = state.lr()
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = _arr(p)
        if np.shape(g) != arr.shape or state.velocity[i].shape != arr.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {arr.shape} vs {np.shape(g)}")
        v = state.velocity[i]
        v *= state.momentum
        v += g
        arr -= (lr * v).astype(arr.dtype, copy=False)
    state.iteration += 1
    return params


def _arr(p) -> np.ndarray:
    return p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
