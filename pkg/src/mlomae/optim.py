"""AdamW with decoupled decay, plain SGD, and the half-cosine lr schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamSet
from .tensor import GradMap, Tensor

ADAM_EPS = 1e-8


@dataclass
class OptState:
    """First/second moment and step counter for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros_like(param: Tensor) -> "OptState":
        return OptState(m=np.zeros_like(param.data), v=np.zeros_like(param.data), t=0)


def adamw_step(param: Tensor, grad: np.ndarray, state: OptState, lr: float,
               betas: tuple[float, float], weight_decay: float) -> None:
    """One AdamW update in place. Decoupled decay runs before the adaptive step."""
    if weight_decay != 0.0:
        param.data = param.data - lr * weight_decay * param.data
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1 ** state.t)
    vhat = state.v / (1.0 - b2 ** state.t)
    param.data = param.data - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def sgd_step(param: Tensor, grad: np.ndarray, lr: float) -> None:
    param.data = param.data - lr * grad


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    """Half-cosine decay from base_lr to min_lr over total_steps; clamped after."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    frac = min(max(step, 0), total_steps) / total_steps
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class SetOptimizer:
    """AdamW (or plain SGD in oracle mode) over one named parameter set.

    Decoupled decay only touches rank >= 2 tensors; biases, norm gains and the
    mask token are exempt.
    """

    params: ParamSet
    betas: tuple[float, float]
    weight_decay: float
    plain_sgd: bool = False
    states: dict[str, OptState] = field(default_factory=dict)

    def __post_init__(self):
        if not self.states:
            self.states = {k: OptState.zeros_like(p) for k, p in self.params.items()}

    def step(self, grads: GradMap, lr: float) -> None:
        for name, p in self.params.items():
            g = grads[p]
            if self.plain_sgd:
                sgd_step(p, g, lr)
            else:
                wd = self.weight_decay if p.data.ndim >= 2 else 0.0
                adamw_step(p, g, self.states[name], lr, self.betas, wd)
