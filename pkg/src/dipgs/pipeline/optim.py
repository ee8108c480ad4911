"""Adam and AdamW over diffkit tensors (updated in place)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..diffkit import Tensor


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    weight_decay: float = 0.0  # > 0 selects decoupled (AdamW) decay
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], weight_decay: float = 0.0, **kw) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params],
                   weight_decay=weight_decay, **kw)

    @property
    def mode(self) -> str:
        return "AdamW" if self.weight_decay > 0 else "Adam"


def adam_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray],
              lr: float | Sequence[float]) -> None:
    """One bias-corrected Adam update; ``lr`` may be given per parameter."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and state counts differ")
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g, rate) in enumerate(zip(params, grads, lrs)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - rate * state.weight_decay
        p.data -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class Adam:
    """Parameter groups sharing one state; each group carries its own learning rate."""

    groups: list[tuple[list[Tensor], float]]
    weight_decay: float = 0.0
    state: OptimizerState = field(init=False)

    def __post_init__(self):
        self.state = OptimizerState.for_params(self.params, self.weight_decay)

    @property
    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def step(self, grads: dict) -> None:
        params = self.params
        lrs = [lr for ps, lr in self.groups for _ in ps]
        adam_step(self.state, params, [grads[p] for p in params], lrs)
