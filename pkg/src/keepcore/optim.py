from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    weight_decay: float = 0.0  # decoupled (AdamW); 0 gives plain Adam

    @classmethod
    def zeros(cls, shape, **kw) -> AdamState:
        return cls(m=np.zeros(shape), v=np.zeros(shape), **kw)

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps_num"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AdamState.{name} must be positive")
        if self.m.shape != self.v.shape:
            raise ShapeError("Adam moments must share a shape")


def adam_step(param: Tensor, grad: Tensor | np.ndarray, state: AdamState,
              lr: float | None = None) -> tuple[Tensor, AdamState]:
    """Bias-corrected Adam update of ``param`` in place.

    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {list(param.shape)}, grad {list(g.shape)}, "
                         f"moments {list(state.m.shape)} must agree")
    step_lr = state.lr if lr is None else lr
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    if state.weight_decay:
        param.data -= step_lr * state.weight_decay * param.data
    param.data -= step_lr * m_hat / (np.sqrt(v_hat) + state.eps_num)
    return param, state


def cosine_lr(lr0: float, epoch: float, epochs: int) -> float:
    """Cosine decay from ``lr0`` at epoch 0 to 0 at ``epochs``."""
    return lr0 * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0
