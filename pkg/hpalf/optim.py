"""Adam with bias correction and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensorcore import Tensor


@dataclass
class AdamState:
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first:
        state.first = [np.zeros_like(p) for p in params]
        state.second = [np.zeros_like(p) for p in params]
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    updated = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        grad = np.zeros_like(param) if grad is None else grad
        if grad.shape != param.shape:
            raise DimensionError(f"gradient {grad.shape} does not match parameter {param.shape}")
        m = state.first[index] = beta1 * state.first[index] + (1.0 - beta1) * grad
        v = state.second[index] = beta2 * state.second[index] + (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        updated.append((param - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False))
    return updated, state


def step_lr(initial: float, epoch: int, period: int) -> float:
    """Halve the rate every ``period`` epochs."""
    return initial * 0.5 ** (epoch // period)


class Adam:
    """Adam over a fixed list of tensors, reading and clearing their ``grad`` fields."""

    def __init__(self, params: Sequence[Tensor], lr: float, *, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        values, self.state = adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.betas[0],
            self.betas[1],
            self.eps,
        )
        for p, value in zip(self.params, values):
            p.data = value
