"""Non-learned reconstructions: zero filling and smoothed total-variation descent."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .mrisim import KSpaceSample, fft2c, ifft2c, zero_fill

logger = logging.getLogger("hpalf")

TV_EPS = 1e-6
MAX_HALVINGS = 10
ARMIJO = 1e-4


def reconstruct_zero_fill(sample: KSpaceSample) -> np.ndarray:
    return zero_fill(sample)


def _forward_differences(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dy = np.zeros_like(x)
    dx = np.zeros_like(x)
    dy[:-1, :] = x[1:, :] - x[:-1, :]
    dx[:, :-1] = x[:, 1:] - x[:, :-1]
    return dy, dx


def _adjoint_differences(py: np.ndarray, px: np.ndarray) -> np.ndarray:
    out = np.zeros_like(py)
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    return out


def tv_smooth(x: np.ndarray, eps: float = TV_EPS) -> float:
    dy, dx = _forward_differences(x)
    return float(np.sum(np.sqrt(dy**2 + dx**2 + eps)))


@dataclass
class TVResult:
    image: np.ndarray
    objective: list[float] = field(default_factory=list)
    halvings: int = 0
    iterations: int = 0


class TVProblem:
    """lambda * ||y - M F x||^2 + TV_eps(x) over real images."""

    def __init__(self, sample: KSpaceSample, lambda_fidelity: float, eps: float = TV_EPS) -> None:
        if lambda_fidelity < 0:
            raise ConfigurationError(f"lambda_fidelity must be non-negative, got {lambda_fidelity}")
        self.sample = sample
        self.lam = lambda_fidelity
        self.eps = eps

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.sample.mask * fft2c(x) - self.sample.spectrum

    def objective(self, x: np.ndarray) -> float:
        return self.lam * float(np.sum(np.abs(self.residual(x)) ** 2)) + tv_smooth(x, self.eps)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        fidelity = 2.0 * self.lam * ifft2c(self.sample.mask * self.residual(x)).real
        dy, dx = _forward_differences(x)
        magnitude = np.sqrt(dy**2 + dx**2 + self.eps)
        return fidelity + _adjoint_differences(dy / magnitude, dx / magnitude)

    def lipschitz(self) -> float:
        return 2.0 * self.lam + 8.0 / math.sqrt(self.eps)


def reconstruct_tv(
    sample: KSpaceSample,
    lambda_fidelity: float = 1.0,
    iterations: int = 200,
    step: float | None = None,
    *,
    eps: float = TV_EPS,
) -> TVResult:
    """Gradient descent from the zero-filled image with Armijo step halving."""
    if iterations < 1:
        raise ConfigurationError(f"iterations must be at least 1, got {iterations}")
    problem = TVProblem(sample, lambda_fidelity, eps)
    x = zero_fill(sample).astype(np.float64)
    value = problem.objective(x)
    step = step if step is not None else 1.0 / problem.lipschitz()
    result = TVResult(image=x, objective=[value])

    for _ in range(iterations):
        gradient = problem.gradient(x)
        norm2 = float(np.sum(gradient**2))
        if norm2 == 0.0:
            break
        trial = 2.0 * step
        for halving in range(MAX_HALVINGS + 1):
            candidate = x - trial * gradient
            candidate_value = problem.objective(candidate)
            if candidate_value <= value - ARMIJO * trial * norm2:
                break
            if halving < MAX_HALVINGS:
                trial *= 0.5
                result.halvings += 1
        else:
            if candidate_value > value + 1e-12 * max(1.0, abs(value)):
                raise DivergenceError(
                    f"TV objective rose from {value:.6g} to {candidate_value:.6g} after {MAX_HALVINGS} halvings"
                )
            logger.debug("TV descent stalled at objective %s", value)
            break
        x, value, step = candidate, candidate_value, trial
        result.objective.append(value)
        result.iterations += 1

    result.image = x
    logger.debug("TV reconstruction: %s iterations, %s halvings", result.iterations, result.halvings)
    return result
