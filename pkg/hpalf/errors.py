"""Exception hierarchy shared by every hpalf module."""

from __future__ import annotations


class HpalfError(Exception):
    """Base class for all lab errors."""


class ConfigurationError(HpalfError, ValueError):
    """A parameter or configuration value is outside its contract."""


class DimensionError(HpalfError, ValueError):
    """Tensor or array shapes do not line up."""


class NonFiniteError(HpalfError, ArithmeticError):
    """A NaN or Inf value appeared where only finite values are allowed."""


class ContractError(HpalfError, RuntimeError):
    """An API was called outside its preconditions."""


class DivergenceError(HpalfError, ArithmeticError):
    """A logarithm or divergence was evaluated at a non-positive argument, or an iteration diverged."""


class UndefinedPointError(HpalfError, ValueError):
    """Both data and generator masses vanish at the queried sample point."""


class ConvergenceError(HpalfError, RuntimeError):
    """A numeric optimisation stopped before reaching its tolerance."""

    def __init__(self, message: str, *, gradient_norm: float) -> None:
        super().__init__(f"{message} (final gradient norm {gradient_norm:.3e})")
        self.gradient_norm = gradient_norm


class TrainingAbortedError(HpalfError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, *, batch_seed: int, dump_path: str | None = None) -> None:
        super().__init__(f"{message} (batch seed {batch_seed})")
        self.batch_seed = batch_seed
        self.dump_path = dump_path
