"""Pydantic models for run configuration and API responses."""

from __future__ import annotations

import math
from datetime import datetime
from fractions import Fraction
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigurationError

ENCODER_WIDTHS = (64, 128, 256, 512, 512, 512, 512, 512)
DECODER_WIDTHS = (1024, 1024, 1024, 1024, 512, 256, 128, 64)
DISCRIMINATOR_WIDTHS = (64, 128, 256, 512)

ContextKind = Literal["biconvlstm", "2dcnn", "3dcnn", "none"]
Convention = Literal["verbatim", "realness"]
ScalarObjective = Literal["standard", "wgan", "hinge", "lsgan"]


def parse_multiplier(value: Any) -> float:
    """Accept floats or rational strings such as ``"1/8"``."""
    if isinstance(value, str):
        value = float(Fraction(value.strip()))
    value = float(value)
    if not 0.0 < value <= 1.0:
        raise ConfigurationError(f"width multiplier must lie in (0, 1], got {value}")
    return value


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def scaled(width: int, multiplier: float) -> int:
    # round before ceil so 1/8 * 64 stays 8 despite float noise
    return max(1, math.ceil(round(width * multiplier, 9)))


class MaskSpec(BaseModel):
    """Undersampling pattern request."""

    kind: Literal["g1d", "g2d", "p2d"] = "g1d"
    fraction: float = 0.3
    seed: int = 0

    model_config = ConfigDict(frozen=True)

    @field_validator("kind", mode="before")
    @classmethod
    def _lower_kind(cls, value: Any) -> Any:
        return value.lower() if isinstance(value, str) else value

    @field_validator("fraction")
    @classmethod
    def _check_fraction(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ConfigurationError(f"sampling fraction must lie in (0, 1], got {value}")
        return value


class GeneratorConfig(BaseModel):
    """Shape of the context-aware generator."""

    width_multiplier: float = 1.0
    n_slices: int = 5
    lstm_channels: int = 32
    kernel: Literal[3] = 3
    image_size: int = 256
    context: ContextKind = "biconvlstm"
    refine_input: bool = True
    leaky_slope: float = 0.2

    model_config = ConfigDict(frozen=True)

    _multiplier = field_validator("width_multiplier", mode="before")(classmethod(lambda cls, v: parse_multiplier(v)))

    @field_validator("n_slices")
    @classmethod
    def _check_slices(cls, value: int) -> int:
        if not 3 <= value <= 7:
            raise ConfigurationError(f"n_slices must lie in 3..7, got {value}")
        return value

    @field_validator("image_size")
    @classmethod
    def _check_size(cls, value: int) -> int:
        if not _is_power_of_two(value) or value < 4:
            raise ConfigurationError(f"image_size must be a power of two >= 4, got {value}")
        return value

    @field_validator("lstm_channels")
    @classmethod
    def _check_lstm(cls, value: int) -> int:
        if value < 1:
            raise ConfigurationError("lstm_channels must be positive")
        return value

    @property
    def levels(self) -> int:
        return min(len(ENCODER_WIDTHS), int(math.log2(self.image_size)))

    def encoder_widths(self) -> list[int]:
        return [scaled(w, self.width_multiplier) for w in ENCODER_WIDTHS[: self.levels]]

    def decoder_widths(self) -> list[int]:
        return [scaled(w, self.width_multiplier) for w in DECODER_WIDTHS[len(DECODER_WIDTHS) - self.levels :]]


class DiscriminatorConfig(BaseModel):
    """Shape of the global and local coherent discriminator."""

    outcomes: int = 10
    width_multiplier: float = 1.0
    image_size: int = 256
    bottleneck: int = 4
    multilevel: bool = False
    zero_outcomes: tuple[int, ...] = ()
    leaky_slope: float = 0.2

    model_config = ConfigDict(frozen=True)

    _multiplier = field_validator("width_multiplier", mode="before")(classmethod(lambda cls, v: parse_multiplier(v)))

    @field_validator("outcomes")
    @classmethod
    def _check_outcomes(cls, value: int) -> int:
        if value < 2:
            raise ConfigurationError(f"need at least two outcomes, got {value}")
        return value

    @model_validator(mode="after")
    def _check_geometry(self) -> "DiscriminatorConfig":
        if not _is_power_of_two(self.image_size) or self.image_size < 2 * self.bottleneck:
            raise ConfigurationError(
                f"image_size {self.image_size} cannot be downsampled to a {self.bottleneck}x{self.bottleneck} bottleneck"
            )
        if any(not 0 <= k < self.outcomes for k in self.zero_outcomes):
            raise ConfigurationError("zero_outcomes entries must index existing outcomes")
        return self

    @property
    def stages(self) -> int:
        return int(math.log2(self.image_size // self.bottleneck))

    def encoder_widths(self) -> list[int]:
        widths = list(DISCRIMINATOR_WIDTHS) + [DISCRIMINATOR_WIDTHS[-1]] * max(0, self.stages - len(DISCRIMINATOR_WIDTHS))
        return [scaled(w, self.width_multiplier) for w in widths[: self.stages]]


class LossWeights(BaseModel):
    alpha: float = Field(15.0, ge=0.0)
    beta: float = Field(0.1, ge=0.0)
    lambda_fidelity: float = Field(1.0, ge=0.0)

    model_config = ConfigDict(frozen=True)


class AblationSwitches(BaseModel):
    """Component toggles; ``tal`` implies the perspective and decoder terms are off."""

    mpd: bool = True
    glc: bool = True
    cal: ContextKind = "biconvlstm"
    tal: bool = False
    objective: ScalarObjective = "standard"
    zero_outcomes: tuple[int, ...] = ()
    fmse: bool = True
    vgg: bool = True

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="before")
    @classmethod
    def _tal_forces_scalar_only(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("tal"):
            data = {**data, "mpd": False, "glc": False}
        return data

    @model_validator(mode="after")
    def _keep_an_adversarial_term(self) -> "AblationSwitches":
        if not (self.tal or self.mpd or self.glc):
            raise ConfigurationError("switches leave no adversarial term; enable mpd, glc or tal")
        return self

    @property
    def label(self) -> str:
        content = [name for name, on in (("fMSE", self.fmse), ("VGG", self.vgg)) if not on]
        if self.tal:
            label = "with TAL" if self.objective == "standard" else f"with TAL ({self.objective})"
            return label + (" without " + "+".join(content) if content else "")
        missing = []
        if not self.mpd:
            missing.append("MPD")
        if not self.glc:
            missing.append("GLC")
        if self.cal == "none":
            missing.append("CAL")
        missing += content
        label = "HP-ALF" if not missing else "without " + "+".join(missing)
        if self.cal not in ("biconvlstm", "none"):
            label += f" ({self.cal})"
        return label


class TrainConfig(BaseModel):
    """Everything that determines a training run besides the switches."""

    batch_size: int = Field(4, ge=1)
    lr: float = Field(3e-4, gt=0.0)
    lr_halving_period: int = Field(5, ge=1)
    early_stop_patience: int = Field(50, ge=1)
    alpha: float = Field(15.0, ge=0.0)
    beta: float = Field(0.1, ge=0.0)
    mask: MaskSpec = MaskSpec()
    noise: float = Field(0.0, ge=0.0, lt=1.0)
    n_slices: int = 5
    outcomes: int = 10
    width_multiplier: float = 0.125
    lstm_channels: Optional[int] = None
    image_size: int = 64
    convention: Convention = "realness"
    anchor_shape: float = Field(4.0, gt=0.0)
    seed: int = 0
    max_epochs: int = Field(100, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    d_steps_per_g: int = Field(1, ge=1)
    n_volumes: int = Field(20, ge=10)
    volume_depth: int = Field(16, ge=7)
    phantom_complexity: float = Field(0.5, ge=0.0, le=1.0)
    multilevel: bool = False

    model_config = ConfigDict(frozen=True)

    _multiplier = field_validator("width_multiplier", mode="before")(classmethod(lambda cls, v: parse_multiplier(v)))

    @field_validator("n_slices")
    @classmethod
    def _check_slices(cls, value: int) -> int:
        if not 3 <= value <= 7:
            raise ConfigurationError(f"n_slices must lie in 3..7, got {value}")
        return value

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta)

    def generator_config(self, context: ContextKind = "biconvlstm") -> GeneratorConfig:
        lstm = self.lstm_channels or scaled(32, self.width_multiplier)
        return GeneratorConfig(
            width_multiplier=self.width_multiplier,
            n_slices=self.n_slices,
            lstm_channels=lstm,
            image_size=self.image_size,
            context=context,
        )

    def discriminator_config(self, switches: AblationSwitches | None = None) -> DiscriminatorConfig:
        zero = switches.zero_outcomes if switches else ()
        return DiscriminatorConfig(
            outcomes=self.outcomes,
            width_multiplier=self.width_multiplier,
            image_size=self.image_size,
            zero_outcomes=zero,
            multilevel=self.multilevel,
        )


class RunResponse(BaseModel):
    """Registry row for one training run."""

    id: int
    name: str
    seed: int
    status: str
    config: dict
    switches: dict
    best_val_psnr: Optional[float] = None
    zero_fill_psnr: Optional[float] = None
    tv_psnr: Optional[float] = None
    checkpoint_path: Optional[str] = None
    history_path: Optional[str] = None
    created_at: datetime

    model_config = ConfigDict(from_attributes=True)


class EpochResponse(BaseModel):
    epoch: int
    d_loss: float
    g_loss: float
    val_psnr: float
    val_ssim: float
    lr: float

    model_config = ConfigDict(from_attributes=True)


class AblationCellResponse(BaseModel):
    label: str
    run_id: Optional[int] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    ffd: Optional[float] = None
    psim_lite: Optional[float] = None
    error: Optional[str] = None

    model_config = ConfigDict(from_attributes=True)


class AblationResponse(BaseModel):
    name: str
    cells: List[AblationCellResponse]


class StatusResponse(BaseModel):
    """Lab heartbeat metadata."""

    last_successful_run: Optional[datetime] = None
    last_error: Optional[str] = None
    last_error_at: Optional[datetime] = None
