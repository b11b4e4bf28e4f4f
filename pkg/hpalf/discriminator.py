"""Global and local coherent discriminator with a U-net shaped encoder/decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, DimensionError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Module
from .schemas import DiscriminatorConfig
from .tensorcore import Tensor

logger = logging.getLogger("hpalf")


@dataclass
class EncoderOutput:
    scalar: Tensor
    scalar_logit: Tensor
    perspective: Tensor
    logits: Tensor
    bottleneck: Tensor
    skips: list[Tensor] = field(repr=False)


@dataclass
class DiscriminatorOutput:
    """Scalar realness (B,), perspective distribution (B, K) and per-pixel map (B, H, W)."""

    scalar: Tensor
    perspective: Tensor
    pixel_map: Tensor | None = None
    scalar_logit: Tensor | None = None
    level_maps: list[Tensor] = field(default_factory=list)


class Discriminator(Module):
    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.slope = config.leaky_slope
        widths = config.encoder_widths()
        k = config.outcomes

        self.down: list[Conv2d] = []
        self.down_norms: list[BatchNorm2d | None] = []
        previous = 1
        for stage, width in enumerate(widths):
            self.down.append(Conv2d(previous, width, rng, kernel=3, stride=2, padding=1))
            self.down_norms.append(BatchNorm2d(width) if stage > 0 else None)
            previous = width
        self.to_outcomes = Conv2d(previous, k, rng)

        flat = k * config.bottleneck * config.bottleneck
        self.dense = [Dense(flat, k * 16, rng), Dense(k * 16, k * 16, rng), Dense(k * 16, k * 16, rng)]

        self.up: list[ConvTranspose2d] = []
        self.up_norms: list[BatchNorm2d] = []
        self.level_heads: list[Conv2d] = []
        channels = k + widths[-1]
        for step in range(len(widths)):
            out = widths[len(widths) - 1 - step]
            self.up.append(ConvTranspose2d(channels, out, rng, kernel=3, stride=2, padding=1, output_padding=1))
            self.up_norms.append(BatchNorm2d(out))
            skip = self._skip_level(step)
            channels = out + (widths[skip] if skip >= 0 else 0)
            if config.multilevel and skip >= 0:
                self.level_heads.append(Conv2d(channels, 1, rng))
        self.to_pixels = Conv2d(channels, 1, rng)

        keep = np.ones(k)
        keep[list(config.zero_outcomes)] = 0.0
        self._keep = keep

    def _skip_level(self, step: int) -> int:
        return len(self.down) - 2 - step

    def encode(self, image: Tensor) -> EncoderOutput:
        size = self.config.image_size
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (size, size):
            raise ConfigurationError(f"discriminator expects (batch, 1, {size}, {size}), got {image.shape}")
        skips: list[Tensor] = []
        h = image
        for conv, norm in zip(self.down, self.down_norms):
            h = conv(h)
            if norm is not None:
                h = norm(h)
            h = tc.leaky_relu(h, self.slope)
            skips.append(h)
        bottleneck = self.to_outcomes(h)
        logits = tc.pool_global_sum(bottleneck)
        if self.config.zero_outcomes:
            logits = logits * self._keep
        perspective = tc.softmax(logits, axis=1)

        batch = image.shape[0]
        z = tc.reshape(bottleneck, (batch, -1))
        for index, layer in enumerate(self.dense):
            z = layer(z)
            if index < len(self.dense) - 1:
                z = tc.leaky_relu(z, self.slope)
        scalar_logit = tc.mean(z, axis=1)
        return EncoderOutput(
            scalar=tc.sigmoid(scalar_logit),
            scalar_logit=scalar_logit,
            perspective=perspective,
            logits=logits,
            bottleneck=bottleneck,
            skips=skips,
        )

    def decode(self, encoded: EncoderOutput) -> tuple[Tensor, list[Tensor]]:
        """Per-pixel sigmoid map (B, H, W) plus any intermediate level maps."""
        skips = encoded.skips
        if len(skips) != len(self.down):
            raise DimensionError(f"expected {len(self.down)} skip tensors, got {len(skips)}")
        if skips[-1].shape[2:] != encoded.bottleneck.shape[2:]:
            raise DimensionError("deepest skip does not match the bottleneck extent")
        h = tc.concat([encoded.bottleneck, skips[-1]], axis=1)
        level_maps: list[Tensor] = []
        heads = iter(self.level_heads)
        for step, (deconv, norm) in enumerate(zip(self.up, self.up_norms)):
            h = tc.leaky_relu(norm(deconv(h)), self.slope)
            level = self._skip_level(step)
            if level >= 0:
                if skips[level].shape[2:] != h.shape[2:]:
                    raise DimensionError(f"skip {skips[level].shape} does not match decoder state {h.shape}")
                h = tc.concat([h, skips[level]], axis=1)
                if self.config.multilevel:
                    level_map = tc.sigmoid(next(heads)(h))
                    level_maps.append(tc.reshape(level_map, (h.shape[0], h.shape[2], h.shape[3])))
        pixel = tc.sigmoid(self.to_pixels(h))
        return tc.reshape(pixel, (h.shape[0], h.shape[2], h.shape[3])), level_maps

    def __call__(self, image: Tensor, *, decode: bool = True) -> DiscriminatorOutput:
        encoded = self.encode(image)
        out = DiscriminatorOutput(
            scalar=encoded.scalar, perspective=encoded.perspective, scalar_logit=encoded.scalar_logit
        )
        if decode:
            out.pixel_map, out.level_maps = self.decode(encoded)
        return out


def disc_encode(discriminator: Discriminator, image: Tensor) -> EncoderOutput:
    return discriminator.encode(image)


def disc_decode(discriminator: Discriminator, encoded: EncoderOutput) -> Tensor:
    return discriminator.decode(encoded)[0]


def disc_forward(discriminator: Discriminator, image: Tensor) -> DiscriminatorOutput:
    return discriminator(image)
