"""Loss functions: anchors, KL terms, adversarial, content and scalar-head objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np
from scipy import stats

from . import tensorcore as tc
from .discriminator import DiscriminatorOutput
from .errors import ConfigurationError, DimensionError, DivergenceError
from .layers import Conv2d, Module
from .mrisim import fft2c, ifft2c
from .schemas import Convention, LossWeights, ScalarObjective
from .tensorcore import Tensor

logger = logging.getLogger("hpalf")

PROB_FLOOR = 1e-7
ANCHOR_FLOOR = 1e-6
SURROGATE_SEED = 1234
SURROGATE_WIDTHS = (8, 16, 32)

Flags = Union[set[str], None]


@dataclass(frozen=True)
class AnchorDistribution:
    probs: np.ndarray
    skew_sign: int
    shape_param: float

    @property
    def outcomes(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class Anchors:
    """R1 (real) and R0 (fake)."""

    real: AnchorDistribution
    fake: AnchorDistribution

    @property
    def separation(self) -> float:
        return float(np.max(np.abs(self.real.probs - self.fake.probs)))


def build_anchor(outcomes: int, skew_sign: int, shape_param: float = 4.0) -> AnchorDistribution:
    """Discretised skew-normal on equispaced bins over [-3, 3]; the negative skew is the mirror image."""
    if outcomes < 2:
        raise ConfigurationError(f"an anchor needs at least two outcomes, got {outcomes}")
    if shape_param <= 0:
        raise ConfigurationError(f"anchor shape must be positive, got {shape_param}")
    if skew_sign not in (1, -1):
        raise ConfigurationError(f"skew_sign must be +1 or -1, got {skew_sign}")
    grid = np.linspace(-3.0, 3.0, outcomes)
    density = np.maximum(stats.skewnorm.pdf(grid, shape_param, loc=0.0, scale=1.0), ANCHOR_FLOOR)
    probs = density / density.sum()
    if skew_sign < 0:
        probs = probs[::-1].copy()
    return AnchorDistribution(probs=probs, skew_sign=skew_sign, shape_param=shape_param)


def build_anchors(outcomes: int, shape_param: float = 4.0) -> Anchors:
    return Anchors(real=build_anchor(outcomes, 1, shape_param), fake=build_anchor(outcomes, -1, shape_param))


def kl_divergence(p: np.ndarray, q: np.ndarray | Tensor) -> float | Tensor:
    """KL(p || q) in nats along the last axis; differentiable in ``q`` when it is a Tensor."""
    p = np.asarray(p, dtype=np.float64)
    q_values = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    if q_values.shape[-1] != p.shape[-1]:
        raise DimensionError(f"distributions over {p.shape[-1]} and {q_values.shape[-1]} outcomes")
    support = p > 0
    if np.any(np.broadcast_to(support, q_values.shape) & (q_values <= 0)):
        raise DivergenceError("KL divergence against a zero-probability outcome")
    entropy_term = float(np.sum(p[support] * np.log(p[support]))) if p.ndim == 1 else None
    if isinstance(q, Tensor):
        if entropy_term is None:
            raise DimensionError("differentiable KL expects a single reference distribution")
        cross = tc.tsum(tc.log(q) * p, axis=-1)
        return entropy_term - cross
    safe_q = np.where(support, q_values, 1.0)
    terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(safe_q)), 0.0)
    result = terms.sum(axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def _log_prob(x: Tensor, flags: Flags, where: str) -> Tensor:
    if np.any(x.data < PROB_FLOOR) or np.any(x.data > 1.0 - PROB_FLOOR):
        logger.warning("Clamped probabilities in %s to [%s, 1 - %s]", where, PROB_FLOOR, PROB_FLOOR)
        if flags is not None:
            flags.add(f"clamped:{where}")
        x = tc.clip(x, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return tc.log(x)


def _log_one_minus(x: Tensor, flags: Flags, where: str) -> Tensor:
    return _log_prob(1.0 - x, flags, where)


def loss_D_enc(
    real_out: DiscriminatorOutput,
    fake_out: DiscriminatorOutput,
    anchors: Anchors,
    convention: Convention = "realness",
    flags: Flags = None,
) -> Tensor:
    """Encoder loss: KL to the anchors plus the scalar log terms."""
    kl_real = tc.mean(kl_divergence(anchors.real.probs, real_out.perspective))
    kl_fake = tc.mean(kl_divergence(anchors.fake.probs, fake_out.perspective))
    log_real = tc.mean(_log_prob(real_out.scalar, flags, "D(x)"))
    log_fake = tc.mean(_log_one_minus(fake_out.scalar, flags, "1-D(G(x))"))
    if convention == "verbatim":
        return -(kl_real + log_real) - (kl_fake + log_fake)
    if convention == "realness":
        return (kl_real - log_real) + (kl_fake - log_fake)
    raise ConfigurationError(f"unknown convention {convention!r}")


def loss_D_dec(real_map: Tensor, fake_map: Tensor, flags: Flags = None) -> Tensor:
    """Per-pixel decoder loss, averaged over pixels and batch."""
    if real_map.shape != fake_map.shape:
        raise DimensionError(f"decision maps differ in shape: {real_map.shape} vs {fake_map.shape}")
    return -tc.mean(_log_prob(real_map, flags, "D_dec(x)")) - tc.mean(_log_one_minus(fake_map, flags, "1-D_dec(G(x))"))


def loss_D_dec_levels(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput, flags: Flags = None) -> Tensor:
    """Decoder loss on the final map, averaged with any intermediate level maps."""
    pairs = [(real_out.pixel_map, fake_out.pixel_map), *zip(real_out.level_maps, fake_out.level_maps)]
    total = loss_D_dec(*pairs[0], flags=flags)
    for real_map, fake_map in pairs[1:]:
        total = total + loss_D_dec(real_map, fake_map, flags=flags)
    return total * (1.0 / len(pairs))


def pixel_term(fake_out: DiscriminatorOutput, flags: Flags = None) -> Tensor:
    maps = [fake_out.pixel_map, *fake_out.level_maps]
    total = -tc.mean(_log_prob(maps[0], flags, "D_dec(G(x))"))
    for level_map in maps[1:]:
        total = total - tc.mean(_log_prob(level_map, flags, "D_dec(G(x))"))
    return total * (1.0 / len(maps))


def loss_adv_G(
    fake_out: DiscriminatorOutput,
    anchors: Anchors,
    convention: Convention = "realness",
    *,
    use_decoder: bool = True,
    flags: Flags = None,
) -> Tensor:
    """Generator adversarial loss; the pixel term is added when the decoder map is used."""
    if convention == "verbatim":
        kl_fake = tc.mean(kl_divergence(anchors.fake.probs, fake_out.perspective))
        loss = -(kl_fake + tc.mean(_log_one_minus(fake_out.scalar, flags, "1-D(G(x))")))
    elif convention == "realness":
        kl_real = tc.mean(kl_divergence(anchors.real.probs, fake_out.perspective))
        loss = kl_real - tc.mean(_log_prob(fake_out.scalar, flags, "D(G(x))"))
    else:
        raise ConfigurationError(f"unknown convention {convention!r}")
    if use_decoder and fake_out.pixel_map is not None:
        loss = loss + pixel_term(fake_out, flags)
    return loss


class SurrogateFeatures(Module):
    """Frozen, seeded perceptual extractor: three stride-2 conv stages with leaky ReLU."""

    def __init__(self, seed: int = SURROGATE_SEED, slope: float = 0.2) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.slope = slope
        self.stages: list[Conv2d] = []
        previous = 1
        for width in SURROGATE_WIDTHS:
            self.stages.append(Conv2d(previous, width, rng, kernel=3, stride=2, padding=1))
            previous = width
        for _, parameter in self.named_parameters():
            parameter.requires_grad = False

    def __call__(self, images: Tensor) -> Tensor:
        h = images
        for conv in self.stages:
            h = tc.leaky_relu(conv(h), self.slope)
        return h

    def pooled(self, images: np.ndarray) -> np.ndarray:
        """Globally average-pooled 32-vectors for a stack of 2D images."""
        images = np.asarray(images)
        batch = images.reshape(-1, 1, *images.shape[-2:])
        return self(Tensor(batch)).data.mean(axis=(2, 3)).astype(np.float64)


def _as_images(x: Tensor) -> Tensor:
    return tc.reshape(x, (-1, 1, x.shape[-2], x.shape[-1]))


def loss_fmse(x_true: np.ndarray | Tensor, x_rec: Tensor) -> Tensor:
    """Half the per-bin mean squared modulus of the spectral difference."""
    truth = x_true.data if isinstance(x_true, Tensor) else np.asarray(x_true)
    if truth.shape != x_rec.shape:
        raise DimensionError(f"content loss shapes differ: {truth.shape} vs {x_rec.shape}")
    spectral = fft2c(x_rec.data.astype(np.float64) - truth)
    count = spectral.size
    value = 0.5 * float(np.mean(np.abs(spectral) ** 2))

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (float(g) * ifft2c(spectral).real / count,)

    return tc.custom_op("fmse", (x_rec,), np.asarray(value, dtype=x_rec.data.dtype), grad_fn)


def loss_vgg(x_true: np.ndarray | Tensor, x_rec: Tensor, surrogate: SurrogateFeatures) -> Tensor:
    truth = x_true if isinstance(x_true, Tensor) else Tensor(x_true)
    if truth.shape != x_rec.shape:
        raise DimensionError(f"content loss shapes differ: {truth.shape} vs {x_rec.shape}")
    target = surrogate(_as_images(truth)).data
    return 0.5 * tc.mean(tc.square(surrogate(_as_images(x_rec)) - target))


def loss_content(
    x_true: np.ndarray | Tensor, x_rec: Tensor, surrogate: SurrogateFeatures
) -> tuple[Tensor, Tensor]:
    return loss_fmse(x_true, x_rec), loss_vgg(x_true, x_rec, surrogate)


def loss_total(components: Mapping[str, float | Tensor], weights: LossWeights) -> float | Tensor:
    """alpha * fmse + beta * vgg + adv."""
    return weights.alpha * components["fmse"] + weights.beta * components["vgg"] + components["adv"]


def _logit(scalar: Tensor) -> Tensor:
    return tc.log(scalar) - tc.log(1.0 - scalar)


def loss_tal(
    scalar_real: Tensor,
    scalar_fake: Tensor,
    objective: ScalarObjective = "standard",
    *,
    logit_real: Tensor | None = None,
    logit_fake: Tensor | None = None,
    flags: Flags = None,
) -> tuple[Tensor, Tensor]:
    """Scalar-head-only losses (d_loss, g_loss); no KL and no per-pixel term."""
    if objective == "standard":
        d_loss = -tc.mean(_log_prob(scalar_real, flags, "D(x)")) - tc.mean(
            _log_one_minus(scalar_fake, flags, "1-D(G(x))")
        )
        g_loss = -tc.mean(_log_prob(scalar_fake, flags, "D(G(x))"))
        return d_loss, g_loss
    if objective == "lsgan":
        d_loss = 0.5 * tc.mean(tc.square(scalar_real - 1.0)) + 0.5 * tc.mean(tc.square(scalar_fake))
        g_loss = 0.5 * tc.mean(tc.square(scalar_fake - 1.0))
        return d_loss, g_loss
    critic_real = logit_real if logit_real is not None else _logit(scalar_real)
    critic_fake = logit_fake if logit_fake is not None else _logit(scalar_fake)
    if objective == "wgan":
        return tc.mean(critic_fake) - tc.mean(critic_real), -tc.mean(critic_fake)
    if objective == "hinge":
        d_loss = tc.mean(tc.relu(1.0 - critic_real)) + tc.mean(tc.relu(1.0 + critic_fake))
        return d_loss, -tc.mean(critic_fake)
    raise ConfigurationError(f"unknown scalar objective {objective!r}")
