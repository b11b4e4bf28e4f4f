"""Dataset preparation and the alternating generator/discriminator training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import tensorcore as tc
from .baselines import reconstruct_tv
from .checkpoint import save_checkpoint
from .config import get_settings
from .discriminator import Discriminator, DiscriminatorOutput
from .errors import ConfigurationError, NonFiniteError, TrainingAbortedError
from .generator import Generator
from .metrics import mean_psnr, psnr, ssim, to_unit_range
from .mrisim import SliceVolume, SliceWindow, degrade, degrade_window, gen_phantom_volume, make_mask, prepare_sequences
from .objectives import (
    Anchors,
    SurrogateFeatures,
    build_anchors,
    loss_adv_G,
    loss_fmse,
    loss_vgg,
    loss_D_dec_levels,
    loss_D_enc,
    loss_tal,
    loss_total,
    pixel_term,
)
from .optim import Adam, step_lr
from .schemas import AblationSwitches, TrainConfig
from .tensorcore import Tensor

logger = logging.getLogger("hpalf")

SPLIT_FRACTIONS = (0.7, 0.2, 0.1)
MIN_VOLUMES = 10
VALIDATION_SEED_OFFSET = 1_000_000
TV_PREVIEW_WINDOWS = 4
TV_ITERATIONS = 100


# dataset -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def fingerprint(self) -> str:
        return "|".join(",".join(map(str, part)) for part in (self.train, self.val, self.test))


def split_dataset(volumes: Sequence[SliceVolume], seed: int) -> DatasetSplit:
    """70/20/10 split by volume index, deterministic under ``seed``."""
    count = len(volumes)
    if count < MIN_VOLUMES:
        raise ConfigurationError(f"need at least {MIN_VOLUMES} volumes to split, got {count}")
    n_val = math.floor(SPLIT_FRACTIONS[1] * count + 0.5)
    n_test = math.floor(SPLIT_FRACTIONS[2] * count + 0.5)
    order = np.random.default_rng(seed).permutation(count)
    n_train = count - n_val - n_test
    return DatasetSplit(
        train=tuple(sorted(int(i) for i in order[:n_train])),
        val=tuple(sorted(int(i) for i in order[n_train : n_train + n_val])),
        test=tuple(sorted(int(i) for i in order[n_train + n_val :])),
    )


@dataclass
class LabDataset:
    """Volumes, their split and the fixed undersampling mask shared by every run on them."""

    volumes: list[SliceVolume]
    split: DatasetSplit
    mask: np.ndarray

    def windows(self, part: str, n_slices: int) -> list[SliceWindow]:
        indices = getattr(self.split, part)
        return [w for i in indices for w in prepare_sequences(self.volumes[i], n_slices)]


def build_dataset(config: TrainConfig, volumes: Sequence[SliceVolume] | None = None) -> LabDataset:
    """Phantom volumes (unless given), their split and the mask for ``config``."""
    if volumes is None:
        volumes = [
            gen_phantom_volume(
                config.volume_depth,
                config.image_size,
                config.image_size,
                config.phantom_complexity,
                seed=config.seed * 1000 + index,
            )
            for index in range(config.n_volumes)
        ]
    mask = make_mask(config.mask, config.image_size, config.image_size)
    return LabDataset(volumes=list(volumes), split=split_dataset(volumes, config.seed), mask=mask)


@dataclass
class Batch:
    seed: int
    truth: np.ndarray
    zero_filled: np.ndarray


def make_batch(windows: Sequence[SliceWindow], mask: np.ndarray, noise: float, seed: int) -> Batch:
    truth, filled = [], []
    for offset, window in enumerate(windows):
        _, zf = degrade_window(window.slices, mask, noise, seed * 64 + offset)
        truth.append(window.slices)
        filled.append(zf)
    return Batch(seed=seed, truth=np.stack(truth), zero_filled=np.stack(filled))


def batch_seed(seed: int, epoch: int, index: int) -> int:
    return seed * 1_000_003 + epoch * 10_007 + index


def epoch_batches(
    windows: Sequence[SliceWindow], config: TrainConfig, mask: np.ndarray, epoch: int
) -> list[tuple[int, list[SliceWindow]]]:
    order = np.random.default_rng([config.seed, epoch]).permutation(len(windows))
    return [
        (batch_seed(config.seed, epoch, b), [windows[i] for i in order[start : start + config.batch_size]])
        for b, start in enumerate(range(0, len(order), config.batch_size))
    ]


def produce_batches(
    plan: Sequence[tuple[int, list[SliceWindow]]], mask: np.ndarray, noise: float
) -> Iterator[Batch]:
    """Degrade batches in order; with determinism off a thread pool prefetches a bounded queue."""
    settings = get_settings()
    if settings.deterministic or settings.threads <= 1:
        for seed, windows in plan:
            yield make_batch(windows, mask, noise, seed)
        return
    depth = 2 * settings.threads
    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        pending: deque = deque()
        for seed, windows in plan:
            pending.append(pool.submit(make_batch, windows, mask, noise, seed))
            if len(pending) >= depth:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


@dataclass
class EvaluationSet:
    truth: np.ndarray
    zero_filled: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return self.truth[:, self.truth.shape[1] // 2]

    @property
    def zero_filled_centers(self) -> np.ndarray:
        return self.zero_filled[:, self.zero_filled.shape[1] // 2]


def evaluation_set(windows: Sequence[SliceWindow], mask: np.ndarray, noise: float, seed: int) -> EvaluationSet:
    if not windows:
        raise ConfigurationError("no usable windows to evaluate on")
    batch = make_batch(windows, mask, noise, seed + VALIDATION_SEED_OFFSET)
    return EvaluationSet(truth=batch.truth, zero_filled=batch.zero_filled)


# losses ------------------------------------------------------------------


@dataclass
class StepLosses:
    total: float
    components: dict[str, float]


class LossPlan:
    """Which adversarial terms a set of switches enables."""

    def __init__(self, config: TrainConfig, switches: AblationSwitches) -> None:
        self.config = config
        self.switches = switches
        self.anchors: Anchors = build_anchors(config.outcomes, config.anchor_shape)
        self.weights = config.loss_weights()
        self.decode = switches.glc and not switches.tal

    def discriminator(
        self, real: DiscriminatorOutput, fake: DiscriminatorOutput, flags: set[str]
    ) -> tuple[Tensor, dict[str, Tensor]]:
        s = self.switches
        parts: dict[str, Tensor] = {}
        if s.tal:
            parts["d_scalar"], _ = loss_tal(
                real.scalar, fake.scalar, s.objective, logit_real=real.scalar_logit, logit_fake=fake.scalar_logit, flags=flags
            )
        elif s.mpd:
            parts["d_kl_enc"] = loss_D_enc(real, fake, self.anchors, self.config.convention, flags)
        if self.decode:
            parts["d_dec"] = loss_D_dec_levels(real, fake, flags)
        return _sum(parts.values()), parts

    def content(
        self, truth: np.ndarray, reconstruction: Tensor, surrogate: SurrogateFeatures
    ) -> tuple[dict[str, float | Tensor], set[str]]:
        """Content terms for ``loss_total``; a switched-off term enters as 0."""
        s = self.switches
        fmse = loss_fmse(truth, reconstruction) if s.fmse else 0.0
        vgg = loss_vgg(truth, reconstruction, surrogate) if s.vgg else 0.0
        used = {name for name, on in (("g_fmse", s.fmse), ("g_vgg", s.vgg)) if on}
        return {"fmse": fmse, "vgg": vgg}, used

    def generator_adversarial(self, fake: DiscriminatorOutput, flags: set[str]) -> tuple[Tensor, dict[str, Tensor]]:
        s = self.switches
        parts: dict[str, Tensor] = {}
        if s.tal:
            # the discriminator half is unused; the scalar arguments only feed the generator half
            _, parts["g_adv_scalar"] = loss_tal(
                fake.scalar, fake.scalar, s.objective, logit_real=fake.scalar_logit, logit_fake=fake.scalar_logit, flags=flags
            )
        elif s.mpd:
            parts["g_adv_kl"] = loss_adv_G(fake, self.anchors, self.config.convention, use_decoder=False, flags=flags)
        if self.decode:
            parts["g_adv_pixel"] = pixel_term(fake, flags)
        return _sum(parts.values()), parts


def _sum(values) -> Tensor:
    values = list(values)
    total = values[0]
    for value in values[1:]:
        total = total + value
    return total


def _center_images(x: Tensor) -> Tensor:
    batch, n, height, width = x.shape
    return tc.reshape(x[:, n // 2], (batch, 1, height, width))


# training ----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    d_loss: float
    g_loss: float
    val_psnr: float
    val_ssim: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [format(v, ".10g") for v in (self.d_loss, self.g_loss, self.val_psnr, self.val_ssim, self.lr)]


HISTORY_HEADER = ["epoch", "d_loss", "g_loss", "val_psnr", "val_ssim", "lr"]


class RunHooks(Protocol):
    def start(self, name: str, config: TrainConfig, switches: AblationSwitches) -> int | None: ...

    def epoch(self, run_id: int | None, record: EpochRecord) -> None: ...

    def finish(self, run_id: int | None, result: "TrainResult") -> None: ...

    def fail(self, run_id: int | None, error: BaseException) -> None: ...


@dataclass
class TrainResult:
    name: str
    history: list[EpochRecord]
    best_val_psnr: float
    best_epoch: int
    zero_fill_psnr: float
    tv_psnr: float | None
    steps: int
    checkpoint_path: Path | None
    history_path: Path
    components: set[str] = field(default_factory=set)
    flags: set[str] = field(default_factory=set)
    decision_error_correlation: float | None = None
    generator: Generator | None = field(default=None, repr=False)
    discriminator: Discriminator | None = field(default=None, repr=False)
    run_id: int | None = None


def checkpoint_config(config: TrainConfig, switches: AblationSwitches) -> dict[str, str]:
    """Flat key=value view of a run; every value is JSON text."""
    flat = {f"config.{k}": json.dumps(v) for k, v in config.model_dump(mode="json").items()}
    flat.update({f"switches.{k}": json.dumps(v) for k, v in switches.model_dump(mode="json").items()})
    return flat


def configs_from_checkpoint(values: dict[str, str]) -> tuple[TrainConfig, AblationSwitches]:
    config = {k.split(".", 1)[1]: json.loads(v) for k, v in values.items() if k.startswith("config.")}
    switches = {k.split(".", 1)[1]: json.loads(v) for k, v in values.items() if k.startswith("switches.")}
    return TrainConfig(**config), AblationSwitches(**switches)


def write_history(path: Path, history: Sequence[EpochRecord]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for record in history:
            writer.writerow(record.row())
    return path


def reconstruct_windows(generator: Generator, zero_filled: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Run the generator in eval mode over (N, n, H, W) zero-filled windows."""
    generator.eval()
    outputs = [generator(Tensor(zero_filled[i : i + batch_size])).data for i in range(0, len(zero_filled), batch_size)]
    generator.train()
    return np.concatenate(outputs).astype(np.float64)


def score_centers(truth: np.ndarray, reconstruction: np.ndarray) -> tuple[float, float]:
    """Mean PSNR and SSIM over (N, H, W) center slices mapped to [0, 1]."""
    t, r = to_unit_range(truth), to_unit_range(reconstruction)
    return mean_psnr([psnr(a, b) for a, b in zip(t, r)]), float(np.mean([ssim(a, b) for a, b in zip(t, r)]))


def decision_error_correlation(
    discriminator: Discriminator, truth: np.ndarray, reconstruction: np.ndarray
) -> float | None:
    """Pearson correlation of the mean fake-ness map (1 - D_dec) with the mean absolute error map."""
    discriminator.eval()
    images = reconstruction[:, None]
    maps = [discriminator(Tensor(images[i : i + 4])).pixel_map.data for i in range(0, len(images), 4)]
    discriminator.train()
    fakeness = 1.0 - np.concatenate(maps).mean(axis=0)
    error = np.abs(reconstruction - truth).mean(axis=0)
    if np.std(fakeness) == 0 or np.std(error) == 0:
        return None
    return float(np.corrcoef(fakeness.ravel(), error.ravel())[0, 1])


def _dump_batch(run_dir: Path, batch: Batch) -> Path:
    path = run_dir / f"abort_batch_{batch.seed}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, truth=batch.truth, zero_filled=batch.zero_filled, seed=batch.seed)
    return path


def _check_loss(value: Tensor, batch: Batch, run_dir: Path, where: str) -> None:
    if not np.all(np.isfinite(value.data)):
        dump = _dump_batch(run_dir, batch)
        raise TrainingAbortedError(f"non-finite {where}", batch_seed=batch.seed, dump_path=str(dump))


def _tv_preview(evaluation: EvaluationSet, mask: np.ndarray, config: TrainConfig) -> float | None:
    count = min(TV_PREVIEW_WINDOWS, len(evaluation.truth))
    values = []
    for i in range(count):
        sample, _ = degrade(evaluation.centers[i], mask, config.noise, config.seed + VALIDATION_SEED_OFFSET + i)
        image = reconstruct_tv(sample, config.loss_weights().lambda_fidelity, TV_ITERATIONS).image
        values.append(psnr(to_unit_range(evaluation.centers[i]), to_unit_range(np.clip(image, -1.0, 1.0))))
    return mean_psnr(values) if values else None


def train_hpalf(
    config: TrainConfig,
    switches: AblationSwitches | None = None,
    dataset: LabDataset | None = None,
    *,
    run_dir: str | Path | None = None,
    name: str | None = None,
    hooks: RunHooks | None = None,
    tv_baseline: bool = True,
) -> TrainResult:
    """Alternate discriminator and generator updates; keep the best validation-PSNR state."""
    switches = switches or AblationSwitches()
    dataset = dataset or build_dataset(config)
    name = name or f"{switches.label.replace(' ', '_').lower()}_s{config.n_slices}_k{config.outcomes}_seed{config.seed}"
    run_dir = Path(run_dir or get_settings().run_dir) / name
    run_id = hooks.start(name, config, switches) if hooks else None
    try:
        with tc.precision(get_settings().precision):
            result = _train(config, switches, dataset, run_dir, name, hooks, run_id, tv_baseline)
    except Exception as exc:
        if hooks:
            hooks.fail(run_id, exc)
        raise
    result.run_id = run_id
    if hooks:
        hooks.finish(run_id, result)
    return result


def _train(
    config: TrainConfig,
    switches: AblationSwitches,
    dataset: LabDataset,
    run_dir: Path,
    name: str,
    hooks: RunHooks | None,
    run_id: int | None,
    tv_baseline: bool,
) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    generator = Generator(config.generator_config(switches.cal), rng)
    discriminator = Discriminator(config.discriminator_config(switches), rng)
    surrogate = SurrogateFeatures()
    plan = LossPlan(config, switches)
    opt_g = Adam(generator.parameters(), config.lr)
    opt_d = Adam(discriminator.parameters(), config.lr)

    train_windows = dataset.windows("train", config.n_slices)
    if not train_windows:
        raise ConfigurationError("the training split has no usable slice windows")
    validation = evaluation_set(dataset.windows("val", config.n_slices), dataset.mask, config.noise, config.seed)
    zero_fill_psnr, _ = score_centers(validation.centers, validation.zero_filled_centers)
    tv_psnr = _tv_preview(validation, dataset.mask, config) if tv_baseline else None
    logger.info(
        "Run %s: %s train windows, %s validation windows, zero-fill PSNR %.3f dB, TV PSNR %s",
        name,
        len(train_windows),
        len(validation.truth),
        zero_fill_psnr,
        "n/a" if tv_psnr is None else f"{tv_psnr:.3f} dB",
    )

    history: list[EpochRecord] = []
    components: set[str] = set()
    flags: set[str] = set()
    best_psnr, best_epoch, since_best = -math.inf, -1, 0
    best_state: dict[str, np.ndarray] | None = None
    checkpoint_path: Path | None = None
    correlation: float | None = None
    steps = 0
    epoch = 0

    while epoch < config.max_epochs:
        lr = step_lr(config.lr, epoch, config.lr_halving_period)
        opt_g.lr = opt_d.lr = lr
        d_losses, g_losses = [], []
        plan_batches = epoch_batches(train_windows, config, dataset.mask, epoch)
        if config.max_steps is not None:
            plan_batches = plan_batches[: config.max_steps - steps]
        for batch in produce_batches(plan_batches, dataset.mask, config.noise):
            d_value, g_value = _train_step(
                batch, generator, discriminator, surrogate, plan, opt_g, opt_d, config, run_dir, components, flags
            )
            d_losses.append(d_value)
            g_losses.append(g_value)
            steps += 1

        reconstruction = reconstruct_windows(generator, validation.zero_filled, config.batch_size)
        centers = reconstruction[:, config.n_slices // 2]
        val_psnr, val_ssim = score_centers(validation.centers, centers)
        record = EpochRecord(epoch, float(np.mean(d_losses)), float(np.mean(g_losses)), val_psnr, val_ssim, lr)
        history.append(record)
        if hooks:
            hooks.epoch(run_id, record)
        logger.info(
            "Epoch %s: d_loss=%.4f g_loss=%.4f val_psnr=%.3f val_ssim=%.4f lr=%.2e",
            epoch, record.d_loss, record.g_loss, val_psnr, val_ssim, lr,
        )

        if val_psnr > best_psnr:
            best_psnr, best_epoch, since_best = val_psnr, epoch, 0
            best_state = {
                "generator": {k: v.copy() for k, v in generator.state_dict().items()},
                "discriminator": {k: v.copy() for k, v in discriminator.state_dict().items()},
            }
            checkpoint_path = save_checkpoint(
                run_dir / "best.hpck",
                {"generator": generator, "discriminator": discriminator},
                checkpoint_config(config, switches),
            )
            if plan.decode:
                correlation = decision_error_correlation(discriminator, validation.centers, centers)
        else:
            since_best += 1

        epoch += 1
        if since_best >= config.early_stop_patience:
            logger.info("Early stop after %s epochs without improvement", since_best)
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break

    if best_state is not None:
        generator.load_state_dict(best_state["generator"])
        discriminator.load_state_dict(best_state["discriminator"])
    if correlation is not None:
        logger.info("Decision-map / error correlation at best checkpoint: %.4f", correlation)
        if correlation < 0:
            logger.warning("Decision map is anti-correlated with the reconstruction error (%.4f)", correlation)

    history_path = write_history(run_dir / "history.csv", history)
    return TrainResult(
        name=name,
        history=history,
        best_val_psnr=best_psnr,
        best_epoch=best_epoch,
        zero_fill_psnr=zero_fill_psnr,
        tv_psnr=tv_psnr,
        steps=steps,
        checkpoint_path=checkpoint_path,
        history_path=history_path,
        components=components,
        flags=flags,
        decision_error_correlation=correlation,
        generator=generator,
        discriminator=discriminator,
    )


def _train_step(
    batch: Batch,
    generator: Generator,
    discriminator: Discriminator,
    surrogate: SurrogateFeatures,
    plan: LossPlan,
    opt_g: Adam,
    opt_d: Adam,
    config: TrainConfig,
    run_dir: Path,
    components: set[str],
    flags: set[str],
) -> tuple[float, float]:
    zero_filled = Tensor(batch.zero_filled)
    center = config.n_slices // 2
    real_images = Tensor(batch.truth[:, center : center + 1])
    try:
        d_value = 0.0
        for _ in range(config.d_steps_per_g):
            # no tape and frozen statistics: the generator step below is the only one that moves them
            with generator.frozen_buffers():
                fake_images = Tensor(generator(zero_filled).data[:, center : center + 1])
            with tc.Tape():
                real_out = discriminator(real_images, decode=plan.decode)
                fake_out = discriminator(fake_images, decode=plan.decode)
                d_loss, d_parts = plan.discriminator(real_out, fake_out, flags)
                _check_loss(d_loss, batch, run_dir, "discriminator loss")
                tc.backward(d_loss)
            opt_d.step()
            opt_d.zero_grad()
            d_value = d_loss.item()
            components.update(d_parts)

        with tc.Tape():
            reconstruction = generator(zero_filled)
            content, content_parts = plan.content(batch.truth, reconstruction, surrogate)
            fake_out = discriminator(_center_images(reconstruction), decode=plan.decode)
            adv, g_parts = plan.generator_adversarial(fake_out, flags)
            g_loss = loss_total({**content, "adv": adv}, plan.weights)
            _check_loss(g_loss, batch, run_dir, "generator loss")
            tc.backward(g_loss)
        opt_g.step()
        opt_g.zero_grad()
        discriminator.zero_grad()
        components.update({*content_parts, *g_parts})
        return d_value, g_loss.item()
    except (NonFiniteError, FloatingPointError) as exc:
        dump = _dump_batch(run_dir, batch)
        raise TrainingAbortedError(f"non-finite values during training: {exc}", batch_seed=batch.seed, dump_path=str(dump)) from exc
