"""Ablation grids, the k-space noise study and the context feature-diversity study."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import reconstruct_tv
from .errors import ConfigurationError
from .generator import Generator
from .metrics import (
    REFERENCE_DIVERSITY,
    MetricReport,
    estimate_noise_level,
    evaluate_volumes,
    feature_cosine_diversity,
    mean_psnr,
    psnr,
    to_unit_range,
)
from .mrisim import NOISE_LEVELS, degrade, degrade_window
from .schemas import AblationSwitches, ContextKind, TrainConfig
from .tensorcore import Tensor
from .trainlab import LabDataset, RunHooks, TrainResult, evaluation_set, reconstruct_windows, train_hpalf

logger = logging.getLogger("hpalf")

RANGE_NOTE = "# metrics computed on images mapped from [-1, 1] to [0, 1]"
ABLATION_HEADER = ["label", "n_slices", "outcomes", "psnr", "ssim", "ffd", "psim_lite", "best_epoch", "split", "error"]
TEST_SEED_OFFSET = 2_000_000


@dataclass(frozen=True)
class AblationCell:
    switches: AblationSwitches
    n_slices: int | None = None
    outcomes: int | None = None

    def label(self, config: TrainConfig) -> str:
        return f"{self.switches.label} | {self.n_slices or config.n_slices} slices | K={self.outcomes or config.outcomes}"

    def configure(self, config: TrainConfig) -> TrainConfig:
        update = {}
        if self.n_slices is not None:
            update["n_slices"] = self.n_slices
        if self.outcomes is not None:
            update["outcomes"] = self.outcomes
        return TrainConfig(**{**config.model_dump(), **update}) if update else config


def component_grid() -> list[AblationCell]:
    """HP-ALF, without MPD, without GLC, without CAL, with TAL."""
    return [
        AblationCell(AblationSwitches()),
        AblationCell(AblationSwitches(mpd=False)),
        AblationCell(AblationSwitches(glc=False)),
        AblationCell(AblationSwitches(cal="none")),
        AblationCell(AblationSwitches(tal=True)),
    ]


def loss_grid() -> list[AblationCell]:
    """HP-ALF against the runs without each content term."""
    return [
        AblationCell(AblationSwitches()),
        AblationCell(AblationSwitches(fmse=False)),
        AblationCell(AblationSwitches(vgg=False)),
    ]


def context_grid() -> list[AblationCell]:
    return [AblationCell(AblationSwitches(cal=kind)) for kind in ("biconvlstm", "3dcnn", "2dcnn", "none")]


def slice_grid(counts: Iterable[int] = (3, 4, 5, 6, 7)) -> list[AblationCell]:
    return [AblationCell(AblationSwitches(), n_slices=n) for n in counts]


def outcome_grid(counts: Iterable[int] = (2, 5, 10, 15, 20)) -> list[AblationCell]:
    return [AblationCell(AblationSwitches(), outcomes=k) for k in counts]


def objective_grid() -> list[AblationCell]:
    return [AblationCell(AblationSwitches(tal=True, objective=o)) for o in ("standard", "wgan", "hinge", "lsgan")]


GRIDS = {
    "components": component_grid,
    "losses": loss_grid,
    "context": context_grid,
    "slices": slice_grid,
    "outcomes": outcome_grid,
    "objectives": objective_grid,
}


def evaluate_generator(generator: Generator, dataset: LabDataset, config: TrainConfig) -> MetricReport:
    """Center-slice metrics of a trained generator on the test split."""
    test = evaluation_set(dataset.windows("test", config.n_slices), dataset.mask, config.noise, config.seed + TEST_SEED_OFFSET)
    reconstruction = reconstruct_windows(generator, test.zero_filled, config.batch_size)
    return evaluate_volumes(test.centers, reconstruction[:, config.n_slices // 2])


@dataclass
class AblationRow:
    label: str
    n_slices: int
    outcomes: int
    report: MetricReport | None
    best_epoch: int | None
    split: str
    error: str = ""
    run_id: int | None = None

    def values(self) -> list[str]:
        if self.report is None:
            metrics = ["", "", "", ""]
        else:
            r = self.report
            metrics = [format(v, ".10g") for v in (r.psnr, r.ssim, r.ffd, r.psim_lite)]
        epoch = "" if self.best_epoch is None else str(self.best_epoch)
        return [self.label, str(self.n_slices), str(self.outcomes), *metrics, epoch, self.split, self.error]


def run_ablation(
    grid: Sequence[AblationCell],
    config: TrainConfig,
    dataset: LabDataset,
    *,
    out_csv: str | Path | None = None,
    run_dir: str | Path | None = None,
    hooks: RunHooks | None = None,
) -> list[AblationRow]:
    """Train and score every cell on the same split; a failing cell is recorded and the grid continues."""
    if not grid:
        raise ConfigurationError("ablation grid is empty")
    split = dataset.split.fingerprint()
    rows: list[AblationRow] = []
    for index, cell in enumerate(grid):
        label = cell.label(config)
        logger.info("Ablation cell %s/%s: %s", index + 1, len(grid), label)
        try:
            cell_config = cell.configure(config)
            result: TrainResult = train_hpalf(
                cell_config, cell.switches, dataset, run_dir=run_dir, name=f"cell{index:02d}", hooks=hooks, tv_baseline=False
            )
            report = evaluate_generator(result.generator, dataset, cell_config)
            rows.append(
                AblationRow(label, cell_config.n_slices, cell_config.outcomes, report, result.best_epoch, split, run_id=result.run_id)
            )
        except Exception as exc:
            logger.exception("Ablation cell %s failed", label)
            n_slices, outcomes = cell.n_slices or config.n_slices, cell.outcomes or config.outcomes
            rows.append(AblationRow(label, n_slices, outcomes, None, None, split, error=str(exc)))
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(RANGE_NOTE + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow(row.values())
    return path


def read_metric_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(line for line in handle if not line.startswith("#")))


@dataclass(frozen=True)
class NoiseRow:
    noise: float
    zero_fill_psnr: float
    tv_psnr: float
    hpalf_psnr: float | None
    zero_fill_residual: float
    tv_residual: float
    hpalf_residual: float | None


def noise_study(
    config: TrainConfig,
    dataset: LabDataset,
    *,
    generator: Generator | None = None,
    levels: Sequence[float] = NOISE_LEVELS,
    windows: int = 4,
    tv_iterations: int = 100,
) -> list[NoiseRow]:
    """PSNR and residual noise of each reconstruction as k-space noise grows."""
    test_windows = dataset.windows("test", config.n_slices)[:windows]
    center = config.n_slices // 2
    rows = []
    for level in levels:
        zf_scores, tv_scores, net_scores = [], [], []
        zf_noise, tv_noise, net_noise = [], [], []
        for index, window in enumerate(test_windows):
            seed = config.seed + TEST_SEED_OFFSET + index
            truth = window.slices[center]
            sample, zero_filled = degrade(truth, dataset.mask, level, seed * 1009 + center)
            tv_image = np.clip(reconstruct_tv(sample, config.loss_weights().lambda_fidelity, tv_iterations).image, -1.0, 1.0)
            for image, scores, noise in ((zero_filled, zf_scores, zf_noise), (tv_image, tv_scores, tv_noise)):
                scores.append(psnr(to_unit_range(truth), to_unit_range(image)))
                noise.append(estimate_noise_level(to_unit_range(image)).sigma)
            if generator is not None:
                _, filled = degrade_window(window.slices, dataset.mask, level, seed)
                rec = reconstruct_windows(generator, filled[None], 1)[0, center]
                net_scores.append(psnr(to_unit_range(truth), to_unit_range(rec)))
                net_noise.append(estimate_noise_level(to_unit_range(rec)).sigma)
        row = NoiseRow(
            noise=level,
            zero_fill_psnr=mean_psnr(zf_scores),
            tv_psnr=mean_psnr(tv_scores),
            hpalf_psnr=mean_psnr(net_scores) if net_scores else None,
            zero_fill_residual=float(np.mean(zf_noise)),
            tv_residual=float(np.mean(tv_noise)),
            hpalf_residual=float(np.mean(net_noise)) if net_noise else None,
        )
        logger.info(
            "Noise %.0f%%: zero-fill %.2f dB, TV %.2f dB, HP-ALF %s",
            100 * level, row.zero_fill_psnr, row.tv_psnr, "n/a" if row.hpalf_psnr is None else f"{row.hpalf_psnr:.2f} dB",
        )
        rows.append(row)
    return rows


def write_noise_csv(rows: Sequence[NoiseRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(NoiseRow.__dataclass_fields__)
    with path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(RANGE_NOTE + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow(["" if getattr(row, f) is None else format(getattr(row, f), ".10g") for f in fields])
    return path


def context_diversity(generator: Generator, zero_filled: np.ndarray) -> float | None:
    """Mean pairwise cosine of the context block's channel maps on the center slice of one window."""
    if generator.context is None:
        return None
    generator.eval()
    generator(Tensor(zero_filled[None]))
    generator.train()
    hidden = generator.context_features()
    frame = hidden[0, hidden.shape[1] // 2] if hidden.shape[1] > 1 else hidden[0, 0]
    return feature_cosine_diversity(list(frame)).mean_cosine


def feature_diversity_study(
    config: TrainConfig,
    dataset: LabDataset,
    generators: dict[ContextKind, Generator] | None = None,
    kinds: Sequence[ContextKind] = ("biconvlstm", "3dcnn", "2dcnn"),
) -> dict[str, float]:
    """Cosine diversity per context block, logged beside fixed reference values."""
    window = dataset.windows("test", config.n_slices)[0]
    _, filled = degrade_window(window.slices, dataset.mask, config.noise, config.seed + TEST_SEED_OFFSET)
    results: dict[str, float] = {}
    for kind in kinds:
        generator = (generators or {}).get(kind) or Generator(
            config.generator_config(kind), np.random.default_rng(config.seed)
        )
        try:
            value = context_diversity(generator, filled)
        except ConfigurationError as exc:
            logger.warning("Skipping context %s: %s", kind, exc)
            continue
        if value is None or math.isnan(value):
            continue
        results[kind] = value
        logger.info("Context %s: mean feature cosine %.3f (reference %.2f)", kind, value, REFERENCE_DIVERSITY[kind])
    return results
