"""Command-line entry points for the lab."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Sequence, TextIO

import numpy as np
from pydantic import ValidationError

from .config import get_settings
from .errors import ConfigurationError, HpalfError

logger = logging.getLogger("hpalf")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration")
    group.add_argument("--mask", choices=["g1d", "g2d", "p2d"], default="g1d")
    group.add_argument("--fraction", type=float, default=0.3)
    group.add_argument("--mask-seed", type=int, default=0)
    group.add_argument("--noise", type=float, default=0.0, help="k-space noise in percent of the peak magnitude")
    group.add_argument("--slices", type=int, default=5)
    group.add_argument("--outcomes", type=int, default=10)
    group.add_argument("--convention", choices=["verbatim", "realness"], default="realness")
    group.add_argument("--seed", type=int, default=0)
    group.add_argument("--width-mult", default="1/8")
    group.add_argument("--size", type=int, default=64)
    group.add_argument("--batch-size", type=int, default=4)
    group.add_argument("--lr", type=float, default=3e-4)
    group.add_argument("--epochs", type=int, default=100)
    group.add_argument("--steps", type=int, default=None)
    group.add_argument("--patience", type=int, default=50)
    group.add_argument("--volumes-count", type=int, default=20)
    group.add_argument("--depth", type=int, default=16)
    group.add_argument("--multilevel", action="store_true")
    group.add_argument("--volumes", type=Path, default=None, help="directory of HPVOL1 files instead of phantoms")


def _add_switch_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("ablation switches")
    group.add_argument("--no-mpd", action="store_true")
    group.add_argument("--no-glc", action="store_true")
    group.add_argument("--no-fmse", action="store_true")
    group.add_argument("--no-vgg", action="store_true")
    group.add_argument("--cal", choices=["biconvlstm", "2dcnn", "3dcnn", "none"], default="biconvlstm")
    group.add_argument("--tal", action="store_true")
    group.add_argument("--objective", choices=["standard", "wgan", "hinge", "lsgan"], default="standard")
    group.add_argument("--zero-outcomes", type=int, nargs="*", default=())


def _train_config(args: argparse.Namespace):
    from .schemas import MaskSpec, TrainConfig

    return TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr,
        early_stop_patience=args.patience,
        mask=MaskSpec(kind=args.mask, fraction=args.fraction, seed=args.mask_seed),
        noise=args.noise / 100.0,
        n_slices=args.slices,
        outcomes=args.outcomes,
        width_multiplier=args.width_mult,
        image_size=args.size,
        convention=args.convention,
        seed=args.seed,
        max_epochs=args.epochs,
        max_steps=args.steps,
        n_volumes=args.volumes_count,
        volume_depth=args.depth,
        multilevel=args.multilevel,
    )


def _switches(args: argparse.Namespace):
    from .schemas import AblationSwitches

    return AblationSwitches(
        mpd=not args.no_mpd,
        glc=not args.no_glc,
        cal=args.cal,
        tal=args.tal,
        objective=args.objective,
        zero_outcomes=tuple(args.zero_outcomes),
        fmse=not args.no_fmse,
        vgg=not args.no_vgg,
    )


def _dataset(args: argparse.Namespace, config):
    from .trainlab import build_dataset
    from .volume_io import load_volume

    volumes = None
    if args.volumes is not None:
        volumes = [load_volume(p) for p in sorted(args.volumes.glob("*.hpvol"))]
    return build_dataset(config, volumes)


def _hooks():
    settings = get_settings()
    if not settings.registry_enabled:
        return None
    from .db import Base, SessionLocal, engine
    from .run_service import RunRecorder

    Base.metadata.create_all(bind=engine)
    return RunRecorder(SessionLocal)


def cmd_phantom(args: argparse.Namespace) -> int:
    from .mrisim import gen_phantom_volume
    from .volume_io import write_volume

    for index in range(args.count):
        volume = gen_phantom_volume(args.depth, args.size, args.size, args.complexity, seed=args.seed + index)
        path = write_volume(args.out / f"phantom_{index:03d}.hpvol", volume.voxels)
        logger.info("Wrote %s", path)
    return 0


def cmd_mask(args: argparse.Namespace) -> int:
    from .mrisim import make_mask
    from .schemas import MaskSpec
    from .volume_io import write_pgm

    mask = make_mask(MaskSpec(kind=args.mask, fraction=args.fraction, seed=args.seed), args.size, args.size)
    write_pgm(args.out, mask, 0.0, 1.0)
    print(f"realised fraction {mask.mean():.4f} ({int(mask.sum())} of {mask.size} samples)")
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    from .mrisim import degrade_window, make_mask
    from .schemas import MaskSpec
    from .volume_io import load_volume, write_pgm, write_volume

    volume = load_volume(args.volume)
    mask = make_mask(MaskSpec(kind=args.mask, fraction=args.fraction, seed=args.mask_seed), volume.height, volume.width)
    _, filled = degrade_window(volume.voxels, mask, args.noise / 100.0, args.seed)
    write_volume(args.out, filled)
    if args.pgm is not None:
        write_pgm(args.pgm, filled[volume.depth // 2], -1.0, 1.0)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .trainlab import train_hpalf

    config = _train_config(args)
    result = train_hpalf(
        config, _switches(args), _dataset(args, config), run_dir=args.run_dir, name=args.name, hooks=_hooks()
    )
    print(
        f"{result.name}: best val PSNR {result.best_val_psnr:.3f} dB at epoch {result.best_epoch}, "
        f"zero-fill {result.zero_fill_psnr:.3f} dB, history {result.history_path}"
    )
    return 0


def _reconstruct_hpalf(voxels: np.ndarray, checkpoint_path: Path, noise: float, seed: int) -> np.ndarray:
    from .checkpoint import load_checkpoint, restore
    from .generator import Generator
    from .mrisim import degrade_window, make_mask
    from .trainlab import configs_from_checkpoint, reconstruct_windows

    checkpoint = load_checkpoint(checkpoint_path)
    config, switches = configs_from_checkpoint(checkpoint.config)
    generator = Generator(config.generator_config(switches.cal), np.random.default_rng(config.seed))
    restore(generator, checkpoint, "generator")
    mask = make_mask(config.mask, voxels.shape[1], voxels.shape[2])
    _, filled = degrade_window(voxels, mask, noise, seed)
    n, depth = config.n_slices, voxels.shape[0]
    output = np.empty_like(filled)
    for z in range(depth):
        start = min(max(z - n // 2, 0), depth - n)
        output[z] = reconstruct_windows(generator, filled[None, start : start + n], 1)[0, z - start]
    return output


def cmd_reconstruct(args: argparse.Namespace) -> int:
    from .baselines import reconstruct_tv
    from .mrisim import degrade, make_mask
    from .schemas import MaskSpec
    from .volume_io import load_volume, write_volume

    voxels = load_volume(args.volume).voxels
    noise = args.noise / 100.0
    if args.method == "hpalf":
        if args.checkpoint is None:
            raise ConfigurationError("--checkpoint is required for the hpalf method")
        output = _reconstruct_hpalf(voxels, args.checkpoint, noise, args.seed)
    else:
        mask = make_mask(MaskSpec(kind=args.mask, fraction=args.fraction, seed=args.mask_seed), *voxels.shape[1:])
        output = np.empty_like(voxels)
        for z, image in enumerate(voxels):
            sample, zero_filled = degrade(image, mask, noise, args.seed * 1009 + z)
            if args.method == "tv":
                zero_filled = np.clip(reconstruct_tv(sample, args.lam, args.iterations).image, -1.0, 1.0)
            output[z] = zero_filled
    write_volume(args.out, output)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .ablation import RANGE_NOTE
    from .metrics import evaluate_volumes
    from .volume_io import load_volume

    reference = load_volume(args.reference).voxels
    reconstruction = load_volume(args.reconstruction, normalize=False).voxels
    report = evaluate_volumes(reference, np.clip(reconstruction, -1.0, 1.0))
    with _output(args.out) as handle:
        handle.write(RANGE_NOTE + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["slice", "psnr", "ssim", "psim_lite", "ffd"])
        for row in report.per_slice:
            writer.writerow([row.index, format(row.psnr, ".10g"), format(row.ssim, ".10g"), format(row.psim_lite, ".10g"), ""])
        writer.writerow(
            ["summary", format(report.psnr, ".10g"), format(report.ssim, ".10g"), format(report.psim_lite, ".10g"), format(report.ffd, ".10g")]
        )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from .ablation import GRIDS, run_ablation

    config = _train_config(args)
    hooks = _hooks()
    rows = run_ablation(GRIDS[args.grid](), config, _dataset(args, config), out_csv=args.out, run_dir=args.run_dir, hooks=hooks)
    if hooks is not None:
        hooks.ablation_rows(args.name or args.grid, rows)
    failed = sum(1 for row in rows if row.error)
    print(f"{len(rows)} cells written to {args.out} ({failed} failed)")
    return 0


def cmd_verify_theory(args: argparse.Namespace) -> int:
    from .tensorcore import precision
    from .theory import verify_theory, write_theory_csv

    with precision("float64"):
        rows = verify_theory(args.worlds, seed=args.seed, n_x=args.n_x, outcomes=args.outcomes, step=args.step)
    write_theory_csv(rows, args.out)
    failures = [row for row in rows if row.passed == "fail"]
    print(f"{len(rows)} rows written to {args.out}; {len(failures)} failing")
    return 1 if failures else 0


def cmd_noise_study(args: argparse.Namespace) -> int:
    from .ablation import noise_study, write_noise_csv
    from .checkpoint import load_checkpoint, restore
    from .generator import Generator

    config = _train_config(args)
    generator = None
    if args.checkpoint is not None:
        from .trainlab import configs_from_checkpoint

        checkpoint = load_checkpoint(args.checkpoint)
        config, switches = configs_from_checkpoint(checkpoint.config)
        generator = Generator(config.generator_config(switches.cal), np.random.default_rng(config.seed))
        restore(generator, checkpoint, "generator")
    rows = noise_study(config, _dataset(args, config), generator=generator)
    write_noise_csv(rows, args.out)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("hpalf.main:app", host=args.host, port=args.port)
    return 0


@contextmanager
def _output(path: Path | None) -> Iterator[TextIO]:
    if path is None:
        yield sys.stdout
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        yield handle


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpalf", description="HP-ALF compressed-sensing MRI lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic phantom volumes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--complexity", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("mask", help="write an undersampling mask as PGM")
    p.add_argument("--mask", choices=["g1d", "g2d", "p2d"], default="g1d")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("degrade", help="undersample a volume and write the zero-filled result")
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--mask", choices=["g1d", "g2d", "p2d"], default="g1d")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pgm", type=Path, default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train HP-ALF on phantoms or ingested volumes")
    _add_config_flags(p)
    _add_switch_flags(p)
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--name", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a volume with HP-ALF, zero filling or TV")
    p.add_argument("--method", choices=["hpalf", "zero-fill", "tv"], default="zero-fill")
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--mask", choices=["g1d", "g2d", "p2d"], default="g1d")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="per-slice metrics between two volumes")
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--reconstruction", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_config_flags(p)
    p.add_argument("--grid", choices=["components", "losses", "context", "slices", "outcomes", "objectives"], default="components")
    p.add_argument("--name", default=None)
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify-theory", help="numeric checks of the optimal-discriminator results")
    p.add_argument("--worlds", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-x", type=int, default=3)
    p.add_argument("--outcomes", type=int, default=10)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("noise-study", help="PSNR and residual noise versus k-space noise level")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_noise_study)

    p = sub.add_parser("serve", help="serve the run registry API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HpalfError, ValidationError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
