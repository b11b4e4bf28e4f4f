"""Short training runs, an ablation grid and the studies, end to end."""

from __future__ import annotations

import csv
import math
import os

import httpx
import numpy as np
import pytest

from hpalf.ablation import AblationCell, feature_diversity_study, noise_study, read_metric_csv, run_ablation
from hpalf.checkpoint import load_checkpoint, restore
from hpalf.generator import Generator
from hpalf.run_service import RunRecorder
from hpalf.schemas import AblationSwitches, MaskSpec, TrainConfig
from hpalf.trainlab import HISTORY_HEADER, build_dataset, configs_from_checkpoint, evaluation_set, reconstruct_windows, train_hpalf


@pytest.mark.e2e
def test_training_run_writes_a_restorable_checkpoint(tiny_config, tmp_path):
    result = train_hpalf(tiny_config, run_dir=tmp_path, name="smoke")

    assert result.steps == 3
    assert len(result.history) == 1
    assert result.best_epoch == 0
    assert math.isfinite(result.best_val_psnr)
    assert result.tv_psnr is not None
    assert result.components == {"d_kl_enc", "d_dec", "g_adv_kl", "g_adv_pixel", "g_fmse", "g_vgg"}
    assert result.checkpoint_path == tmp_path / "smoke" / "best.hpck"

    with result.history_path.open(newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == HISTORY_HEADER
    assert len(rows) == 2

    checkpoint = load_checkpoint(result.checkpoint_path)
    config, switches = configs_from_checkpoint(checkpoint.config)
    assert config == tiny_config
    assert switches == AblationSwitches()
    generator = Generator(config.generator_config(switches.cal), np.random.default_rng(99))
    restore(generator, checkpoint, "generator")

    dataset = build_dataset(tiny_config)
    windows = evaluation_set(dataset.windows("val", 3)[:2], dataset.mask, 0.0, seed=0).zero_filled
    np.testing.assert_allclose(
        reconstruct_windows(generator, windows), reconstruct_windows(result.generator, windows), rtol=1e-5, atol=1e-6
    )


@pytest.mark.e2e
def test_scalar_only_run_uses_the_scalar_terms(tiny_config, tmp_path):
    result = train_hpalf(tiny_config, AblationSwitches(tal=True), run_dir=tmp_path, tv_baseline=False)

    assert result.components == {"d_scalar", "g_adv_scalar", "g_fmse", "g_vgg"}
    assert result.decision_error_correlation is None
    assert result.name == "with_tal_s3_k4_seed5"


@pytest.mark.e2e
@pytest.mark.parametrize(
    "switches,components",
    [
        (AblationSwitches(fmse=False), {"d_kl_enc", "d_dec", "g_adv_kl", "g_adv_pixel", "g_vgg"}),
        (AblationSwitches(vgg=False), {"d_kl_enc", "d_dec", "g_adv_kl", "g_adv_pixel", "g_fmse"}),
        (AblationSwitches(mpd=False), {"d_dec", "g_adv_pixel", "g_fmse", "g_vgg"}),
    ],
)
def test_switched_off_terms_never_reach_the_run(tiny_config, tmp_path, switches, components):
    result = train_hpalf(tiny_config, switches, run_dir=tmp_path, tv_baseline=False)

    assert result.components == components


@pytest.mark.e2e
def test_registry_serves_a_recorded_run(tiny_config, tmp_path, live_registry):
    recorder = RunRecorder(live_registry.session_factory)
    result = train_hpalf(tiny_config, run_dir=tmp_path, name="recorded", hooks=recorder, tv_baseline=False)
    assert result.run_id is not None

    run = httpx.get(f"{live_registry.base_url}/api/runs/{result.run_id}", timeout=5.0).json()
    assert run["status"] == "finished"
    assert run["name"] == "recorded"
    assert run["best_val_psnr"] == pytest.approx(result.best_val_psnr)

    history = httpx.get(f"{live_registry.base_url}/api/runs/{result.run_id}/history", timeout=5.0).json()
    assert [row["epoch"] for row in history] == [0]

    recorder.ablation_rows("smoke", [])
    assert httpx.get(f"{live_registry.base_url}/api/ablations/smoke", timeout=5.0).status_code == 404


@pytest.mark.e2e
def test_ablation_grid_scores_every_cell(tiny_config, tmp_path):
    dataset = build_dataset(tiny_config)
    grid = [AblationCell(AblationSwitches()), AblationCell(AblationSwitches(tal=True)), AblationCell(AblationSwitches(), outcomes=1)]

    rows = run_ablation(grid, tiny_config, dataset, out_csv=tmp_path / "grid.csv", run_dir=tmp_path)

    assert [row.error == "" for row in rows] == [True, True, False]
    for row in rows[:2]:
        assert math.isfinite(row.report.psnr)
        assert -1.0 <= row.report.ssim <= 1.0
        assert row.best_epoch == 0
    records = read_metric_csv(tmp_path / "grid.csv")
    assert [r["label"] for r in records] == [row.label for row in rows]
    assert len({r["split"] for r in records}) == 1


@pytest.mark.e2e
def test_noise_study_degrades_with_noise():
    config = TrainConfig(image_size=32, n_volumes=10, volume_depth=8, n_slices=3, mask=MaskSpec(fraction=0.4), seed=2)
    dataset = build_dataset(config)
    generator = Generator(config.generator_config(), np.random.default_rng(0))

    rows = noise_study(config, dataset, generator=generator, levels=(0.0, 0.2), windows=1, tv_iterations=10)

    assert [row.noise for row in rows] == [0.0, 0.2]
    assert rows[1].zero_fill_psnr < rows[0].zero_fill_psnr
    assert all(row.hpalf_psnr is not None and math.isfinite(row.hpalf_psnr) for row in rows)
    assert all(row.tv_residual >= 0 for row in rows)


@pytest.mark.e2e
def test_feature_diversity_covers_each_context_block(tiny_config):
    results = feature_diversity_study(tiny_config, build_dataset(tiny_config))

    assert set(results) <= {"biconvlstm", "3dcnn", "2dcnn"}
    assert results
    assert all(-1.0 <= value <= 1.0 for value in results.values())


@pytest.mark.e2e
def test_identical_seeds_give_identical_histories(tiny_config, tmp_path):
    first = train_hpalf(tiny_config, run_dir=tmp_path / "a", name="run", tv_baseline=False)
    second = train_hpalf(tiny_config, run_dir=tmp_path / "b", name="run", tv_baseline=False)

    assert first.history_path.read_bytes() == second.history_path.read_bytes()


@pytest.mark.e2e
@pytest.mark.skipif(not os.environ.get("HPALF_ACCEPTANCE"), reason="set HPALF_ACCEPTANCE=1 for the desk-scale run")
def test_desk_scale_run_beats_zero_filling(tmp_path):
    config = TrainConfig(max_steps=200, mask=MaskSpec(kind="g1d", fraction=0.3), seed=0)

    result = train_hpalf(config, run_dir=tmp_path, name="acceptance")

    assert result.best_val_psnr >= result.zero_fill_psnr + 1.0
    assert result.decision_error_correlation is not None
    assert result.decision_error_correlation >= 0
