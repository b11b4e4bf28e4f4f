"""Ablation grids and their CSV output."""

from __future__ import annotations

import pytest

from hpalf.ablation import (
    ABLATION_HEADER,
    GRIDS,
    RANGE_NOTE,
    AblationCell,
    AblationRow,
    component_grid,
    context_grid,
    loss_grid,
    outcome_grid,
    read_metric_csv,
    run_ablation,
    slice_grid,
    write_ablation_csv,
)
from hpalf.errors import ConfigurationError
from hpalf.metrics import MetricReport
from hpalf.schemas import AblationSwitches, MaskSpec, TrainConfig
from hpalf.trainlab import build_dataset

CONFIG = TrainConfig(image_size=16, n_volumes=10, volume_depth=8, n_slices=3, outcomes=4, mask=MaskSpec(fraction=0.4))


def test_component_grid_labels():
    labels = [cell.label(CONFIG) for cell in component_grid()]
    assert labels == [
        "HP-ALF | 3 slices | K=4",
        "without MPD | 3 slices | K=4",
        "without GLC | 3 slices | K=4",
        "without CAL | 3 slices | K=4",
        "with TAL | 3 slices | K=4",
    ]


def test_grids_vary_one_thing():
    assert [cell.switches.cal for cell in context_grid()] == ["biconvlstm", "3dcnn", "2dcnn", "none"]
    assert [cell.n_slices for cell in slice_grid()] == [3, 4, 5, 6, 7]
    assert [cell.outcomes for cell in outcome_grid()] == [2, 5, 10, 15, 20]
    assert all(cell.switches.tal for cell in GRIDS["objectives"]())
    assert set(GRIDS) == {"components", "losses", "context", "slices", "outcomes", "objectives"}


def test_loss_grid_drops_one_content_term_per_cell():
    cells = loss_grid()
    assert [(cell.switches.fmse, cell.switches.vgg) for cell in cells] == [(True, True), (False, True), (True, False)]
    assert [cell.switches.label for cell in cells] == ["HP-ALF", "without fMSE", "without VGG"]
    assert GRIDS["losses"] is loss_grid


def test_cell_configure_overrides_only_what_it_names():
    assert AblationCell(AblationSwitches()).configure(CONFIG) is CONFIG
    configured = AblationCell(AblationSwitches(), n_slices=5, outcomes=10).configure(CONFIG)
    assert (configured.n_slices, configured.outcomes) == (5, 10)
    assert configured.image_size == CONFIG.image_size


def test_empty_grid_is_rejected():
    with pytest.raises(ConfigurationError):
        run_ablation([], CONFIG, build_dataset(CONFIG))


def test_invalid_cell_is_recorded_and_the_grid_continues(tmp_path):
    dataset = build_dataset(CONFIG)
    out = tmp_path / "grid.csv"
    rows = run_ablation([AblationCell(AblationSwitches(), n_slices=9)], CONFIG, dataset, out_csv=out, run_dir=tmp_path)
    assert len(rows) == 1
    assert rows[0].report is None
    assert "n_slices" in rows[0].error
    assert rows[0].split == dataset.split.fingerprint()
    assert read_metric_csv(out)[0]["psnr"] == ""


def test_ablation_csv_layout(tmp_path):
    report = MetricReport(psnr=25.5, ssim=0.75, ffd=1.25, psim_lite=0.5)
    rows = [
        AblationRow("HP-ALF", 5, 10, report, 7, "0,1|2|3"),
        AblationRow("with TAL", 5, 10, None, None, "0,1|2|3", error="diverged"),
    ]
    path = write_ablation_csv(rows, tmp_path / "out" / "grid.csv")

    assert path.read_text().splitlines()[0] == RANGE_NOTE
    records = read_metric_csv(path)
    assert list(records[0]) == ABLATION_HEADER
    assert records[0]["psnr"] == "25.5"
    assert records[0]["best_epoch"] == "7"
    assert records[1]["error"] == "diverged"
    assert records[1]["ssim"] == ""
