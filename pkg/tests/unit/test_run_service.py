"""Run registry writes and the recorder hooks used by training."""

from __future__ import annotations

from pathlib import Path
from types import SimpleNamespace

from sqlalchemy.exc import OperationalError

from hpalf import run_service
from hpalf.ablation import AblationRow
from hpalf.metrics import MetricReport
from hpalf.models import AblationCellRow, EpochRecordRow, SystemStatus, TrainingRun
from hpalf.run_service import (
    RunRecorder,
    fail_run,
    finish_run,
    record_ablation_cell,
    record_epoch,
    start_run,
    update_status,
)
from hpalf.schemas import AblationSwitches, TrainConfig
from hpalf.trainlab import EpochRecord

CONFIG = TrainConfig(image_size=16, seed=3)


def _result(**overrides):
    values = dict(
        best_val_psnr=24.5,
        zero_fill_psnr=21.0,
        tv_psnr=22.5,
        checkpoint_path=Path("runs/a/best.hpck"),
        history_path=Path("runs/a/history.csv"),
    )
    values.update(overrides)
    return SimpleNamespace(**values)


def test_start_run_stores_config_and_switches(db_session):
    run = start_run(db_session, "baseline", CONFIG, AblationSwitches(glc=False))
    db_session.commit()

    stored = db_session.get(TrainingRun, run.id)
    assert stored.status == "running"
    assert stored.seed == 3
    assert stored.config["image_size"] == 16
    assert stored.switches["glc"] is False


def test_record_epoch_overwrites_the_same_epoch(db_session):
    run = start_run(db_session, "baseline", CONFIG, AblationSwitches())
    record_epoch(db_session, run.id, EpochRecord(0, 1.0, 2.0, 20.0, 0.5, 3e-4))
    db_session.commit()
    record_epoch(db_session, run.id, EpochRecord(0, 0.5, 1.5, 22.0, 0.6, 3e-4))
    record_epoch(db_session, run.id, EpochRecord(1, 0.4, 1.4, 23.0, 0.7, 3e-4))
    db_session.commit()

    rows = db_session.query(EpochRecordRow).order_by(EpochRecordRow.epoch).all()
    assert [row.epoch for row in rows] == [0, 1]
    assert rows[0].val_psnr == 22.0


def test_finish_run_updates_scores_and_status(db_session):
    run = start_run(db_session, "baseline", CONFIG, AblationSwitches())
    finish_run(db_session, run.id, _result())
    db_session.commit()

    stored = db_session.get(TrainingRun, run.id)
    assert stored.status == "finished"
    assert stored.best_val_psnr == 24.5
    assert stored.checkpoint_path == str(Path("runs/a/best.hpck"))
    assert db_session.get(SystemStatus, 1).last_successful_run is not None
    assert finish_run(db_session, 999, _result()) is None


def test_fail_run_records_the_error(db_session):
    run = start_run(db_session, "baseline", CONFIG, AblationSwitches())
    fail_run(db_session, run.id, "non-finite generator loss")
    db_session.commit()

    stored = db_session.get(TrainingRun, run.id)
    assert stored.status == "failed"
    assert stored.error == "non-finite generator loss"
    assert db_session.get(SystemStatus, 1).last_error == "non-finite generator loss"


def test_success_clears_a_previous_error(db_session):
    update_status(db_session, error="boom")
    update_status(db_session)
    db_session.commit()

    status = db_session.get(SystemStatus, 1)
    assert status.last_error is None
    assert status.last_error_at is None
    assert status.last_successful_run is not None


def test_ablation_cells_keep_failures(db_session):
    report = MetricReport(psnr=25.0, ssim=0.8, ffd=1.5, psim_lite=0.9)
    record_ablation_cell(db_session, "components", AblationRow("HP-ALF", 5, 10, report, 3, "0|1|2", run_id=None))
    record_ablation_cell(db_session, "components", AblationRow("with TAL", 5, 10, None, None, "0|1|2", error="diverged"))
    db_session.commit()

    cells = db_session.query(AblationCellRow).order_by(AblationCellRow.id).all()
    assert [cell.label for cell in cells] == ["HP-ALF", "with TAL"]
    assert cells[0].psnr == 25.0
    assert cells[1].psnr is None
    assert cells[1].error == "diverged"


def test_recorder_mirrors_a_run(session_factory):
    recorder = RunRecorder(session_factory)
    run_id = recorder.start("recorded", CONFIG, AblationSwitches())
    assert run_id is not None
    recorder.epoch(run_id, EpochRecord(0, 1.0, 2.0, 20.0, 0.5, 3e-4))
    recorder.finish(run_id, _result())

    with session_factory() as db:
        run = db.get(TrainingRun, run_id)
        assert run.status == "finished"
        assert len(run.epochs) == 1


def test_recorder_never_raises(session_factory, monkeypatch):
    def broken(db, *args, **kwargs):
        raise RuntimeError("registry unavailable")

    monkeypatch.setattr(run_service, "start_run", broken)
    recorder = RunRecorder(session_factory)
    assert recorder.start("lost", CONFIG, AblationSwitches()) is None
    recorder.epoch(None, EpochRecord(0, 1.0, 2.0, 20.0, 0.5, 3e-4))
    recorder.fail(None, ValueError("training failed"))

    with session_factory() as db:
        assert db.get(SystemStatus, 1).last_error == "training failed"


def test_locked_database_is_retried(session_factory, monkeypatch):
    monkeypatch.setattr(run_service._write.retry, "sleep", lambda seconds: None)
    attempts = []

    def flaky(db):
        attempts.append(1)
        if len(attempts) < 3:
            raise OperationalError("INSERT", {}, Exception("database is locked"))
        return "ok"

    assert run_service._write(session_factory, flaky) == "ok"
    assert len(attempts) == 3
