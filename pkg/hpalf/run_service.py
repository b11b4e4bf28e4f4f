"""Business logic for recording runs, epochs and ablation cells in the registry."""

from __future__ import annotations

import logging
from datetime import datetime, timezone
from typing import Callable

from sqlalchemy.exc import OperationalError
from sqlalchemy.orm import Session
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .models import AblationCellRow, EpochRecordRow, SystemStatus, TrainingRun
from .schemas import AblationSwitches, TrainConfig

UTC = timezone.utc
logger = logging.getLogger("hpalf")


def start_run(db: Session, name: str, config: TrainConfig, switches: AblationSwitches) -> TrainingRun:
    """Insert a running-state row for a new training run."""
    run = TrainingRun(
        name=name,
        config=config.model_dump(mode="json"),
        switches=switches.model_dump(mode="json"),
        seed=config.seed,
        status="running",
    )
    db.add(run)
    db.flush()
    return run


def record_epoch(db: Session, run_id: int, record) -> EpochRecordRow:
    """Insert or overwrite the row for ``record.epoch``."""
    row = (
        db.query(EpochRecordRow)
        .filter(EpochRecordRow.run_id == run_id, EpochRecordRow.epoch == record.epoch)
        .first()
    )
    if row is None:
        row = EpochRecordRow(run_id=run_id, epoch=record.epoch)
        db.add(row)
    row.d_loss = record.d_loss
    row.g_loss = record.g_loss
    row.val_psnr = record.val_psnr
    row.val_ssim = record.val_ssim
    row.lr = record.lr
    return row


def finish_run(db: Session, run_id: int, result) -> TrainingRun | None:
    run = db.get(TrainingRun, run_id)
    if run is None:
        return None
    run.status = "finished"
    run.best_val_psnr = result.best_val_psnr
    run.zero_fill_psnr = result.zero_fill_psnr
    run.tv_psnr = result.tv_psnr
    run.checkpoint_path = str(result.checkpoint_path) if result.checkpoint_path else None
    run.history_path = str(result.history_path)
    update_status(db)
    return run


def fail_run(db: Session, run_id: int | None, error: str) -> None:
    run = db.get(TrainingRun, run_id) if run_id is not None else None
    if run is not None:
        run.status = "failed"
        run.error = error
    update_status(db, error=error)


def record_ablation_cell(db: Session, ablation: str, row) -> AblationCellRow:
    """Persist one ablation CSV row under the grid's name."""
    report = row.report
    cell = AblationCellRow(
        ablation=ablation,
        label=row.label,
        run_id=row.run_id,
        psnr=report.psnr if report else None,
        ssim=report.ssim if report else None,
        ffd=report.ffd if report else None,
        psim_lite=report.psim_lite if report else None,
        error=row.error or None,
    )
    db.add(cell)
    return cell


def update_status(db: Session, *, error: str | None = None) -> None:
    """Record lab status in the database."""
    status = db.get(SystemStatus, 1)
    if not status:
        status = SystemStatus(id=1)
        db.add(status)

    if error:
        status.last_error = error
        status.last_error_at = datetime.now(tz=UTC)
    else:
        status.last_successful_run = datetime.now(tz=UTC)
        status.last_error = None
        status.last_error_at = None


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=1, min=2, max=10),
    retry=retry_if_exception_type(OperationalError),
    before_sleep=lambda retry_state: logger.warning(
        "Retrying registry write due to a locked database (attempt %s/3)",
        retry_state.attempt_number,
    ),
)
def _write(session_factory: Callable[[], Session], action: Callable[[Session], object]):
    with session_factory() as db:
        try:
            value = action(db)
            db.commit()
        except Exception:
            db.rollback()
            raise
        return value


class RunRecorder:
    """Training hooks that mirror a run into the registry without ever stopping it."""

    def __init__(self, session_factory: Callable[[], Session]) -> None:
        self.session_factory = session_factory

    def _safe(self, what: str, action: Callable[[Session], object]):
        try:
            return _write(self.session_factory, action)
        except Exception:
            logger.exception("Failed to %s in the run registry", what)
            return None

    def start(self, name: str, config: TrainConfig, switches: AblationSwitches) -> int | None:
        return self._safe("start a run", lambda db: start_run(db, name, config, switches).id)

    def epoch(self, run_id: int | None, record) -> None:
        if run_id is not None:
            self._safe("record an epoch", lambda db: record_epoch(db, run_id, record) and None)

    def finish(self, run_id: int | None, result) -> None:
        if run_id is not None:
            self._safe("finish a run", lambda db: finish_run(db, run_id, result) and None)

    def fail(self, run_id: int | None, error: BaseException) -> None:
        self._safe("record a failure", lambda db: fail_run(db, run_id, str(error)))

    def ablation_rows(self, ablation: str, rows) -> None:
        def action(db: Session) -> None:
            for row in rows:
                record_ablation_cell(db, ablation, row)

        self._safe("record ablation cells", action)
