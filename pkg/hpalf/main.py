"""FastAPI entrypoint: read-only JSON over the run registry."""

from __future__ import annotations

import logging
from contextlib import asynccontextmanager

from fastapi import Depends, FastAPI, HTTPException, Query
from sqlalchemy.orm import Session

from .db import Base, engine, get_session
from .models import AblationCellRow, EpochRecordRow, SystemStatus, TrainingRun
from .schemas import AblationCellResponse, AblationResponse, EpochResponse, RunResponse, StatusResponse

logger = logging.getLogger("hpalf")


@asynccontextmanager
async def lifespan(fastapi_app: FastAPI):
    """Create the registry schema before serving."""
    Base.metadata.create_all(bind=engine)
    yield


app = FastAPI(title="HP-ALF Lab Registry", version="1.0.0", lifespan=lifespan)


def _get_run(db: Session, run_id: int) -> TrainingRun:
    run = db.get(TrainingRun, run_id)
    if run is None:
        raise HTTPException(status_code=404, detail="Run not found")
    return run


@app.get("/api/runs", response_model=list[RunResponse])
def list_runs(
    limit: int = Query(50, ge=1, le=500),
    state: str | None = Query(None, alias="status"),
    db: Session = Depends(get_session),
) -> list[RunResponse]:
    """Most recent runs first."""
    query = db.query(TrainingRun)
    if state:
        query = query.filter(TrainingRun.status == state)
    runs = query.order_by(TrainingRun.id.desc()).limit(limit).all()
    return [RunResponse.model_validate(run) for run in runs]


@app.get("/api/runs/{run_id}", response_model=RunResponse)
def get_run(run_id: int, db: Session = Depends(get_session)) -> RunResponse:
    return RunResponse.model_validate(_get_run(db, run_id))


@app.get("/api/runs/{run_id}/history", response_model=list[EpochResponse])
def run_history(run_id: int, db: Session = Depends(get_session)) -> list[EpochResponse]:
    """Per-epoch losses and validation scores in epoch order."""
    _get_run(db, run_id)
    rows = db.query(EpochRecordRow).filter(EpochRecordRow.run_id == run_id).order_by(EpochRecordRow.epoch.asc()).all()
    return [EpochResponse.model_validate(row) for row in rows]


@app.get("/api/ablations/{name}", response_model=AblationResponse)
def get_ablation(name: str, db: Session = Depends(get_session)) -> AblationResponse:
    cells = db.query(AblationCellRow).filter(AblationCellRow.ablation == name).order_by(AblationCellRow.id.asc()).all()
    if not cells:
        raise HTTPException(status_code=404, detail="Ablation not found")
    return AblationResponse(name=name, cells=[AblationCellResponse.model_validate(cell) for cell in cells])


@app.get("/api/status", response_model=StatusResponse)
def status(db: Session = Depends(get_session)) -> StatusResponse:
    """Return lab heartbeat information."""
    record = db.get(SystemStatus, 1)
    if not record:
        return StatusResponse()
    return StatusResponse(
        last_successful_run=record.last_successful_run,
        last_error=record.last_error,
        last_error_at=record.last_error_at,
    )
