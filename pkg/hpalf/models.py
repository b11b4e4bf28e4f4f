"""Run registry models."""

from __future__ import annotations

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String, Text, UniqueConstraint, func
from sqlalchemy.orm import relationship

from .db import Base


class TimestampMixin:
    """Reusable created/updated columns."""

    created_at = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)
    updated_at = Column(
        DateTime(timezone=True), server_default=func.now(), onupdate=func.now(), nullable=True
    )


class TrainingRun(Base, TimestampMixin):
    """One call of the training loop."""

    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True)
    name = Column(String, nullable=False, index=True)
    config = Column(JSON, nullable=False)
    switches = Column(JSON, nullable=False)
    seed = Column(Integer, nullable=False)
    status = Column(String, nullable=False, default="running")
    best_val_psnr = Column(Float, nullable=True)
    zero_fill_psnr = Column(Float, nullable=True)
    tv_psnr = Column(Float, nullable=True)
    checkpoint_path = Column(String, nullable=True)
    history_path = Column(String, nullable=True)
    error = Column(Text, nullable=True)

    epochs = relationship("EpochRecordRow", back_populates="run", cascade="all, delete", order_by="EpochRecordRow.epoch")


class EpochRecordRow(Base):
    """Per-epoch losses and validation scores."""

    __tablename__ = "epoch_records"
    __table_args__ = (UniqueConstraint("run_id", "epoch", name="uq_run_epoch"),)

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    d_loss = Column(Float, nullable=False)
    g_loss = Column(Float, nullable=False)
    val_psnr = Column(Float, nullable=False)
    val_ssim = Column(Float, nullable=False)
    lr = Column(Float, nullable=False)

    run = relationship("TrainingRun", back_populates="epochs")


class AblationCellRow(Base):
    """One cell of a named ablation grid."""

    __tablename__ = "ablation_cells"

    id = Column(Integer, primary_key=True)
    ablation = Column(String, nullable=False, index=True)
    label = Column(String, nullable=False)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=True)
    psnr = Column(Float, nullable=True)
    ssim = Column(Float, nullable=True)
    ffd = Column(Float, nullable=True)
    psim_lite = Column(Float, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)


class SystemStatus(Base):
    """Tracks the last finished run and the last failure."""

    __tablename__ = "system_status"

    id = Column(Integer, primary_key=True, default=1)
    last_successful_run = Column(DateTime(timezone=True), nullable=True)
    last_error = Column(Text, nullable=True)
    last_error_at = Column(DateTime(timezone=True), nullable=True)
