"""Run-log database models for lidarcl.

The run log records wall-clock history of experiments (status, per-step
progress and every learning rate applied). It lives beside the outputs as
``runlog.db`` and is not part of the reproducible artifacts.
"""

from datetime import datetime, timezone
from pathlib import Path

from sqlalchemy import ForeignKey, Index, create_engine
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column, relationship, sessionmaker

RUNLOG_NAME = "runlog.db"


class Base(DeclarativeBase):
    """Base class for all models."""
    pass


class ExperimentRun(Base):
    """One `lidarcl train` (or ablation member) invocation."""

    __tablename__ = "experiment_runs"

    id: Mapped[int] = mapped_column(primary_key=True)
    name: Mapped[str] = mapped_column(index=True)
    scenario: Mapped[str]
    strategy: Mapped[str]
    seed: Mapped[int]
    started_at: Mapped[datetime]
    completed_at: Mapped[datetime | None] = mapped_column(default=None)
    status: Mapped[str]  # "running", "success", "failed"
    steps_completed: Mapped[int] = mapped_column(default=0)
    final_miou: Mapped[float | None] = mapped_column(default=None)
    error_message: Mapped[str | None] = mapped_column(default=None)
    spec_json: Mapped[str | None] = mapped_column(default=None)

    steps: Mapped[list["StepRun"]] = relationship(back_populates="run", cascade="all, delete-orphan")


class StepRun(Base):
    """Training of one learning step within a run."""

    __tablename__ = "step_runs"

    id: Mapped[int] = mapped_column(primary_key=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("experiment_runs.id"), index=True)
    step: Mapped[int]
    started_at: Mapped[datetime]
    completed_at: Mapped[datetime | None] = mapped_column(default=None)
    status: Mapped[str]  # "running", "success", "failed"
    scans: Mapped[int] = mapped_column(default=0)
    epochs: Mapped[int] = mapped_column(default=0)
    iterations: Mapped[int] = mapped_column(default=0)
    lr_unit: Mapped[str] = mapped_column(default="epoch")
    final_lr: Mapped[float | None] = mapped_column(default=None)
    miou: Mapped[float | None] = mapped_column(default=None)
    inpainted: Mapped[int | None] = mapped_column(default=None)
    error_message: Mapped[str | None] = mapped_column(default=None)

    run: Mapped[ExperimentRun] = relationship(back_populates="steps")
    lr_records: Mapped[list["LRRecord"]] = relationship(back_populates="step_run", cascade="all, delete-orphan")


class LRRecord(Base):
    """Learning rate applied at one optimizer update."""

    __tablename__ = "lr_records"

    id: Mapped[int] = mapped_column(primary_key=True)
    step_run_id: Mapped[int] = mapped_column(ForeignKey("step_runs.id"))
    iteration: Mapped[int]  # update index within the step
    tick: Mapped[int]  # schedule position t (epoch or iteration)
    lr: Mapped[float]
    loss: Mapped[float]

    step_run: Mapped[StepRun] = relationship(back_populates="lr_records")

    __table_args__ = (
        Index("ix_lr_step_iteration", "step_run_id", "iteration"),
    )


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def get_engine(db_path: Path):
    """Create SQLAlchemy engine."""
    return create_engine(f"sqlite:///{db_path}", echo=False)


def init_db(db_path: Path) -> None:
    """Initialize the database schema."""
    db_path.parent.mkdir(parents=True, exist_ok=True)
    engine = get_engine(db_path)
    Base.metadata.create_all(engine)


def get_session(db_path: Path) -> Session:
    """Get a database session."""
    engine = get_engine(db_path)
    SessionLocal = sessionmaker(bind=engine)
    return SessionLocal()
