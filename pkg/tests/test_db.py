"""Tests for run-log database models and operations."""

from datetime import datetime

from sqlalchemy import inspect, select

from lidarcl.db import (
    Base,
    ExperimentRun,
    LRRecord,
    StepRun,
    get_engine,
    get_session,
    init_db,
    utcnow,
)


def make_run(**overrides) -> ExperimentRun:
    fields = dict(
        name="desk-disjoint",
        scenario="disjoint",
        strategy="fine_tune",
        seed=0,
        started_at=datetime(2024, 1, 15, 10, 0),
        status="running",
    )
    fields.update(overrides)
    return ExperimentRun(**fields)


class TestExperimentRun:
    """Tests for ExperimentRun model."""

    def test_creation(self, test_session):
        """Should create and persist a run."""
        test_session.add(make_run())
        test_session.commit()

        result = test_session.query(ExperimentRun).first()

        assert result.name == "desk-disjoint"
        assert result.status == "running"
        assert result.steps_completed == 0
        assert result.final_miou is None

    def test_steps_relationship(self, test_session):
        """Step runs hang off their experiment run."""
        run = make_run()
        run.steps.append(StepRun(step=0, started_at=datetime(2024, 1, 15, 10, 1), status="success"))
        run.steps.append(StepRun(step=1, started_at=datetime(2024, 1, 15, 10, 5), status="running"))
        test_session.add(run)
        test_session.commit()

        result = test_session.query(ExperimentRun).one()
        assert [s.step for s in result.steps] == [0, 1]
        assert result.steps[0].run is result

    def test_cascade_delete(self, test_session):
        """Deleting a run deletes its steps and learning-rate records."""
        run = make_run()
        step = StepRun(step=0, started_at=datetime(2024, 1, 15, 10, 1), status="success")
        step.lr_records.append(LRRecord(iteration=0, tick=0, lr=0.01, loss=1.5))
        run.steps.append(step)
        test_session.add(run)
        test_session.commit()

        test_session.delete(run)
        test_session.commit()

        assert test_session.query(StepRun).count() == 0
        assert test_session.query(LRRecord).count() == 0


class TestLRRecord:
    """Tests for LRRecord model."""

    def test_ordered_by_iteration(self, test_session):
        run = make_run()
        step = StepRun(step=0, started_at=datetime(2024, 1, 15, 10, 1), status="success")
        for i, lr in enumerate([0.01, 0.006, 0.002]):
            step.lr_records.append(LRRecord(iteration=i, tick=i, lr=lr, loss=1.0))
        run.steps.append(step)
        test_session.add(run)
        test_session.commit()

        stmt = select(LRRecord.lr).order_by(LRRecord.iteration.desc())
        assert list(test_session.execute(stmt).scalars()) == [0.002, 0.006, 0.01]


class TestInitDb:
    """Tests for database initialization."""

    def test_creates_tables(self, tmp_path):
        """Should create all run-log tables."""
        db_path = tmp_path / "runlog.db"
        init_db(db_path)

        tables = inspect(get_engine(db_path)).get_table_names()
        assert set(tables) == {"experiment_runs", "step_runs", "lr_records"}

    def test_creates_parent_directory(self, tmp_path):
        db_path = tmp_path / "nested" / "out" / "runlog.db"
        init_db(db_path)

        assert db_path.exists()

    def test_idempotent(self, tmp_path):
        """Running init twice should not fail."""
        db_path = tmp_path / "runlog.db"
        init_db(db_path)
        init_db(db_path)

        session = get_session(db_path)
        session.add(make_run(started_at=utcnow()))
        session.commit()
        assert session.query(ExperimentRun).count() == 1
        session.close()

    def test_metadata_matches_models(self):
        assert set(Base.metadata.tables) == {"experiment_runs", "step_runs", "lr_records"}
