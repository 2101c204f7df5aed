"""Shared test fixtures for lidarcl tests."""

import numpy as np
import pytest
from click.testing import CliRunner
from sqlalchemy import create_engine
from sqlalchemy.orm import Session, sessionmaker

from lidarcl.config import Config
from lidarcl.db import Base
from lidarcl.experiment import ExperimentSpec, TrainConfig
from lidarcl.ingest.base import DatasetConfig, MemorySource
from lidarcl.ingest.synthetic import SynthConfig, generate_synthetic
from lidarcl.model import Prediction
from lidarcl.taxonomy import ClassTaxonomy, builtin_taxonomy


@pytest.fixture
def test_engine():
    """In-memory SQLite database engine for testing."""
    engine = create_engine("sqlite:///:memory:")
    Base.metadata.create_all(engine)
    yield engine
    engine.dispose()


@pytest.fixture
def test_session(test_engine) -> Session:
    """Database session with automatic rollback."""
    SessionLocal = sessionmaker(bind=test_engine)
    session = SessionLocal()
    yield session
    session.rollback()
    session.close()


@pytest.fixture
def temp_config(tmp_path) -> Config:
    """Temporary config for testing."""
    return Config(config_path=tmp_path / "config.json")


@pytest.fixture
def cli_runner():
    """Click CLI test runner."""
    return CliRunner()


@pytest.fixture
def desk() -> ClassTaxonomy:
    """8-class, 3-step taxonomy with a 3-level hierarchy."""
    return builtin_taxonomy("desk")


@pytest.fixture
def cil() -> ClassTaxonomy:
    return builtin_taxonomy("cil")


@pytest.fixture
def c2f() -> ClassTaxonomy:
    return builtin_taxonomy("c2f")


@pytest.fixture
def tiny_synth() -> SynthConfig:
    """Small synthetic dataset settings over the desk taxonomy."""
    return SynthConfig(seed=3, scans_per_group=4, points_per_scan=200, validation_scans=2, taxonomy="desk")


@pytest.fixture
def tiny_dataset(tiny_synth):
    return generate_synthetic(tiny_synth)


@pytest.fixture
def tiny_source(tiny_dataset, desk) -> MemorySource:
    return MemorySource.from_synthetic(tiny_dataset, desk)


@pytest.fixture
def tiny_spec(tmp_path, tiny_synth) -> ExperimentSpec:
    """Disjoint fine-tuning on the tiny dataset with one epoch per new class."""
    return ExperimentSpec(
        name="tiny",
        scenario="disjoint",
        taxonomy="desk",
        strategy="fine_tune",
        train=TrainConfig(epochs_per_class=1),
        dataset=DatasetConfig(synth=tiny_synth),
        output_dir=tmp_path / "run",
    )


def _make_prediction(rows, class_list, features=None) -> Prediction:
    probs = np.asarray(rows, dtype=np.float64)
    if features is None:
        features = np.zeros((probs.shape[0], 2))
    return Prediction(np.log(np.maximum(probs, 1e-300)), probs, np.asarray(features, dtype=np.float64), tuple(class_list))


@pytest.fixture
def make_prediction():
    """Factory for predictions whose softmax is exactly the given rows."""
    return _make_prediction
