"""Data sources: where labeled clouds come from."""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lidarcl.errors import ConfigError, DataError
from lidarcl.ingest.semantickitti import (
    CIL_SEQUENCE_GROUPS,
    VALIDATION_SEQUENCES,
    LabeledCloud,
    LearningMap,
    ScanId,
    ScanRef,
    enumerate_split,
    normalize_sequence,
    read_scan,
)
from lidarcl.ingest.synthetic import MANIFEST_NAME, SynthConfig, SyntheticDataset, generate_synthetic
from lidarcl.taxonomy import ClassTaxonomy, resolve_taxonomy

logger = logging.getLogger(__name__)


class CloudSource(ABC):
    """Abstract base class for all cloud sources.

    A source exposes training scans split into per-step groups, plus a
    held-out validation split. Labels are learning ids of ``taxonomy``.
    """

    name: str = "base"  # Override in subclasses

    def __init__(self, taxonomy: ClassTaxonomy):
        self.taxonomy = taxonomy

    @abstractmethod
    def group_scans(self) -> list[list[ScanId]]:
        """Training scan ids, one list per sequence group."""
        pass

    @abstractmethod
    def validation_scans(self) -> list[ScanId]:
        pass

    @abstractmethod
    def load(self, scan_id: ScanId) -> LabeledCloud:
        """
        Load one scan.

        Raises:
            DataError: if the scan is not part of this source or cannot be read.
        """
        pass

    def labels(self, scan_id: ScanId) -> np.ndarray:
        return self.load(scan_id).labels

    def scan_ids(self) -> list[ScanId]:
        """Every scan, training groups first."""
        return self.training_scans() + self.validation_scans()

    def training_scans(self) -> list[ScanId]:
        return [scan_id for group in self.group_scans() for scan_id in group]


class MemorySource(CloudSource):
    """Clouds held in process, e.g. freshly generated synthetic data."""

    name = "memory"

    def __init__(
        self,
        taxonomy: ClassTaxonomy,
        groups: list[list[LabeledCloud]],
        validation: list[LabeledCloud],
    ):
        super().__init__(taxonomy)
        self._groups = [[c.scan_id for c in group] for group in groups]
        self._validation = [c.scan_id for c in validation]
        self._clouds: dict[ScanId, LabeledCloud] = {}
        for cloud in [c for group in groups for c in group] + list(validation):
            if cloud.scan_id in self._clouds:
                raise DataError(f"duplicate scan id {cloud.scan_id}")
            self._clouds[cloud.scan_id] = cloud

    @classmethod
    def from_synthetic(cls, dataset: SyntheticDataset, taxonomy: ClassTaxonomy | None = None) -> "MemorySource":
        taxonomy = taxonomy or resolve_taxonomy(dataset.config.taxonomy)
        return cls(taxonomy, dataset.groups, dataset.validation)

    def group_scans(self) -> list[list[ScanId]]:
        return [list(g) for g in self._groups]

    def validation_scans(self) -> list[ScanId]:
        return list(self._validation)

    def load(self, scan_id: ScanId) -> LabeledCloud:
        try:
            return self._clouds[tuple(scan_id)]
        except KeyError:
            raise DataError(f"scan {scan_id} not found in {self.name} source") from None


class SemanticKittiSource(CloudSource):
    """Scans on disk in the SemanticKITTI layout (real or persisted synthetic)."""

    name = "semantickitti"

    def __init__(
        self,
        root: Path,
        taxonomy: ClassTaxonomy,
        groups: list[list[str]],
        validation: list[str],
        learning_map: LearningMap,
        cache: bool = True,
    ):
        super().__init__(taxonomy)
        self.root = Path(root)
        self.learning_map = learning_map
        self.cache = cache
        self._cached: dict[ScanId, LabeledCloud] = {}
        self._refs: dict[ScanId, ScanRef] = {}
        self._groups: list[list[ScanId]] = []
        for sequences in groups:
            refs = enumerate_split(self.root, sequences)
            self._groups.append([ref.scan_id for ref in refs])
            self._refs.update((ref.scan_id, ref) for ref in refs)
        refs = enumerate_split(self.root, validation)
        self._validation = [ref.scan_id for ref in refs]
        self._refs.update((ref.scan_id, ref) for ref in refs)

    @classmethod
    def from_manifest(cls, root: Path, taxonomy: ClassTaxonomy | None = None, cache: bool = True) -> "SemanticKittiSource":
        """Open a dataset written by ``write_synthetic``."""
        manifest_path = Path(root) / MANIFEST_NAME
        if not manifest_path.exists():
            raise DataError(f"File not found: {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{manifest_path}: line {e.lineno}: {e.msg}") from e
        taxonomy = taxonomy or resolve_taxonomy(manifest["taxonomy"])
        return cls(
            root,
            taxonomy,
            groups=[[seq] for seq in manifest["group_sequences"]],
            validation=manifest["validation_sequences"],
            learning_map=LearningMap.identity(taxonomy),
            cache=cache,
        )

    def group_scans(self) -> list[list[ScanId]]:
        return [list(g) for g in self._groups]

    def validation_scans(self) -> list[ScanId]:
        return list(self._validation)

    def load(self, scan_id: ScanId) -> LabeledCloud:
        scan_id = tuple(scan_id)
        if scan_id in self._cached:
            return self._cached[scan_id]
        ref = self._refs.get(scan_id)
        if ref is None:
            raise DataError(f"scan {scan_id} not found under {self.root}")
        cloud = read_scan(ref.scan_path, ref.label_path, self.learning_map)
        if self.cache:
            self._cached[scan_id] = cloud
        return cloud


class DatasetConfig(BaseModel):
    """Where an experiment's data comes from."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "semantickitti"] = "synthetic"
    # synthetic: directory written by `lidarcl synth` (generated in memory if unset)
    root: Path | None = None
    synth: SynthConfig = Field(default_factory=SynthConfig)
    groups: list[list[str]] | None = None
    validation: list[str] | None = None
    learning_map: Path | None = None
    strict: bool = True
    cache: bool = True

    @model_validator(mode="after")
    def _check_validation_split(self) -> "DatasetConfig":
        if self.kind == "synthetic" and self.root is None and self.synth.validation_scans == 0:
            raise ValueError("synth.validation_scans must be at least 1; every step is evaluated on held-out scans")
        if self.validation is not None and not self.validation:
            raise ValueError("validation lists no sequences; every step is evaluated on held-out scans")
        return self


def open_source(config: DatasetConfig, taxonomy: ClassTaxonomy) -> CloudSource:
    """Build the source described by ``config`` for an experiment on ``taxonomy``."""
    if config.kind == "synthetic":
        if config.root is not None:
            source = SemanticKittiSource.from_manifest(config.root, taxonomy, cache=config.cache)
            logger.info("opened synthetic dataset at %s", config.root)
            return source
        generated = resolve_taxonomy(config.synth.taxonomy)
        if generated.names != taxonomy.names:
            raise ConfigError(
                f"synthetic taxonomy '{config.synth.taxonomy}' has classes {list(generated.names)}, "
                f"experiment expects {list(taxonomy.names)}"
            )
        return MemorySource.from_synthetic(generate_synthetic(config.synth), taxonomy)

    if config.root is None:
        raise ConfigError("semantickitti dataset requires 'root' (or `lidarcl config dataset.root PATH`)")
    if config.learning_map is not None:
        learning_map = LearningMap.from_file(config.learning_map, taxonomy, strict=config.strict)
    else:
        learning_map = LearningMap.default(taxonomy, strict=config.strict)
    groups = config.groups or [list(g) for g in CIL_SEQUENCE_GROUPS]
    validation = config.validation or list(VALIDATION_SEQUENCES)
    return SemanticKittiSource(
        config.root,
        taxonomy,
        groups=[[normalize_sequence(s) for s in g] for g in groups],
        validation=[normalize_sequence(s) for s in validation],
        learning_map=learning_map,
        cache=config.cache,
    )
