"""Learning scenarios: per-step training sets with rewritten labels.

Each scenario kind decides, for step k, which scans are available and what
label every point carries:

    kind                 new      past          future
    SEQUENTIAL           c        c             unlabeled
    SEQUENTIAL_MASKED    c        unlabeled     unlabeled
    DISJOINT             c        background    unlabeled
    OVERLAPPED           c        background    background
    COARSE_TO_FINE       ancestor of c at hierarchy level k
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from lidarcl.errors import ConfigError, DataError, UnsupportedQueryError
from lidarcl.ingest.base import CloudSource
from lidarcl.ingest.semantickitti import ScanId, write_labels
from lidarcl.taxonomy import BACKGROUND, UNLABELED, ClassTaxonomy

logger = logging.getLogger(__name__)


class ScenarioKind(str, Enum):
    """Class-incremental learning scenarios."""
    SEQUENTIAL = "sequential"
    SEQUENTIAL_MASKED = "sequential_masked"
    DISJOINT = "disjoint"
    OVERLAPPED = "overlapped"
    COARSE_TO_FINE = "coarse_to_fine"

    @classmethod
    def parse(cls, text: str) -> "ScenarioKind":
        """Accept 'Disjoint', 'sequential-masked', 'c2f', ..."""
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        if key == "c2f":
            return cls.COARSE_TO_FINE
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(
                f"unknown scenario '{text}'. Use one of: {[k.value for k in cls]}"
            ) from None

    @property
    def produces_background(self) -> bool:
        return self in (ScenarioKind.DISJOINT, ScenarioKind.OVERLAPPED)


def check_kind(kind: ScenarioKind, taxonomy: ClassTaxonomy) -> None:
    """COARSE_TO_FINE needs one hierarchy level per learning step."""
    if kind is not ScenarioKind.COARSE_TO_FINE:
        return
    if not taxonomy.has_hierarchy:
        raise UnsupportedQueryError("coarse-to-fine scenario requires a taxonomy with a hierarchy")
    if taxonomy.num_levels != taxonomy.num_steps:
        raise ConfigError(
            f"coarse-to-fine scenario needs {taxonomy.num_steps} hierarchy levels "
            f"(one per step), taxonomy has {taxonomy.num_levels}"
        )


def label_lut(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> np.ndarray:
    """Lookup table true fine class -> transformed label; -1 for non-classes."""
    check_kind(kind, taxonomy)
    lut = np.full(UNLABELED + 1, -1, dtype=np.int64)
    if kind is ScenarioKind.COARSE_TO_FINE:
        ancestors = taxonomy.ancestor_lut(k)
        for cid in taxonomy.fine_classes:
            lut[cid] = ancestors[cid]
        return lut

    seen = taxonomy.cumulative_classes(k)
    current = taxonomy.steps[k]
    for cid in taxonomy.fine_classes:
        if cid in current:
            lut[cid] = cid
        elif kind is ScenarioKind.SEQUENTIAL:
            lut[cid] = cid if cid in seen else UNLABELED
        elif kind is ScenarioKind.SEQUENTIAL_MASKED:
            lut[cid] = UNLABELED
        elif kind is ScenarioKind.DISJOINT:
            lut[cid] = BACKGROUND if cid in seen else UNLABELED
        else:
            lut[cid] = BACKGROUND
    return lut


def transform_labels(
    kind: ScenarioKind,
    taxonomy: ClassTaxonomy,
    k: int,
    truth: np.ndarray,
    *,
    allow_unlabeled: bool = False,
) -> np.ndarray:
    """Rewrite ground truth for step ``k`` of scenario ``kind``.

    Ground truth must hold fine class ids only. Real scans contain points the
    dataset itself leaves unlabeled; ``allow_unlabeled`` passes those through.
    """
    lut = label_lut(kind, taxonomy, k)
    truth = np.asarray(truth)
    if allow_unlabeled:
        lut[UNLABELED] = UNLABELED
    out = lut[truth.astype(np.int64)]
    if (out < 0).any():
        bad = sorted(int(v) for v in np.unique(truth[out < 0]))
        raise DataError(f"ground truth contains sentinel or unknown labels {bad}")
    return out.astype(np.uint8)


def evaluation_labels(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int, truth: np.ndarray) -> np.ndarray:
    """Validation truth at step k: learned classes kept, the rest unlabeled.

    Coarse-to-fine scores against the level-k ancestors of every point.
    """
    if kind is ScenarioKind.COARSE_TO_FINE:
        return transform_labels(kind, taxonomy, k, truth, allow_unlabeled=True)
    return transform_labels(ScenarioKind.SEQUENTIAL, taxonomy, k, truth, allow_unlabeled=True)


def active_classes(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> tuple[int, ...]:
    """Label values a model must predict at step k."""
    check_kind(kind, taxonomy)
    if kind is ScenarioKind.COARSE_TO_FINE:
        return taxonomy.level_classes(k)
    if kind is ScenarioKind.SEQUENTIAL:
        return taxonomy.cumulative_order(k)
    if kind is ScenarioKind.SEQUENTIAL_MASKED:
        return taxonomy.step_classes(k)
    return (BACKGROUND, *taxonomy.step_classes(k))


def new_classes(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> tuple[int, ...]:
    """Classes first introduced at step k (drives the epoch count)."""
    if kind is ScenarioKind.COARSE_TO_FINE:
        check_kind(kind, taxonomy)
        return taxonomy.level_classes(k)
    return taxonomy.step_classes(k)


@dataclass(frozen=True)
class ScenarioPlan:
    """Assignment of scans to learning steps for one scenario."""

    kind: ScenarioKind
    taxonomy: ClassTaxonomy
    groups: tuple[tuple[ScanId, ...], ...]

    @property
    def num_steps(self) -> int:
        return len(self.groups)


def make_plan(kind: ScenarioKind, taxonomy: ClassTaxonomy, source: CloudSource) -> ScenarioPlan:
    """Resolve per-step scan lists.

    Sequence groups map one-to-one to steps; a single-step taxonomy takes
    every training scan. OVERLAPPED ignores the groups: its step k holds every
    training scan with at least one point of a new class.
    """
    check_kind(kind, taxonomy)
    source_groups = source.group_scans()
    num_steps = taxonomy.num_steps

    if kind is ScenarioKind.OVERLAPPED:
        every = source.training_scans()
        groups = []
        for k in range(num_steps):
            current = np.array(sorted(taxonomy.steps[k]), dtype=np.int64)
            groups.append(tuple(s for s in every if np.isin(source.labels(s), current).any()))
    elif len(source_groups) == num_steps:
        groups = [tuple(g) for g in source_groups]
    elif num_steps == 1:
        groups = [tuple(source.training_scans())]
    else:
        raise ConfigError(
            f"dataset has {len(source_groups)} sequence groups but taxonomy has {num_steps} steps"
        )

    if kind is not ScenarioKind.OVERLAPPED:
        seen: dict[ScanId, int] = {}
        for k, group in enumerate(groups):
            for scan_id in group:
                if scan_id in seen:
                    raise DataError(f"scan {scan_id} assigned to steps {seen[scan_id]} and {k}")
                seen[scan_id] = k

    for k, group in enumerate(groups):
        logger.debug("%s step %d: %d scans", kind.value, k, len(group))
    return ScenarioPlan(kind, taxonomy, tuple(groups))


@dataclass
class StepDataset:
    """Training set of step k: transformed label maps of the step's scans."""

    step: int
    scans: list[tuple[ScanId, np.ndarray]]
    active_classes: tuple[int, ...]
    source: CloudSource | None = field(default=None, repr=False)

    @property
    def scan_ids(self) -> list[ScanId]:
        return [scan_id for scan_id, _ in self.scans]

    @property
    def num_points(self) -> int:
        return sum(len(labels) for _, labels in self.scans)

    def labels_for(self, scan_id: ScanId) -> np.ndarray:
        for sid, labels in self.scans:
            if sid == tuple(scan_id):
                return labels
        raise DataError(f"scan {scan_id} not in step {self.step}")

    def points(self, scan_id: ScanId) -> np.ndarray:
        if self.source is None:
            raise DataError(f"step {self.step} has no data source attached")
        return self.source.load(scan_id).points

    def with_labels(self, scans: list[tuple[ScanId, np.ndarray]], active: tuple[int, ...]) -> "StepDataset":
        return replace(self, scans=scans, active_classes=active)


def build_step(plan: ScenarioPlan, k: int, source: CloudSource) -> StepDataset:
    """Apply the step's label transform to every scan of its group."""
    if not 0 <= k < plan.num_steps:
        raise ConfigError(f"step {k} out of range [0, {plan.num_steps})")
    scans = []
    for scan_id in plan.groups[k]:
        truth = source.labels(scan_id)
        scans.append((tuple(scan_id), transform_labels(plan.kind, plan.taxonomy, k, truth, allow_unlabeled=True)))
    return StepDataset(k, scans, active_classes(plan.kind, plan.taxonomy, k), source)


class StepSummary(BaseModel):
    """One row of the plan summary."""

    step: int
    scans: int
    points: int
    labeled_pct: float
    class_counts: dict[str, int]
    class_share: dict[str, float]


def summarize_plan(plan: ScenarioPlan, source: CloudSource) -> list[StepSummary]:
    """Scans, labeled-point percentage and per-class histogram per step.

    ``class_share`` divides a step's ground-truth count of each class by the
    class's count over the whole training set.
    """
    taxonomy = plan.taxonomy
    minlength = UNLABELED + 1
    totals = np.zeros(minlength, dtype=np.int64)
    for scan_id in source.training_scans():
        totals += np.bincount(source.labels(scan_id), minlength=minlength)

    summaries = []
    for k in range(plan.num_steps):
        step = build_step(plan, k, source)
        counts = np.zeros(minlength, dtype=np.int64)
        labeled = 0
        for scan_id, labels in step.scans:
            counts += np.bincount(source.labels(scan_id), minlength=minlength)
            labeled += int((labels != UNLABELED).sum())
        points = step.num_points
        summaries.append(StepSummary(
            step=k,
            scans=len(step.scans),
            points=points,
            labeled_pct=100.0 * labeled / points if points else 0.0,
            class_counts={taxonomy.name_of(c): int(counts[c]) for c in taxonomy.fine_classes},
            class_share={
                taxonomy.name_of(c): float(counts[c] / totals[c]) if totals[c] else 0.0
                for c in taxonomy.fine_classes
            },
        ))
    return summaries


def label_path(root: Path, step: int, scan_id: ScanId, suffix: str = "") -> Path:
    return Path(root) / f"step{step}" / scan_id[0] / f"{scan_id[1]}.label{suffix}"


def write_step(step: StepDataset, root: Path, suffix: str = "") -> Path:
    """Persist transformed labels and a ``step<k>.json`` manifest.

    Inpainted label sets use ``suffix='.ip'`` so they sit beside the
    scenario outputs without replacing them.
    """
    root = Path(root)
    entries = []
    for scan_id, labels in step.scans:
        path = label_path(root, step.step, scan_id, suffix)
        write_labels(labels, path)
        entries.append({"scan_id": list(scan_id), "labels": str(path.relative_to(root))})
    manifest = {
        "step": step.step,
        "active_classes": list(step.active_classes),
        "scans": entries,
    }
    manifest_path = root / f"step{step.step}{suffix}.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path
