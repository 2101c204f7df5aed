"""Confusion matrices and the per-step scores derived from them."""

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, Field

from lidarcl.errors import DataError
from lidarcl.inpaint import InpaintStats
from lidarcl.scenario import ScenarioKind
from lidarcl.taxonomy import BACKGROUND, UNLABELED, ClassTaxonomy


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts over ``classes``; rows are ground truth, columns prediction."""

    classes: tuple[int, ...]
    counts: np.ndarray

    @classmethod
    def empty(cls, classes: Sequence[int]) -> "ConfusionMatrix":
        classes = tuple(int(c) for c in classes)
        return cls(classes, np.zeros((len(classes), len(classes)), dtype=np.int64))

    def index(self, cid: int) -> int:
        try:
            return self.classes.index(cid)
        except ValueError:
            raise DataError(f"class {cid} is not in the confusion matrix") from None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise DataError("cannot merge confusion matrices over different classes")
        return ConfusionMatrix(self.classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, truth: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    """Add one scan's points; UNLABELED ground truth is skipped."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise DataError(f"{truth.shape[0]} truth labels for {pred.shape[0]} predictions")
    lut = np.full(UNLABELED + 1, -1, dtype=np.int64)
    lut[list(cm.classes)] = np.arange(len(cm.classes))
    keep = truth != UNLABELED
    rows = lut[truth[keep]]
    cols = lut[pred[keep]]
    if (rows < 0).any() or (cols < 0).any():
        bad = sorted(set(truth[keep][rows < 0].tolist()) | set(pred[keep][cols < 0].tolist()))
        raise DataError(f"labels {bad} outside the evaluation classes {cm.classes}")
    n = len(cm.classes)
    added = np.bincount(rows * n + cols, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.classes, cm.counts + added)


def iou(cm: ConfusionMatrix, cid: int) -> float | None:
    """TP / (TP + FP + FN); None when the class never occurs in truth or prediction."""
    i = cm.index(cid)
    tp = cm.counts[i, i]
    denominator = cm.counts[i, :].sum() + cm.counts[:, i].sum() - tp
    if denominator == 0:
        return None
    return float(tp / denominator)


def precision(cm: ConfusionMatrix, cid: int) -> float | None:
    i = cm.index(cid)
    predicted = cm.counts[:, i].sum()
    if predicted == 0:
        return None
    return float(cm.counts[i, i] / predicted)


def _mean(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


class StepReport(BaseModel):
    """Scores of one learning step, plus what is needed to recompute them."""

    step: int
    scenario: str
    class_names: list[str]
    per_class_iou: dict[str, float | None]
    miou_steps: list[float | None]
    miou: float | None
    sigma: float | None
    sigma_kind: str = "population"
    pa: float
    pp: float | None
    confusion_classes: list[int]
    confusion: list[list[int]]
    strategy: str | None = None
    inpaint: InpaintStats | None = None
    lr_unit: str | None = None
    lr_values: list[float] = Field(default_factory=list)
    config: dict[str, Any] | None = None

    def matrix(self) -> ConfusionMatrix:
        return ConfusionMatrix(tuple(self.confusion_classes), np.asarray(self.confusion, dtype=np.int64))


def evaluation_classes(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> tuple[int, ...]:
    """Classes scored at step k: learned classes, or hierarchy level k."""
    if kind is ScenarioKind.COARSE_TO_FINE:
        return taxonomy.level_classes(k)
    return taxonomy.cumulative_order(k)


def step_groups(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> list[tuple[int, ...]]:
    """Evaluated classes split by the learning step that introduced them."""
    classes = evaluation_classes(kind, taxonomy, k)
    return [tuple(c for c in classes if taxonomy.step_of(c) == j) for j in range(k + 1)]


def report(cm: ConfusionMatrix, taxonomy: ClassTaxonomy, k: int, kind: ScenarioKind = ScenarioKind.DISJOINT) -> StepReport:
    """Per-class IoU, mIoU per step group and overall, PA, PP and sigma.

    ``cm`` covers BACKGROUND plus the evaluation classes. BACKGROUND is a
    prediction column (a miss) but is never scored.
    """
    if cm.total == 0:
        raise DataError("empty confusion matrix: no evaluated points")
    classes = evaluation_classes(kind, taxonomy, k)
    ious = {c: iou(cm, c) for c in classes}
    defined = [v for v in ious.values() if v is not None]
    precisions = [precision(cm, c) for c in classes]
    return StepReport(
        step=k,
        scenario=kind.value,
        class_names=[taxonomy.name_of(c) for c in classes],
        per_class_iou={taxonomy.name_of(c): v for c, v in ious.items()},
        miou_steps=[_mean([ious[c] for c in group]) for group in step_groups(kind, taxonomy, k)],
        miou=_mean(defined),
        sigma=float(np.std(defined)) if defined else None,
        pa=float(np.trace(cm.counts) / cm.total),
        pp=_mean(precisions),
        confusion_classes=list(cm.classes),
        confusion=cm.counts.tolist(),
    )


def evaluation_matrix(kind: ScenarioKind, taxonomy: ClassTaxonomy, k: int) -> ConfusionMatrix:
    return ConfusionMatrix.empty((BACKGROUND, *evaluation_classes(kind, taxonomy, k)))
