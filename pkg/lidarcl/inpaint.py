"""Background self-inpainting.

At step k > 0, BACKGROUND points of the training labels are replaced by the
previous model's prediction wherever that prediction is confident:

    rho = 1  iff  top1 - top2 > tau1  and  top1 > tau2

Every other label, UNLABELED included, is left as is.
"""

import logging

import numpy as np
from pydantic import BaseModel, Field

from lidarcl.errors import ConfigError, NumericalError
from lidarcl.model import SegmenterState, forward
from lidarcl.scenario import StepDataset
from lidarcl.taxonomy import BACKGROUND, ClassTaxonomy

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-6


class InpaintConfig(BaseModel):
    """Margin (tau1) and confidence (tau2) thresholds."""

    tau1: float = Field(0.2, ge=0.0, le=1.0)
    tau2: float = Field(0.7, ge=0.0, le=1.0)


class InpaintStats(BaseModel):
    candidates: int = 0
    inpainted: int = 0
    per_class: dict[str, int] = Field(default_factory=dict)

    def merge(self, other: "InpaintStats") -> "InpaintStats":
        per_class = dict(self.per_class)
        for name, count in other.per_class.items():
            per_class[name] = per_class.get(name, 0) + count
        return InpaintStats(
            candidates=self.candidates + other.candidates,
            inpainted=self.inpainted + other.inpainted,
            per_class=per_class,
        )


def _top_two(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if probs.shape[1] == 1:
        return probs[:, 0], np.zeros(probs.shape[0])
    part = np.partition(probs, -2, axis=1)
    return part[:, -1], part[:, -2]


def rho_mask(probs: np.ndarray, cfg: InpaintConfig) -> np.ndarray:
    """Vectorized ``rho`` over softmax rows."""
    probs = np.atleast_2d(probs)
    sums = probs.sum(axis=1)
    if (probs < 0).any() or np.abs(sums - 1.0).max(initial=0.0) > NORMALIZATION_TOLERANCE:
        raise NumericalError("inpainting expects normalized softmax rows")
    top1, top2 = _top_two(probs)
    return (top1 - top2 > cfg.tau1) & (top1 > cfg.tau2)


def rho(row: np.ndarray, cfg: InpaintConfig) -> int:
    return int(rho_mask(np.asarray(row, dtype=np.float64)[None, :], cfg)[0])


def inpaint_labels(
    labels: np.ndarray, probs: np.ndarray, class_list: tuple[int, ...], cfg: InpaintConfig
) -> tuple[np.ndarray, np.ndarray]:
    """New labels and the mask of points that changed."""
    predicted = np.asarray(class_list, dtype=np.int64)[np.argmax(probs, axis=1)]
    change = (labels == BACKGROUND) & rho_mask(probs, cfg) & (predicted != BACKGROUND)
    return np.where(change, predicted, labels).astype(np.uint8), change


def inpaint_step(
    step: StepDataset,
    prev_model: SegmenterState | None,
    cfg: InpaintConfig,
    taxonomy: ClassTaxonomy,
) -> tuple[StepDataset, InpaintStats]:
    """Pseudo-label the step's BACKGROUND points with ``prev_model``.

    The returned step trains on every class up to step k plus BACKGROUND.
    """
    if step.step == 0:
        raise ConfigError("labels at step 0 are not inpainted")
    if prev_model is None:
        raise ConfigError("inpainting requires the previous step's model")
    allowed = set(taxonomy.cumulative_classes(step.step - 1)) | {BACKGROUND}
    foreign = [c for c in prev_model.class_list if c not in allowed]
    if foreign:
        raise ConfigError(f"previous model predicts classes {foreign} not learned before step {step.step}")

    stats = InpaintStats()
    scans = []
    for scan_id, labels in step.scans:
        probs = forward(prev_model, step.points(scan_id)).softmax
        new, change = inpaint_labels(labels, probs, prev_model.class_list, cfg)
        hist = np.bincount(new[change], minlength=256)
        stats = stats.merge(InpaintStats(
            candidates=int((labels == BACKGROUND).sum()),
            inpainted=int(change.sum()),
            per_class={taxonomy.name_of(c): int(hist[c]) for c in np.nonzero(hist)[0]},
        ))
        scans.append((scan_id, new))

    logger.info(
        "step %d: inpainted %d of %d background points (tau1=%s, tau2=%s)",
        step.step, stats.inpainted, stats.candidates, cfg.tau1, cfg.tau2,
    )
    active = (BACKGROUND, *taxonomy.cumulative_order(step.step))
    return step.with_labels(scans, active), stats
