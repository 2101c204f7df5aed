"""Training objectives and their gradients.

Every loss here returns its value together with the gradient wrt the
current model's logits (and features, for feature distillation), which is
what ``model.gradients`` back-propagates.

    total = ce + lambda * kd

UNLABELED points never contribute. Probabilities are clamped to >= 1e-12
before any log.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from lidarcl.errors import ConfigError, DataError, UnsupportedQueryError
from lidarcl.model import Prediction
from lidarcl.taxonomy import BACKGROUND, UNLABELED, ClassTaxonomy

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class KDMode(str, Enum):
    """What the distillation term compares."""
    NONE = "none"
    OUTPUT = "output"
    FEATURE_L1 = "feature_l1"
    FEATURE_L2 = "feature_l2"
    BOTH = "both"

    @property
    def uses_output(self) -> bool:
        return self in (KDMode.OUTPUT, KDMode.BOTH)

    @property
    def feature_norm(self) -> int | None:
        return {KDMode.FEATURE_L1: 1, KDMode.FEATURE_L2: 2}.get(self)


class OutputVariant(str, Enum):
    """How current probabilities are matched to the previous head."""
    STANDARD = "standard"
    JOINED_UNKNOWNS = "joined_unknowns"
    COARSE_SUM = "coarse_sum"


class LossConfig(BaseModel):
    """Distillation settings; ``lambda`` weighs the kd term."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lambda_: float = Field(1.0, alias="lambda", ge=0.0, allow_inf_nan=False)
    kd_mode: KDMode = KDMode.OUTPUT
    output_variant: OutputVariant = OutputVariant.STANDARD
    # feature norm used by BOTH
    feature_p: Literal[1, 2] = 2

    @property
    def feature_norm(self) -> int | None:
        if self.kd_mode is KDMode.BOTH:
            return self.feature_p
        return self.kd_mode.feature_norm


@dataclass(frozen=True)
class LossValue:
    total: float
    ce_part: float
    kd_part: float


def softmax_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient wrt logits from the gradient ``g`` wrt softmax outputs ``s``."""
    return s * (g - (s * g).sum(axis=1, keepdims=True))


def _label_rows(class_list: Sequence[int], labels: np.ndarray) -> np.ndarray:
    """Head row of every label; UNLABELED -> -1."""
    lut = np.full(UNLABELED + 1, -2, dtype=np.int64)
    lut[UNLABELED] = -1
    for row, cid in enumerate(class_list):
        lut[cid] = row
    rows = lut[np.asarray(labels, dtype=np.int64)]
    if (rows == -2).any():
        bad = sorted(int(v) for v in np.unique(np.asarray(labels)[rows == -2]))
        raise DataError(f"labels {bad} are not in the model head {tuple(class_list)}")
    return rows


def _contributing(labels: np.ndarray | None, n: int) -> np.ndarray:
    if labels is None:
        return np.ones(n, dtype=bool)
    return np.asarray(labels) != UNLABELED


# -- cross-entropy -------------------------------------------------------------

def cross_entropy_grad(pred: Prediction, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean -log p[true class] over labeled points, with d/dlogits."""
    rows = _label_rows(pred.class_list, labels)
    mask = rows >= 0
    count = int(mask.sum())
    d_logits = np.zeros_like(pred.logits)
    if count == 0:
        logger.debug("cross-entropy over a batch with no labeled points")
        return 0.0, d_logits
    idx = np.nonzero(mask)[0]
    p_true = np.maximum(pred.softmax[idx, rows[idx]], PROB_FLOOR)
    value = float(-np.log(p_true).sum() / count)
    d_logits[idx] = pred.softmax[idx]
    d_logits[idx, rows[idx]] -= 1.0
    return value, d_logits / count


def cross_entropy(pred: Prediction, labels: np.ndarray) -> float:
    return cross_entropy_grad(pred, labels)[0]


# -- output distillation -------------------------------------------------------

def aggregate_by_ancestor(
    probs: np.ndarray,
    class_list: Sequence[int],
    taxonomy: ClassTaxonomy,
    level: int,
) -> tuple[np.ndarray, tuple[int, ...], np.ndarray]:
    """Sum probabilities of head rows into their ancestors at ``level``.

    Rows coarser than ``level`` have no ancestor there and are dropped; the
    remaining mass is renormalized. Returns (aggregated distribution, level
    classes, group index per head row with -1 for dropped rows).
    """
    if not taxonomy.has_hierarchy:
        raise UnsupportedQueryError("coarse aggregation requires a taxonomy with a hierarchy")
    targets = taxonomy.level_classes(level)
    lut = taxonomy.ancestor_lut(level)
    column = {cid: j for j, cid in enumerate(targets)}
    group = np.array([column.get(int(lut[c]), -1) for c in class_list], dtype=np.int64)
    summed = np.zeros((probs.shape[0], len(targets)))
    for row, j in enumerate(group):
        if j >= 0:
            summed[:, j] += probs[:, row]
    total = summed.sum(axis=1, keepdims=True)
    return summed / np.maximum(total, PROB_FLOOR), targets, group


def _check_prefix(prev: Prediction, cur: Prediction) -> None:
    n = len(prev.class_list)
    if tuple(cur.class_list[:n]) != tuple(prev.class_list):
        raise ConfigError(
            f"previous head {prev.class_list} is not a prefix of current head {cur.class_list}"
        )
    if prev.softmax.shape[0] != cur.softmax.shape[0]:
        raise DataError("previous and current predictions cover different point counts")


def output_kd_grad(
    prev: Prediction,
    cur: Prediction,
    variant: OutputVariant = OutputVariant.STANDARD,
    *,
    labels: np.ndarray | None = None,
    taxonomy: ClassTaxonomy | None = None,
    level: int | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the current head against the previous model's softmax.

    STANDARD compares old-class rows directly (new classes carry zero target
    mass). JOINED_UNKNOWNS folds every new-class probability into the
    background slot. COARSE_SUM sums both heads to the previous hierarchy
    ``level`` before comparing.
    """
    _check_prefix(prev, cur)
    mask = _contributing(labels, cur.softmax.shape[0])
    count = int(mask.sum())
    d_logits = np.zeros_like(cur.logits)
    if count == 0:
        return 0.0, d_logits
    idx = np.nonzero(mask)[0]
    s = cur.softmax[idx]
    n_old = len(prev.class_list)

    if variant is OutputVariant.STANDARD:
        q = prev.softmax[idx]
        a = np.maximum(s[:, :n_old], PROB_FLOOR)
        value = -(q * np.log(a)).sum()
        g = np.zeros_like(s)
        g[:, :n_old] = -q / a

    elif variant is OutputVariant.JOINED_UNKNOWNS:
        if BACKGROUND not in prev.class_list:
            raise ConfigError("joined-unknowns distillation needs a background row in the previous head")
        bg = prev.class_list.index(BACKGROUND)
        q = prev.softmax[idx]
        a = s[:, :n_old].copy()
        a[:, bg] += s[:, n_old:].sum(axis=1)
        a = np.maximum(a, PROB_FLOOR)
        value = -(q * np.log(a)).sum()
        g = np.empty_like(s)
        g[:, :n_old] = -q / a
        g[:, n_old:] = g[:, [bg]]

    elif variant is OutputVariant.COARSE_SUM:
        if taxonomy is None or level is None:
            raise UnsupportedQueryError("coarse-sum distillation requires a taxonomy hierarchy and a level")
        q, _, _ = aggregate_by_ancestor(prev.softmax[idx], prev.class_list, taxonomy, level)
        _, _, group = aggregate_by_ancestor(s, cur.class_list, taxonomy, level)
        # Unnormalized sums: a_P per group and A = sum over kept rows.
        kept = group >= 0
        a_sum = np.zeros_like(q)
        for row in np.nonzero(kept)[0]:
            a_sum[:, group[row]] += s[:, row]
        a_sum = np.maximum(a_sum, PROB_FLOOR)
        big_a = a_sum.sum(axis=1, keepdims=True)
        big_q = q.sum(axis=1, keepdims=True)
        value = (-(q * np.log(a_sum)).sum(axis=1) + big_q[:, 0] * np.log(big_a[:, 0])).sum()
        g = np.zeros_like(s)
        per_group = -q / a_sum + big_q / big_a
        g[:, kept] = per_group[:, group[kept]]

    else:
        raise ConfigError(f"unknown output variant {variant}")

    d_logits[idx] = softmax_backward(s, g) / count
    return float(value / count), d_logits


def output_kd(
    prev: Prediction,
    cur: Prediction,
    variant: OutputVariant = OutputVariant.STANDARD,
    *,
    labels: np.ndarray | None = None,
    taxonomy: ClassTaxonomy | None = None,
    level: int | None = None,
) -> float:
    return output_kd_grad(prev, cur, variant, labels=labels, taxonomy=taxonomy, level=level)[0]


# -- feature distillation ------------------------------------------------------

def feature_kd_grad(prev_features: np.ndarray, cur_features: np.ndarray, p: int = 2) -> tuple[float, np.ndarray]:
    """Sum of per-point Lp distances divided by the number of points."""
    if prev_features.shape != cur_features.shape:
        raise DataError(
            f"feature shapes differ: {prev_features.shape} vs {cur_features.shape}"
        )
    if p not in (1, 2):
        raise ConfigError(f"feature distillation norm must be 1 or 2, got {p}")
    n = cur_features.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(cur_features)
    diff = cur_features - prev_features
    if p == 1:
        return float(np.abs(diff).sum() / n), np.sign(diff) / n
    norms = np.sqrt((diff * diff).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where(norms[:, None] > 0, diff / safe[:, None], 0.0) / n
    return float(norms.sum() / n), grad


def feature_kd(prev_features: np.ndarray, cur_features: np.ndarray, p: int = 2) -> float:
    return feature_kd_grad(prev_features, cur_features, p)[0]


# -- combined objective ---------------------------------------------------------

def combined_grad(
    cur: Prediction,
    prev: Prediction | None,
    labels: np.ndarray,
    cfg: LossConfig,
    *,
    taxonomy: ClassTaxonomy | None = None,
    level: int | None = None,
) -> tuple[LossValue, np.ndarray, np.ndarray | None]:
    """ce + lambda * kd with gradients wrt logits and features."""
    if cfg.kd_mode is KDMode.NONE and prev is not None:
        raise ConfigError("a previous model was given but distillation is disabled")
    if cfg.kd_mode is not KDMode.NONE and prev is None:
        raise ConfigError(f"{cfg.kd_mode.value} distillation requires the previous model")

    ce, d_logits = cross_entropy_grad(cur, labels)
    kd = 0.0
    d_features = None
    if cfg.kd_mode.uses_output:
        value, grad = output_kd_grad(
            prev, cur, cfg.output_variant, labels=labels, taxonomy=taxonomy, level=level
        )
        kd += value
        d_logits = d_logits + cfg.lambda_ * grad
    if cfg.feature_norm is not None:
        value, grad = feature_kd_grad(prev.features, cur.features, cfg.feature_norm)
        kd += value
        d_features = cfg.lambda_ * grad
    return LossValue(ce + cfg.lambda_ * kd, ce, kd), d_logits, d_features


def combined(
    cur: Prediction,
    prev: Prediction | None,
    labels: np.ndarray,
    cfg: LossConfig,
    *,
    taxonomy: ClassTaxonomy | None = None,
    level: int | None = None,
) -> LossValue:
    return combined_grad(cur, prev, labels, cfg, taxonomy=taxonomy, level=level)[0]


@dataclass
class Objective:
    """Loss over one batch, callable on the current model's prediction.

    ``prev`` is the frozen previous model's prediction on the same points.
    """

    labels: np.ndarray
    cfg: LossConfig
    prev: Prediction | None = None
    taxonomy: ClassTaxonomy | None = None
    level: int | None = None

    def __call__(self, pred: Prediction) -> tuple[LossValue, np.ndarray, np.ndarray | None]:
        return combined_grad(pred, self.prev, self.labels, self.cfg, taxonomy=self.taxonomy, level=self.level)
