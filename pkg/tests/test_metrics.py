"""Tests for confusion matrices and step reports."""

import math
import statistics

import numpy as np
import pytest

from lidarcl.errors import DataError
from lidarcl.metrics import (
    ConfusionMatrix,
    StepReport,
    accumulate,
    evaluation_classes,
    evaluation_matrix,
    iou,
    precision,
    report,
    step_groups,
)
from lidarcl.scenario import ScenarioKind
from lidarcl.taxonomy import BACKGROUND, UNLABELED, ClassTaxonomy


@pytest.fixture
def two_class() -> ClassTaxonomy:
    return ClassTaxonomy(["a", "b"], [["a", "b"]])


def brute_force(classes, truth, pred) -> np.ndarray:
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth, pred):
        if t == UNLABELED:
            continue
        counts[classes.index(t), classes.index(p)] += 1
    return counts


class TestAccumulate:
    """Tests for building confusion matrices."""

    def test_hand_example(self):
        cm = accumulate(ConfusionMatrix.empty((0, 1)), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))

        assert cm.counts.tolist() == [[1, 1], [0, 2]]
        assert iou(cm, 0) == pytest.approx(1 / 2)
        assert iou(cm, 1) == pytest.approx(2 / 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        classes = (0, 3, 5, 9)
        truth = rng.choice([*classes, UNLABELED], size=3000)
        pred = rng.choice(classes, size=3000)

        cm = accumulate(ConfusionMatrix.empty(classes), truth, pred)

        assert np.array_equal(cm.counts, brute_force(classes, truth, pred))
        assert cm.total == int((truth != UNLABELED).sum())

    def test_additive_over_scans(self):
        """Accumulating scan by scan equals accumulating the concatenation."""
        rng = np.random.default_rng(1)
        classes = (0, 1, 2)
        scans = [(rng.choice(classes, size=n), rng.choice(classes, size=n)) for n in (10, 250, 3)]

        cm = ConfusionMatrix.empty(classes)
        for truth, pred in scans:
            cm = accumulate(cm, truth, pred)
        separate = sum(
            (accumulate(ConfusionMatrix.empty(classes), t, p) for t, p in scans[1:]),
            accumulate(ConfusionMatrix.empty(classes), *scans[0]),
        )
        joined = accumulate(
            ConfusionMatrix.empty(classes),
            np.concatenate([t for t, _ in scans]),
            np.concatenate([p for _, p in scans]),
        )

        assert np.array_equal(cm.counts, joined.counts)
        assert np.array_equal(separate.counts, joined.counts)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            accumulate(ConfusionMatrix.empty((0, 1)), np.array([0, 1]), np.array([0]))

    def test_label_outside_classes(self):
        with pytest.raises(DataError, match=r"\[7\]"):
            accumulate(ConfusionMatrix.empty((0, 1)), np.array([0, 7]), np.array([0, 1]))

    def test_merge_different_classes(self):
        with pytest.raises(DataError, match="different classes"):
            ConfusionMatrix.empty((0, 1)) + ConfusionMatrix.empty((0, 2))


class TestScores:
    """Tests for per-class scores."""

    def test_absent_class_is_undefined(self):
        cm = accumulate(ConfusionMatrix.empty((0, 1, 2)), np.array([0, 1]), np.array([0, 1]))
        assert iou(cm, 2) is None
        assert precision(cm, 2) is None

    def test_precision(self):
        cm = accumulate(ConfusionMatrix.empty((0, 1)), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
        assert precision(cm, 1) == pytest.approx(2 / 3)
        assert precision(cm, 0) == pytest.approx(1.0)

    def test_unknown_class(self):
        with pytest.raises(DataError):
            iou(ConfusionMatrix.empty((0, 1)), 4)


class TestReport:
    """Tests for report."""

    def test_hand_example(self, two_class):
        """IoU 1/2 and 2/3 -> mIoU 7/12."""
        cm = accumulate(evaluation_matrix(ScenarioKind.DISJOINT, two_class, 0),
                        np.array([1, 1, 2, 2]), np.array([1, 2, 2, 2]))
        result = report(cm, two_class, 0)

        assert result.per_class_iou == {"a": pytest.approx(1 / 2), "b": pytest.approx(2 / 3)}
        assert result.miou == pytest.approx(7 / 12)
        assert result.miou_steps == [pytest.approx(7 / 12)]
        assert result.pa == pytest.approx(3 / 4)
        assert result.sigma == pytest.approx(np.std([1 / 2, 2 / 3]))
        assert result.sigma_kind == "population"

    def test_perfect_prediction(self, two_class):
        truth = np.array([1, 2, 2, 1, 0])
        cm = accumulate(evaluation_matrix(ScenarioKind.DISJOINT, two_class, 0), truth, truth)
        result = report(cm, two_class, 0)

        assert result.pa == 1.0
        assert result.miou == 1.0
        assert result.sigma == 0.0
        assert result.pp == 1.0

    def test_background_is_not_scored(self, two_class):
        """Predicting BACKGROUND is a miss; BACKGROUND gets no IoU."""
        cm = accumulate(evaluation_matrix(ScenarioKind.DISJOINT, two_class, 0),
                        np.array([1, 2]), np.array([BACKGROUND, 2]))
        result = report(cm, two_class, 0)

        assert set(result.per_class_iou) == {"a", "b"}
        assert result.per_class_iou["a"] == 0.0
        assert result.pa == pytest.approx(0.5)

    def test_undefined_classes_skipped_in_mean(self, two_class):
        cm = accumulate(evaluation_matrix(ScenarioKind.DISJOINT, two_class, 0), np.array([1]), np.array([1]))
        result = report(cm, two_class, 0)

        assert result.per_class_iou["b"] is None
        assert result.miou == 1.0

    def test_empty_matrix(self, two_class):
        with pytest.raises(DataError, match="empty"):
            report(evaluation_matrix(ScenarioKind.DISJOINT, two_class, 0), two_class, 0)

    def test_step_groups_split_the_mean(self, desk):
        """mIoU per step group over the classes learned so far."""
        kind = ScenarioKind.DISJOINT
        cm = evaluation_matrix(kind, desk, 1)
        # step 0 classes perfect, step 1 classes always wrong
        truth = np.array([1, 2, 3, 4, 5])
        pred = np.array([1, 2, 3, BACKGROUND, BACKGROUND])
        result = report(accumulate(cm, truth, pred), desk, 1, kind)

        assert result.miou_steps == [1.0, 0.0]
        assert result.miou == pytest.approx(3 / 5)

    def test_round_trips_through_json(self, two_class):
        truth = np.array([1, 1, 2, 2])
        cm = accumulate(evaluation_matrix(ScenarioKind.DISJOINT, two_class, 0), truth, np.array([1, 2, 2, 2]))
        result = report(cm, two_class, 0)

        restored = StepReport.model_validate_json(result.model_dump_json())

        assert restored == result
        assert np.array_equal(restored.matrix().counts, cm.counts)


def recount(classes, groups, truth, pred) -> dict:
    """Scores straight from the point lists, without a confusion matrix."""
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    correct = labeled = 0
    for t, p in zip(truth.tolist(), pred.tolist()):
        if t == UNLABELED:
            continue
        labeled += 1
        if t == p:
            correct += 1
            if t in tp:
                tp[t] += 1
            continue
        if t in fn:
            fn[t] += 1
        if p in fp:
            fp[p] += 1
    ious = {c: tp[c] / (tp[c] + fp[c] + fn[c]) if tp[c] + fp[c] + fn[c] else None for c in classes}
    precisions = [tp[c] / (tp[c] + fp[c]) for c in classes if tp[c] + fp[c]]
    defined = [v for v in ious.values() if v is not None]

    def mean(values):
        values = [v for v in values if v is not None]
        return math.fsum(values) / len(values) if values else None

    return {
        "ious": ious,
        "miou_steps": [mean(ious[c] for c in group) for group in groups],
        "miou": mean(defined),
        "sigma": statistics.pstdev(defined) if defined else None,
        "pa": correct / labeled,
        "pp": mean(precisions),
    }


def assert_close(actual, expected):
    if expected is None:
        assert actual is None
    else:
        assert actual == pytest.approx(expected, rel=0, abs=1e-12)


class TestReportOracle:
    """Reports against an independent recount on random label maps."""

    def test_random_maps(self, desk):
        kind = ScenarioKind.DISJOINT
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            k = int(rng.integers(desk.num_steps))
            cm = evaluation_matrix(kind, desk, k)
            classes = evaluation_classes(kind, desk, k)
            # Skewed class frequencies so some classes go missing.
            weights = rng.dirichlet(np.full(len(cm.classes), 0.5))
            n = int(rng.integers(1, 1001))
            truth = rng.choice(cm.classes, size=n, p=weights)
            truth[rng.random(n) < 0.1] = UNLABELED
            pred = rng.choice(cm.classes, size=n, p=rng.dirichlet(np.ones(len(cm.classes))))
            cm = accumulate(cm, truth, pred)

            assert np.array_equal(cm.counts, brute_force(cm.classes, truth, pred))
            if cm.total == 0:
                with pytest.raises(DataError):
                    report(cm, desk, k, kind)
                continue
            result = report(cm, desk, k, kind)
            expected = recount(classes, step_groups(kind, desk, k), truth, pred)

            for c in classes:
                assert_close(result.per_class_iou[desk.name_of(c)], expected["ious"][c])
            assert len(result.miou_steps) == len(expected["miou_steps"])
            for got, want in zip(result.miou_steps, expected["miou_steps"]):
                assert_close(got, want)
            for field in ("miou", "sigma", "pa", "pp"):
                assert_close(getattr(result, field), expected[field])

    def test_merge_order_does_not_matter(self, desk):
        """Per-scan matrices summed in any order give the same report."""
        kind = ScenarioKind.DISJOINT
        rng = np.random.default_rng(7)
        classes = evaluation_matrix(kind, desk, 2).classes
        scans = []
        for _ in range(12):
            n = int(rng.integers(1, 300))
            truth = rng.choice([*classes, UNLABELED], size=n)
            scans.append(accumulate(evaluation_matrix(kind, desk, 2), truth, rng.choice(classes, size=n)))

        reference = report(sum(scans[1:], scans[0]), desk, 2, kind)
        for _ in range(20):
            order = rng.permutation(len(scans))
            shuffled = [scans[i] for i in order]
            assert report(sum(shuffled[1:], shuffled[0]), desk, 2, kind) == reference


class TestEvaluationClasses:
    """Tests for which classes are scored per step."""

    def test_incremental_scenarios(self, desk):
        assert evaluation_classes(ScenarioKind.SEQUENTIAL, desk, 1) == (1, 2, 3, 4, 5)
        assert evaluation_matrix(ScenarioKind.OVERLAPPED, desk, 0).classes == (0, 1, 2, 3)

    def test_coarse_to_fine(self, desk):
        kind = ScenarioKind.COARSE_TO_FINE
        assert evaluation_classes(kind, desk, 0) == (9, 10, 11)
        assert evaluation_classes(kind, desk, 1) == (12, 13, 14, 15, 16, 17)
        assert evaluation_classes(kind, desk, 2) == tuple(range(1, 9))

    def test_step_groups(self, desk):
        assert step_groups(ScenarioKind.DISJOINT, desk, 2) == [(1, 2, 3), (4, 5), (6, 7, 8)]
