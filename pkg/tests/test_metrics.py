"""Unit tests for the evaluation metrics and the gain summary."""

import math

import numpy as np
import pytest
import torch

from densemtl.metrics import (
    confusion_matrix,
    delta_metric,
    f1,
    mean_angular_error,
    miou,
    miou_from_confusion,
    rmse,
)

from reference_rows import DELTA_ROWS


def miou_loops(pred, target, num_classes, ignore=255):
    """Set-based IoU per class, averaged over classes present in the target."""
    ious = []
    for c in range(num_classes):
        gt_c = {(i, j) for i, j in zip(*np.nonzero((target == c) & (target != ignore)))}
        if not gt_c:
            continue
        pred_c = {
            (i, j)
            for i, j in zip(*np.nonzero((pred == c) & (target != ignore)))
        }
        inter = len(gt_c & pred_c)
        union = len(gt_c | pred_c)
        ious.append(inter / union)
    return sum(ious) / len(ious)


class TestMiou:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        target = rng.integers(0, 4, size=(8, 8))
        assert miou(target, target, 4) == pytest.approx(1.0)

    def test_matches_set_based_loops(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            target = rng.integers(0, 5, size=(12, 12))
            pred = rng.integers(0, 5, size=(12, 12))
            assert miou(pred, target, 5) == pytest.approx(
                miou_loops(pred, target, 5)
            )

    def test_ignored_pixels_do_not_count(self):
        target = np.array([[0, 255], [1, 255]])
        pred = np.array([[0, 1], [1, 0]])  # wrong only on ignored pixels
        assert miou(pred, target, 2) == pytest.approx(1.0)

    def test_absent_classes_are_skipped(self):
        target = np.zeros((4, 4), dtype=int)
        pred = np.zeros((4, 4), dtype=int)
        pred[0, 0] = 3  # false positive for an absent class
        conf = confusion_matrix(pred, target, 4)
        # class 0: IoU 15/16; classes 1..3 absent from target -> skipped
        assert miou_from_confusion(conf) == pytest.approx(15 / 16)

    def test_out_of_range_labels_raise(self):
        with pytest.raises(ValueError, match="outside"):
            miou(np.array([[5]]), np.array([[0]]), 4)


def test_rmse_hand_value_and_mask():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.array([[1.0, 4.0], [3.0, 1.0]])
    assert rmse(pred, target) == pytest.approx(math.sqrt((0 + 4 + 0 + 9) / 4))
    mask = np.array([[True, True], [True, False]])
    assert rmse(pred, target, mask) == pytest.approx(math.sqrt(4 / 3))


def test_mean_angular_error_known_angles():
    a = np.zeros((3, 1, 2))
    b = np.zeros((3, 1, 2))
    a[2] = -1.0
    b[2, 0, 0] = -1.0  # 0 degrees
    b[0, 0, 1] = 1.0  # 90 degrees
    assert mean_angular_error(a, b) == pytest.approx(45.0)


def test_mean_angular_error_accepts_batches():
    n = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    n = n / n.norm(dim=1, keepdim=True)
    assert mean_angular_error(n, n) == pytest.approx(0.0, abs=1e-6)


class TestF1:
    def test_hand_value(self):
        pred = np.array([0.9, 0.8, 0.2, 0.6])
        target = np.array([1, 0, 1, 1])
        # tp=2 (0.9, 0.6), fp=1 (0.8), fn=1 (0.2)
        assert f1(pred, target) == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))

    def test_both_empty_scores_one(self):
        assert f1(np.zeros(4), np.zeros(4)) == 1.0

    def test_empty_target_with_predictions_scores_zero(self):
        assert f1(np.ones(4), np.zeros(4)) == 0.0

    def test_threshold_is_inclusive(self):
        assert f1(np.array([0.5]), np.array([1])) == 1.0


class TestDeltaMetric:
    def test_higher_better_and_lower_better_signs(self):
        report = delta_metric({"S": 55.0, "D": 4.5}, {"S": 50.0, "D": 5.0})
        assert report.per_task["S"] == pytest.approx(10.0)
        assert report.per_task["D"] == pytest.approx(10.0)
        assert report.delta == pytest.approx(10.0)

    def test_regression_yields_negative_gain(self):
        report = delta_metric({"S": 45.0, "D": 5.5}, {"S": 50.0, "D": 5.0})
        assert report.delta == pytest.approx(-10.0)

    def test_mismatched_tasks_raise(self):
        with pytest.raises(KeyError, match="differ"):
            delta_metric({"S": 1.0}, {"S": 1.0, "D": 1.0})

    def test_zero_baseline_raises(self):
        with pytest.raises(ZeroDivisionError):
            delta_metric({"S": 1.0}, {"S": 0.0})

    def test_report_round_trips_to_dict(self):
        report = delta_metric({"S": 55.0}, {"S": 50.0})
        d = report.to_dict()
        assert d["delta"] == pytest.approx(10.0)
        assert d["per_task"]["S"] == pytest.approx(10.0)

    def test_reproduces_published_reference_rows(self):
        for name, model, baseline, printed in DELTA_ROWS:
            report = delta_metric(model, baseline)
            assert report.delta == pytest.approx(printed, abs=0.05), name
