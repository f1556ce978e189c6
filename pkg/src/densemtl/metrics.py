"""Evaluation metrics and the multi-task gain summary.

The headline number is the average relative gain over a single-task
baseline, sign-corrected so that improvements are always positive:

    delta = (100 / n) * sum_i (-1)^{g_i} * (m_i - b_i) / b_i

with g_i = 0 for higher-is-better metrics (mIoU, F1) and g_i = 1 for
lower-is-better ones (RMSE, angular error).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
from torch import Tensor

from .losses import IGNORE_INDEX, METRIC_LOWER_IS_BETTER


def _numpy(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def confusion_matrix(
    pred: Tensor | np.ndarray,
    target: Tensor | np.ndarray,
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> np.ndarray:
    """[num_classes, num_classes] counts, rows = target class, cols = predicted."""
    p = _numpy(pred).astype(np.int64).ravel()
    t = _numpy(target).astype(np.int64).ravel()
    keep = t != ignore_index
    p, t = p[keep], t[keep]
    if ((p < 0) | (p >= num_classes)).any():
        raise ValueError("prediction contains labels outside [0, num_classes)")
    if ((t < 0) | (t >= num_classes)).any():
        raise ValueError("target contains labels outside [0, num_classes)")
    idx = t * num_classes + p
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean IoU over classes that occur in the targets."""
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    union = gt_count + conf.sum(axis=0) - tp
    present = gt_count > 0
    if not present.any():
        return float("nan")
    return float((tp[present] / union[present]).mean())


def miou(
    pred,
    target,
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> float:
    return miou_from_confusion(confusion_matrix(pred, target, num_classes, ignore_index))


def rmse(pred, target, mask=None) -> float:
    """Root mean squared error over all (optionally masked) pixels."""
    p, t = _numpy(pred).astype(np.float64), _numpy(target).astype(np.float64)
    if mask is not None:
        m = _numpy(mask).astype(bool)
        p, t = p[m], t[m]
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mean_angular_error(pred, target, mask=None) -> float:
    """Mean angle in degrees between unit-vector fields shaped [..., 3, H, W]."""
    p, t = _numpy(pred).astype(np.float64), _numpy(target).astype(np.float64)
    axis = -3
    dot = np.clip((p * t).sum(axis=axis), -1.0, 1.0)
    if mask is not None:
        dot = dot[_numpy(mask).astype(bool)]
    return float(np.degrees(np.arccos(dot)).mean())


def f1(pred, target, threshold: float = 0.5) -> float:
    """F1 of thresholded boundary probabilities; both sides empty scores 1."""
    p = _numpy(pred).astype(np.float64) >= threshold
    t = _numpy(target).astype(bool)
    tp = float(np.logical_and(p, t).sum())
    fp = float(np.logical_and(p, ~t).sum())
    fn = float(np.logical_and(~p, t).sum())
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


METRIC_FUNCTIONS = {"S": miou, "D": rmse, "N": mean_angular_error, "E": f1}


@dataclass
class DeltaReport:
    """Per-task relative gains (percent) and their sign-corrected mean."""

    delta: float
    per_task: Dict[str, float]
    metrics: Dict[str, float] = field(default_factory=dict)
    baselines: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "per_task": dict(self.per_task),
            "metrics": dict(self.metrics),
            "baselines": dict(self.baselines),
        }


def delta_metric(
    metrics: Mapping[str, float],
    baselines: Mapping[str, float],
    lower_is_better: Optional[Mapping[str, bool]] = None,
) -> DeltaReport:
    """Average sign-corrected relative gain of ``metrics`` over ``baselines``."""
    if set(metrics) != set(baselines):
        raise KeyError(
            f"metric/baseline task sets differ: {sorted(metrics)} vs {sorted(baselines)}"
        )
    if not metrics:
        raise ValueError("delta_metric needs at least one task")
    directions = lower_is_better or METRIC_LOWER_IS_BETTER
    per_task: Dict[str, float] = {}
    for t in sorted(metrics):
        b = baselines[t]
        if b == 0:
            raise ZeroDivisionError(f"baseline for task {t!r} is zero")
        gain = 100.0 * (metrics[t] - b) / b
        if directions[t]:
            gain = -gain
        per_task[t] = gain
    delta = sum(per_task.values()) / len(per_task)
    return DeltaReport(
        delta=delta,
        per_task=per_task,
        metrics=dict(metrics),
        baselines=dict(baselines),
    )
