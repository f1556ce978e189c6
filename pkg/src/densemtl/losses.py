"""Per-task losses and the multi-scale training objective.

Tasks are identified by single letters throughout the package:

    S  semantic segmentation   cross entropy,             mIoU up
    D  depth                   berHu on inverse depth,    RMSE down
    N  surface normals         1 - cosine,                mean angle down
    E  boundary detection      weighted BCE,              F1 up

The total objective averages the per-scale weighted sums over the
intermediate supervision scales and adds the weighted final-scale sum:

    L = (1/|S|) * sum_{s in S} sum_t w_t L_t^s  +  sum_t w_t L_t^final
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

IGNORE_INDEX = 255

# Loss weights that hold up across the supported task sets; keyed by the
# task combination, values per task.
DEFAULT_TASK_WEIGHTS: Dict[Tuple[str, ...], Dict[str, float]] = {
    ("S",): {"S": 1.0},
    ("D",): {"D": 1.0},
    ("N",): {"N": 1.0},
    ("E",): {"E": 1.0},
    ("S", "D"): {"S": 50.0, "D": 1.0},
    ("S", "D", "N"): {"S": 100.0, "D": 1.0, "N": 100.0},
    ("S", "D", "N", "E"): {"S": 100.0, "D": 1.0, "N": 100.0, "E": 50.0},
}

# True when a smaller metric value is better.
METRIC_LOWER_IS_BETTER: Dict[str, bool] = {"S": False, "D": True, "N": True, "E": False}
METRIC_NAMES: Dict[str, str] = {
    "S": "miou",
    "D": "rmse",
    "N": "mean_angular_error",
    "E": "f1",
}


@dataclass(frozen=True)
class TaskSpec:
    """A task id, its loss weight, and its evaluation direction."""

    id: str
    weight: float
    lower_is_better: bool


def default_task_specs(tasks: Sequence[str]) -> Tuple[TaskSpec, ...]:
    key = tuple(tasks)
    if key not in DEFAULT_TASK_WEIGHTS:
        raise KeyError(f"no default weights for task set {key}")
    weights = DEFAULT_TASK_WEIGHTS[key]
    return tuple(
        TaskSpec(t, weights[t], METRIC_LOWER_IS_BETTER[t]) for t in tasks
    )


def default_weights(tasks: Sequence[str]) -> Dict[str, float]:
    return {spec.id: spec.weight for spec in default_task_specs(tasks)}


def seg_loss(logits: Tensor, target: Tensor, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean cross entropy over non-ignored pixels; 0 if everything is ignored."""
    if (target != ignore_index).sum() == 0:
        warnings.warn("segmentation target is fully ignored; loss is 0", stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, target, ignore_index=ignore_index)


def berhu(residual: Tensor, threshold: Tensor | float) -> Tensor:
    """Reverse Huber: L1 inside |r| <= c, (r^2 + c^2) / (2c) outside.

    Both branches meet at |r| = c with matching value and slope.  A zero
    threshold degrades to plain L1.
    """
    c = torch.as_tensor(threshold, dtype=residual.dtype, device=residual.device)
    absr = residual.abs()
    if float(c) <= 0.0:
        return absr
    return torch.where(absr <= c, absr, (residual * residual + c * c) / (2.0 * c))


def berhu_threshold(residual: Tensor, fraction: float = 0.2) -> Tensor:
    """c = fraction * max|r| over the batch, detached from the graph."""
    return (fraction * residual.abs().max()).detach()


def depth_loss(
    pred: Tensor,
    target: Tensor,
    d_far: float,
    mask: Optional[Tensor] = None,
    threshold: Optional[float] = None,
) -> Tensor:
    """berHu on inverse depths normalised by the far plane.

    Residuals are ``d_far/pred - d_far/target`` so near-range errors weigh
    more than far-range ones.  The berHu cutoff defaults to 20% of the
    largest residual magnitude (treated as a constant).
    """
    if mask is not None:
        pred, target = pred[mask], target[mask]
    if target.numel() == 0:
        warnings.warn("depth target is empty; loss is 0", stacklevel=2)
        return pred.sum() * 0.0
    residual = d_far / pred - d_far / target
    c = berhu_threshold(residual) if threshold is None else threshold
    return berhu(residual, c).mean()


def normal_loss(pred: Tensor, target: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Mean (1 - cos angle) between predicted and target unit normals."""
    dot = (pred * target).sum(dim=1).clamp(-1.0, 1.0)
    if mask is not None:
        dot = dot[mask]
    if dot.numel() == 0:
        warnings.warn("normals target is empty; loss is 0", stacklevel=2)
        return pred.sum() * 0.0
    return (1.0 - dot).mean()


def edge_loss(pred: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """Class-balanced BCE: positives reweighted by the neg/pos pixel ratio."""
    target = target.to(pred.dtype)
    n_pos = target.sum()
    n_neg = target.numel() - n_pos
    w_pos = (n_neg / n_pos) if float(n_pos) > 0 else 1.0
    p = pred.clamp(eps, 1.0 - eps)
    per_pixel = -(w_pos * target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    return per_pixel.mean()


def total_loss(
    final_losses: Mapping[str, Tensor],
    intermediate_losses: Mapping[int, Mapping[str, Tensor]],
    weights: Mapping[str, float],
) -> Tensor:
    """Scale-averaged intermediate term plus the final term (see module doc)."""
    unknown = set(final_losses) - set(weights)
    if unknown:
        raise KeyError(f"no weight for tasks {sorted(unknown)}")
    total = sum(weights[t] * final_losses[t] for t in sorted(final_losses))
    if intermediate_losses:
        inter = sum(
            weights[t] * losses[t]
            for _, losses in sorted(intermediate_losses.items())
            for t in sorted(losses)
        )
        total = total + inter / len(intermediate_losses)
    return total
