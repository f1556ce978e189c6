"""Adversarial domain adaptation on top of the multi-task model.

Source-domain batches are trained with the usual supervised objective; for
target-domain batches only *alignment maps* are computed and pushed towards
the source distribution by per-task patch discriminators:

    segmentation   Q = -P * log(P)        (weighted self-information per class)
    depth          Q = (d - min) / (max - min), clamped to [0, 1]

The generator minimises, per supervision scale and per task,

    L = (1/|S|) sum_{s in S} sum_t (w_t L_t^s + lambda_adv L_adv^s,t)
        + sum_t (w_t L_t^final + lambda_adv L_adv^final,t)

while each discriminator separately minimises the mean binary cross entropy
of classifying source maps as 1 and target maps as 0.
"""

from __future__ import annotations

from typing import Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

UDA_TASKS = ("S", "D")
DEFAULT_LAMBDA_ADV = 5.0e-3


def weighted_self_information(probs: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-class -p * log(p); entries of a uniform K-way map equal ln(K)/K."""
    return -probs * torch.log(probs.clamp(min=eps))


def normalize_depth(depth: Tensor, d_min: float, d_max: float) -> Tensor:
    """Affinely map [d_min, d_max] onto [0, 1] and clamp the rest."""
    if not d_max > d_min:
        raise ValueError(f"need d_max > d_min, got {d_min} >= {d_max}")
    return ((depth - d_min) / (d_max - d_min)).clamp(0.0, 1.0)


def alignment_map(task: str, pred: Tensor, d_min: float = 0.0, d_max: float = 1.0) -> Tensor:
    """Domain-alignment input for one task's prediction.

    Segmentation expects logits [B, K, H, W]; depth expects positive depths
    [B, H, W] and the source-domain depth range.
    """
    if task == "S":
        return weighted_self_information(pred.softmax(dim=1))
    if task == "D":
        return normalize_depth(pred, d_min, d_max).unsqueeze(1)
    raise ValueError(f"domain adaptation supports tasks {UDA_TASKS}, not {task!r}")


def alignment_channels(task: str, num_classes: int) -> int:
    if task == "S":
        return num_classes
    if task == "D":
        return 1
    raise ValueError(f"domain adaptation supports tasks {UDA_TASKS}, not {task!r}")


class PatchDiscriminator(nn.Module):
    """Fully convolutional domain classifier emitting a patch logit map.

    ``stages`` stride-2 4x4 convs with doubling widths, LeakyReLU(0.2)
    activations, and a final stride-2 1-logit conv.  Input sides must be at
    least 2**(stages + 1) pixels.
    """

    def __init__(self, in_channels: int, base_width: int = 64, stages: int = 4) -> None:
        super().__init__()
        layers = []
        prev = in_channels
        for i in range(stages):
            width = base_width * (2 ** min(i, 3))
            layers.append(nn.Conv2d(prev, width, 4, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = width
        layers.append(nn.Conv2d(prev, 1, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)
        self.min_input = 2 ** (stages + 1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h < self.min_input or w < self.min_input:
            raise ValueError(
                f"discriminator input {h}x{w} below minimum {self.min_input}"
            )
        return self.net(x)


def _bce_towards(logits: Tensor, label: float) -> Tensor:
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, label))


def discriminator_loss(disc: nn.Module, source_map: Tensor, target_map: Tensor) -> Tensor:
    """Mean BCE of the two-domain classification game, averaged over domains.

    An uninformative discriminator outputting 0.5 everywhere scores ln 2.
    """
    return 0.5 * (_bce_towards(disc(source_map), 1.0) + _bce_towards(disc(target_map), 0.0))


def adversarial_loss(disc: nn.Module, target_map: Tensor) -> Tensor:
    """Generator-side fooling term: push target maps to be classified source."""
    return _bce_towards(disc(target_map), 1.0)


def mtl_uda_total(
    supervised_final: Mapping[str, Tensor],
    supervised_intermediate: Mapping[int, Mapping[str, Tensor]],
    adversarial_final: Mapping[str, Tensor],
    adversarial_intermediate: Mapping[int, Mapping[str, Tensor]],
    weights: Mapping[str, float],
    lambda_adv: float = DEFAULT_LAMBDA_ADV,
) -> Tensor:
    """Joint generator objective (see module docstring)."""
    total = sum(weights[t] * supervised_final[t] for t in sorted(supervised_final))
    total = total + lambda_adv * sum(adversarial_final[t] for t in sorted(adversarial_final))
    if supervised_intermediate or adversarial_intermediate:
        scales = set(supervised_intermediate) | set(adversarial_intermediate)
        inter = 0.0
        for s in sorted(scales):
            sup = supervised_intermediate.get(s, {})
            adv = adversarial_intermediate.get(s, {})
            inter = inter + sum(weights[t] * sup[t] for t in sorted(sup))
            inter = inter + lambda_adv * sum(adv[t] for t in sorted(adv))
        total = total + inter / len(scales)
    return total
