"""Cross-task attention primitives and multi-task feature exchange blocks.

The building block is a *directional* attention unit that refines the features
of a target task with information borrowed from a source task:

  1. correlation      C[p, q] = softmax_q( <query(target)_p, key(source)_q> / sqrt(d) )
  2. cross features   x[:, p] = sum_q C[p, q] * value(source)[:, q]
  3. self features    s       = conv_f(source) * sigmoid(conv_m(source))
  4. output           y       = [diag(alpha) @ x, s]   (channel concat)

Queries live on the target grid downscaled once by ``s``; keys and values live
on the source grid downscaled by ``s**2``, which keeps the correlation matrix
rectangular and cheap.  The per-channel gate ``alpha`` starts at zero so a
freshly initialised unit contributes nothing and training can ease it in.

``ExchangeBlock`` wires one directional unit per ordered task pair and merges
the incoming messages back into every task's own features through a 1x1
conv + BN + ReLU combiner followed by a residual fusion (add / concat / prod).
``SelfAttentionExchange`` is the simpler classical alternative (per-pair gated
convolutions, summed residually) used by the baseline architectures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

SPATIAL = "spatial"
CHANNEL = "channel"
BOTH = "both"
ATTENTION_KINDS = (SPATIAL, CHANNEL, BOTH)

FUSION_ADD = "add"
FUSION_CONCAT = "concat"
FUSION_PROD = "prod"
FUSION_KINDS = (FUSION_ADD, FUSION_CONCAT, FUSION_PROD)


def default_proj_dim(channels: int) -> int:
    """Projection width used for queries/keys when none is given: max(c // 8, 8)."""
    return max(channels // 8, 8)


def downscale(x: Tensor, factor: int) -> Tensor:
    """Average-pool ``x`` by an integer factor (identity for factor 1)."""
    if factor == 1:
        return x
    _check_divisible(x, factor)
    return F.avg_pool2d(x, kernel_size=factor, stride=factor)


def upscale(x: Tensor, size: Tuple[int, int]) -> Tensor:
    """Bilinearly resize ``x`` to ``size`` (identity if already there)."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _check_divisible(x: Tensor, factor: int) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(
            f"spatial size {h}x{w} not divisible by downscale factor {factor}"
        )


@dataclass
class CorrelationMatrix:
    """Row-stochastic attention weights from target positions to source positions.

    ``weights`` has shape [B, N_i, N_j] where N_i indexes the target grid
    (downscaled once) and N_j the source grid (downscaled twice).  The grid
    shape and upsample factor are carried along so the weighted source values
    can be folded back onto the target's resolution.
    """

    weights: Tensor
    target_grid: Tuple[int, int]
    scale: int

    def __post_init__(self) -> None:
        h, w = self.target_grid
        if self.weights.dim() != 3 or self.weights.shape[1] != h * w:
            raise ValueError(
                f"weights {tuple(self.weights.shape)} do not match target grid {self.target_grid}"
            )


class DirectionalAttention(nn.Module):
    """One source->target cross-task attention unit (steps 1-4 above).

    Args:
        target_channels: channels of the task being refined.
        source_channels: channels of the task providing information.
        out_channels: channels of the cross-task message (and of the
            self-attention branch).
        proj_dim: query/key width ``d``; defaults to ``max(out/8, 8)``.
        down_factor: ``s``; queries are pooled once by ``s`` and keys/values
            by ``s**2``.
        attention_kind: "spatial" (position attention), "channel"
            (channel-mixing attention), or "both" (channel then spatial).
        use_self_attention: include the gated self branch and concat it.
    """

    def __init__(
        self,
        target_channels: int,
        source_channels: int,
        out_channels: int,
        proj_dim: Optional[int] = None,
        down_factor: int = 2,
        attention_kind: str = SPATIAL,
        use_self_attention: bool = True,
    ) -> None:
        super().__init__()
        if attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {attention_kind!r}")
        if down_factor < 1:
            raise ValueError("down_factor must be >= 1")
        self.target_channels = target_channels
        self.source_channels = source_channels
        self.out_channels = out_channels
        self.proj_dim = proj_dim if proj_dim is not None else default_proj_dim(out_channels)
        self.down_factor = down_factor
        self.attention_kind = attention_kind
        self.use_self_attention = use_self_attention

        if attention_kind in (CHANNEL, BOTH):
            # Channel attention keeps the full channel count so the mixing
            # matrix is square over source/target channels.
            self.proj_query_ch = nn.Conv2d(target_channels, out_channels, 1)
            self.proj_key_ch = nn.Conv2d(source_channels, out_channels, 1)
            self.proj_value_ch = nn.Conv2d(source_channels, out_channels, 1)

        if attention_kind in (SPATIAL, BOTH):
            # With "both" the spatial stage consumes the channel stage's
            # output, which already has out_channels channels.
            spatial_src = source_channels if attention_kind == SPATIAL else out_channels
            self.proj_query = nn.Conv2d(target_channels, self.proj_dim, 1)
            self.proj_key = nn.Conv2d(spatial_src, self.proj_dim, 1)
            self.proj_value = nn.Conv2d(spatial_src, out_channels, 1)

        if use_self_attention:
            self.self_feature = nn.Conv2d(source_channels, out_channels, 3, padding=1)
            self.self_mask = nn.Conv2d(source_channels, out_channels, 3, padding=1)

        # Per-channel gate on the cross-task branch, initialised to zero so a
        # fresh unit is silent.
        self.gate = nn.Parameter(torch.zeros(out_channels))

    @property
    def message_channels(self) -> int:
        """Channels of the directional output (doubled when self branch is on)."""
        return self.out_channels * (2 if self.use_self_attention else 1)

    def correlation(self, target_feats: Tensor, source_feats: Tensor) -> CorrelationMatrix:
        """Step 1: row-stochastic position-to-position attention weights."""
        s = self.down_factor
        _check_divisible(target_feats, s)
        _check_divisible(source_feats, s * s)
        q_map = self.proj_query(downscale(target_feats, s))
        k_map = self.proj_key(downscale(source_feats, s * s))
        b, d, h, w = q_map.shape
        q = q_map.reshape(b, d, h * w)
        k = k_map.reshape(b, d, -1)
        scores = torch.einsum("bdp,bdq->bpq", q, k) / math.sqrt(d)
        return CorrelationMatrix(scores.softmax(dim=-1), (h, w), s)

    def cross_features(self, source_feats: Tensor, corr: CorrelationMatrix,
                       out_size: Optional[Tuple[int, int]] = None) -> Tensor:
        """Step 2: correlation-weighted source values on the target grid."""
        s = corr.scale
        v_map = self.proj_value(downscale(source_feats, s * s))
        b, c, hj, wj = v_map.shape
        if corr.weights.shape[-1] != hj * wj:
            raise ValueError(
                f"correlation has {corr.weights.shape[-1]} source positions, "
                f"values have {hj * wj}"
            )
        v = v_map.reshape(b, c, hj * wj)
        mixed = torch.einsum("bpq,bcq->bcp", corr.weights, v)
        h, w = corr.target_grid
        mixed = mixed.reshape(b, c, h, w)
        if out_size is None:
            out_size = (h * s, w * s)
        return upscale(mixed, out_size)

    def channel_mix(self, target_feats: Tensor, source_feats: Tensor) -> Tensor:
        """Channel-attention variant: mix source channels with a [c, c] map."""
        s = self.down_factor
        _check_divisible(target_feats, s)
        _check_divisible(source_feats, s * s)
        q_map = self.proj_query_ch(downscale(target_feats, s))
        k_map = self.proj_key_ch(downscale(source_feats, s * s))
        v_map = self.proj_value_ch(downscale(source_feats, s * s))
        # Pool the query map onto the key grid so per-channel descriptors share
        # a common length regardless of the two tasks' resolutions.
        kh, kw = k_map.shape[-2:]
        q_map = F.adaptive_avg_pool2d(q_map, (kh, kw))
        b, c, _, _ = q_map.shape
        m = kh * kw
        q = q_map.reshape(b, c, m)
        k = k_map.reshape(b, c, m)
        scores = torch.einsum("bim,bjm->bij", q, k) / math.sqrt(m)
        weights = scores.softmax(dim=-1)  # rows: target channels
        v = v_map.reshape(b, c, m)
        mixed = torch.einsum("bij,bjm->bim", weights, v).reshape(b, c, kh, kw)
        return upscale(mixed, tuple(target_feats.shape[-2:]))

    def self_attention(self, source_feats: Tensor) -> Tensor:
        """Step 3: gated self branch, conv_f(x) * sigmoid(conv_m(x))."""
        return self.self_feature(source_feats) * torch.sigmoid(self.self_mask(source_feats))

    def directional_feature(self, xtask: Tensor, selfattn: Optional[Tensor]) -> Tensor:
        """Step 4: gate the cross-task branch, concat the self branch."""
        gated = self.gate.view(1, -1, 1, 1) * xtask
        if selfattn is None:
            return gated
        return torch.cat([gated, selfattn], dim=1)

    def forward(self, target_feats: Tensor, source_feats: Tensor) -> Tensor:
        out_size = tuple(target_feats.shape[-2:])
        if self.attention_kind == CHANNEL:
            xtask = self.channel_mix(target_feats, source_feats)
        else:
            src = source_feats
            if self.attention_kind == BOTH:
                src = self.channel_mix(target_feats, source_feats)
            corr = self.correlation(target_feats, src)
            xtask = self.cross_features(src, corr, out_size=out_size)
        selfattn = None
        if self.use_self_attention:
            # the self branch lives on the source grid; map it onto the
            # target's resolution so the two branches can be concatenated
            selfattn = upscale(self.self_attention(source_feats), out_size)
        return self.directional_feature(xtask, selfattn)


class PairwiseExchange(nn.Module):
    """Bidirectional wrapper: two independent directional units for a task pair."""

    def __init__(self, channels: int, **kwargs) -> None:
        super().__init__()
        self.into_first = DirectionalAttention(channels, channels, channels, **kwargs)
        self.into_second = DirectionalAttention(channels, channels, channels, **kwargs)

    def forward(self, first: Tensor, second: Tensor) -> Tuple[Tensor, Tensor]:
        """Returns (message second->first, message first->second)."""
        return self.into_first(first, second), self.into_second(second, first)


class ExchangeBlock(nn.Module):
    """Multi-task exchange: all-pairs directional attention + per-task fusion.

    For every task i the messages from all other tasks are concatenated,
    squeezed back to ``channels`` through a 1x1 conv + BN + ReLU, and fused
    with the task's own features:

        add:    f + r
        concat: proj_1x1([f, r])
        prod:   (1 + r) * f

    A single-task block is the identity.
    """

    def __init__(
        self,
        tasks: Sequence[str],
        channels: int,
        proj_dim: Optional[int] = None,
        down_factor: int = 2,
        attention_kind: str = SPATIAL,
        use_self_attention: bool = True,
        fusion_kind: str = FUSION_ADD,
    ) -> None:
        super().__init__()
        if fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {fusion_kind!r}")
        if len(set(tasks)) != len(tasks):
            raise ValueError("duplicate task ids")
        self.tasks = list(tasks)
        self.channels = channels
        self.fusion_kind = fusion_kind
        self.directions = nn.ModuleDict()
        self.combiners = nn.ModuleDict()
        self.fusers = nn.ModuleDict()
        n = len(self.tasks)
        if n < 2:
            return
        for target in self.tasks:
            for source in self.tasks:
                if source == target:
                    continue
                self.directions[f"{source}_to_{target}"] = DirectionalAttention(
                    channels,
                    channels,
                    channels,
                    proj_dim=proj_dim,
                    down_factor=down_factor,
                    attention_kind=attention_kind,
                    use_self_attention=use_self_attention,
                )
            msg_channels = next(iter(self.directions.values())).message_channels
            self.combiners[target] = nn.Sequential(
                nn.Conv2d(msg_channels * (n - 1), channels, 1),
                nn.BatchNorm2d(channels),
                nn.ReLU(inplace=True),
            )
            if fusion_kind == FUSION_CONCAT:
                self.fusers[target] = nn.Conv2d(2 * channels, channels, 1)

    def residual(self, features: Dict[str, Tensor], target: str) -> Tensor:
        """Combined incoming message for one task (before fusion)."""
        messages = [
            self.directions[f"{source}_to_{target}"](features[target], features[source])
            for source in self.tasks
            if source != target
        ]
        return self.combiners[target](torch.cat(messages, dim=1))

    def fuse(self, own: Tensor, residual: Tensor, target: str) -> Tensor:
        if self.fusion_kind == FUSION_ADD:
            return own + residual
        if self.fusion_kind == FUSION_PROD:
            return (1.0 + residual) * own
        return self.fusers[target](torch.cat([own, residual], dim=1))

    def forward(self, features: Dict[str, Tensor]) -> Dict[str, Tensor]:
        missing = set(self.tasks) - set(features)
        if missing:
            raise KeyError(f"missing features for tasks {sorted(missing)}")
        if len(self.tasks) < 2:
            return dict(features)
        return {
            t: self.fuse(features[t], self.residual(features, t), t) for t in self.tasks
        }


class SelfAttentionExchange(nn.Module):
    """Classical distillation block: per-pair gated 3x3 convs, summed residually.

    Each ordered pair (source -> target) applies
    ``conv_f(f_src) * sigmoid(conv_m(f_src))`` and the target adds up all its
    incoming messages.  No cross-task correlation is computed.
    """

    def __init__(self, tasks: Sequence[str], channels: int) -> None:
        super().__init__()
        if len(set(tasks)) != len(tasks):
            raise ValueError("duplicate task ids")
        self.tasks = list(tasks)
        self.channels = channels
        self.features = nn.ModuleDict()
        self.masks = nn.ModuleDict()
        for target in self.tasks:
            for source in self.tasks:
                if source == target:
                    continue
                key = f"{source}_to_{target}"
                self.features[key] = nn.Conv2d(channels, channels, 3, padding=1)
                self.masks[key] = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, features: Dict[str, Tensor]) -> Dict[str, Tensor]:
        missing = set(self.tasks) - set(features)
        if missing:
            raise KeyError(f"missing features for tasks {sorted(missing)}")
        if len(self.tasks) < 2:
            return dict(features)
        out: Dict[str, Tensor] = {}
        for target in self.tasks:
            acc = features[target]
            for source in self.tasks:
                if source == target:
                    continue
                key = f"{source}_to_{target}"
                acc = acc + self.features[key](features[source]) * torch.sigmoid(
                    self.masks[key](features[source])
                )
            out[target] = acc
        return out


def zero_exchange_residuals(block: ExchangeBlock) -> None:
    """Zero every combiner so the block's residual is exactly 0 everywhere.

    With additive fusion the block then reproduces its inputs bit for bit,
    which is how an exchange-equipped model is collapsed onto a plain
    multi-task baseline.
    """
    for combiner in block.combiners.values():
        conv, bn = combiner[0], combiner[1]
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)
        nn.init.zeros_(bn.bias)
        nn.init.ones_(bn.weight)
        bn.reset_running_stats()
