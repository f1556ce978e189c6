"""Shared-encoder / per-task-decoder networks with optional feature exchange.

Architectures:

* ``stl``              one task, plain encoder-decoder
* ``mtl``              shared encoder, independent task decoders
* ``padnet``           mtl + per-pair gated-conv distillation at the exchange scales
* ``threeways_padnet`` padnet + ASPP context module on the deepest features
* ``ours``             mtl + ASPP + cross-task attention exchange blocks

The encoder halves the resolution per stage; decoders walk back up through
the scale pyramid with bilinear upsampling and encoder skips.  "Scale s"
means a resolution of ``input / 2**s``; exchange blocks and the lightweight
intermediate prediction heads can be inserted at any decoder scale.
Intermediate heads read the features *before* the exchange at that scale, so
deep supervision constrains what the exchange consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import (
    ATTENTION_KINDS,
    FUSION_KINDS,
    SPATIAL,
    FUSION_ADD,
    ExchangeBlock,
    SelfAttentionExchange,
    upscale,
)

ARCHITECTURES = ("stl", "mtl", "padnet", "threeways_padnet", "ours")
TASK_IDS = ("S", "D", "N", "E")
_ASPP_DEFAULT = {"stl": False, "mtl": False, "padnet": False,
                 "threeways_padnet": True, "ours": True}

# Heads emit: S logits [B,K,H,W]; D positive depth [B,H,W];
# N unit vectors [B,3,H,W]; E boundary probabilities [B,H,W].
DEPTH_FLOOR = 1e-3


@dataclass
class ModelConfig:
    architecture: str = "ours"
    tasks: Tuple[str, ...] = ("S", "D")
    num_classes: int = 8
    encoder_widths: Tuple[int, ...] = (32, 64, 128, 256)
    encoder_blocks: int = 2
    decoder_widths: Tuple[int, ...] = (256, 128, 64, 32)
    head_width: int = 32
    use_aspp: Optional[bool] = None
    aspp_rates: Tuple[int, ...] = (1, 2, 3)
    mteb_scales: Tuple[int, ...] = (1,)
    supervision_scales: Optional[Tuple[int, ...]] = None
    fusion_kind: str = FUSION_ADD
    attention_kind: str = SPATIAL
    use_self_attention: bool = True
    proj_dim: Optional[int] = None
    down_factor: int = 2

    def __post_init__(self) -> None:
        self.tasks = tuple(self.tasks)
        self.encoder_widths = tuple(self.encoder_widths)
        self.decoder_widths = tuple(self.decoder_widths)
        self.aspp_rates = tuple(self.aspp_rates)
        self.mteb_scales = tuple(sorted(set(self.mteb_scales), reverse=True))
        if self.supervision_scales is not None:
            self.supervision_scales = tuple(sorted(set(self.supervision_scales), reverse=True))

    @property
    def stages(self) -> int:
        return len(self.encoder_widths)

    @property
    def wants_aspp(self) -> bool:
        if self.use_aspp is not None:
            return self.use_aspp
        return _ASPP_DEFAULT[self.architecture]

    @property
    def taps(self) -> Tuple[int, ...]:
        """Scales at which intermediate predictions are emitted."""
        if self.supervision_scales is not None:
            return self.supervision_scales
        return self.mteb_scales

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError("duplicate task ids")
        for t in self.tasks:
            if t not in TASK_IDS:
                raise ValueError(f"unknown task id {t!r} (expected one of {TASK_IDS})")
        if self.architecture == "stl" and len(self.tasks) != 1:
            raise ValueError("stl takes exactly one task")
        if "S" in self.tasks and self.num_classes < 2:
            raise ValueError("segmentation needs num_classes >= 2")
        if self.num_classes > 255:
            raise ValueError("num_classes must fit 8-bit labels (<= 255)")
        if len(self.decoder_widths) != len(self.encoder_widths):
            raise ValueError("decoder_widths must match encoder_widths stage for stage")
        for s in self.mteb_scales + (self.supervision_scales or ()):
            if not 1 <= s <= self.stages:
                raise ValueError(f"scale {s} outside 1..{self.stages}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.fusion_kind!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention_kind!r}")
        if self.down_factor < 1:
            raise ValueError("down_factor must be >= 1")

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "tasks": list(self.tasks),
            "num_classes": self.num_classes,
            "encoder_widths": list(self.encoder_widths),
            "encoder_blocks": self.encoder_blocks,
            "decoder_widths": list(self.decoder_widths),
            "head_width": self.head_width,
            "use_aspp": self.use_aspp,
            "aspp_rates": list(self.aspp_rates),
            "mteb_scales": list(self.mteb_scales),
            "supervision_scales": (
                None if self.supervision_scales is None else list(self.supervision_scales)
            ),
            "fusion_kind": self.fusion_kind,
            "attention_kind": self.attention_kind,
            "use_self_attention": self.use_self_attention,
            "proj_dim": self.proj_dim,
            "down_factor": self.down_factor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("tasks", "encoder_widths", "decoder_widths", "aspp_rates", "mteb_scales"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("supervision_scales") is not None:
            kwargs["supervision_scales"] = tuple(kwargs["supervision_scales"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def task_out_channels(task: str, num_classes: int) -> int:
    return {"S": num_classes, "D": 1, "N": 3, "E": 1}[task]


def head_activation(task: str, raw: Tensor) -> Tensor:
    """Map raw head output to the task's prediction space."""
    if task == "S":
        return raw
    if task == "D":
        return F.softplus(raw.squeeze(1)) + DEPTH_FLOOR
    if task == "N":
        return raw / torch.sqrt((raw * raw).sum(dim=1, keepdim=True) + 1e-12)
    if task == "E":
        return torch.sigmoid(raw.squeeze(1))
    raise ValueError(f"unknown task {task!r}")


def resize_prediction(task: str, pred: Tensor, size: Tuple[int, int]) -> Tensor:
    """Bilinearly resize a prediction to ``size``, keeping task invariants."""
    if tuple(pred.shape[-2:]) == tuple(size):
        return pred
    squeeze = pred.dim() == 3
    x = pred.unsqueeze(1) if squeeze else pred
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    if squeeze:
        x = x.squeeze(1)
    if task == "N":
        x = x / torch.sqrt((x * x).sum(dim=1, keepdim=True) + 1e-12)
    return x


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    """Stack of stride-2 stages; returns one feature map per scale."""

    def __init__(self, widths: Sequence[int], blocks: int, in_ch: int = 3) -> None:
        super().__init__()
        self.stages = nn.ModuleList()
        prev = in_ch
        for w in widths:
            layers: List[nn.Module] = [ConvBlock(prev, w, stride=2)]
            layers.extend(ConvBlock(w, w) for _ in range(blocks - 1))
            self.stages.append(nn.Sequential(*layers))
            prev = w

    def forward(self, x: Tensor) -> List[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Aspp(nn.Module):
    """Parallel dilated 3x3 branches + global context, merged by a 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int, rates: Sequence[int]) -> None:
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 3, padding=r, dilation=r, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            )
            for r in rates
        )
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_ch, out_ch, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.merge = nn.Sequential(
            nn.Conv2d(out_ch * (len(self.branches) + 1), out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x)
        outs.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.merge(torch.cat(outs, dim=1))


class UpBlock(nn.Module):
    """x2 bilinear upsample, optional skip concat, 3x3 conv."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int) -> None:
        super().__init__()
        self.conv = ConvBlock(in_ch + skip_ch, out_ch)

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        h, w = x.shape[-2:]
        x = upscale(x, (h * 2, w * 2))
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv(x)


@dataclass
class MTLOutput:
    """Final predictions plus intermediate ones keyed by scale."""

    final: Dict[str, Tensor]
    intermediate: Dict[int, Dict[str, Tensor]]


class MultiTaskNet(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.tasks = list(config.tasks)
        widths = config.encoder_widths
        dec = config.decoder_widths
        stages = config.stages

        self.encoder = Encoder(widths, config.encoder_blocks)

        # Deepest-scale neck: ASPP or a plain conv block, one per task.
        self.necks = nn.ModuleDict()
        for t in self.tasks:
            if config.wants_aspp:
                self.necks[t] = Aspp(widths[-1], dec[0], config.aspp_rates)
            else:
                self.necks[t] = ConvBlock(widths[-1], dec[0])

        # Up path: scale (stages) -> ... -> scale 1, with encoder skips.
        self.ups = nn.ModuleDict()
        for t in self.tasks:
            blocks = nn.ModuleList()
            for i in range(stages - 1):
                # block i lifts scale (stages - i) features to scale (stages - i - 1)
                in_ch = dec[i]
                skip_ch = widths[stages - 2 - i]
                blocks.append(UpBlock(in_ch, skip_ch, dec[i + 1]))
            self.ups[t] = blocks

        # Final lift from scale 1 to full resolution (no skip) plus task head.
        self.final_ups = nn.ModuleDict(
            {t: UpBlock(dec[-1], 0, config.head_width) for t in self.tasks}
        )
        self.heads = nn.ModuleDict(
            {
                t: nn.Conv2d(config.head_width, task_out_channels(t, config.num_classes), 1)
                for t in self.tasks
            }
        )

        # Lightweight 1x1 heads for intermediate supervision.
        self.taps = nn.ModuleDict()
        for s in config.taps:
            self.taps[str(s)] = nn.ModuleDict(
                {
                    t: nn.Conv2d(
                        self.width_at_scale(s), task_out_channels(t, config.num_classes), 1
                    )
                    for t in self.tasks
                }
            )

        # Exchange blocks (architecture dependent), keyed by scale.
        self.exchanges = nn.ModuleDict()
        if config.architecture in ("padnet", "threeways_padnet", "ours") and len(self.tasks) > 1:
            for s in config.mteb_scales:
                ch = self.width_at_scale(s)
                if config.architecture == "ours":
                    self.exchanges[str(s)] = ExchangeBlock(
                        self.tasks,
                        ch,
                        proj_dim=config.proj_dim,
                        down_factor=config.down_factor,
                        attention_kind=config.attention_kind,
                        use_self_attention=config.use_self_attention,
                        fusion_kind=config.fusion_kind,
                    )
                else:
                    self.exchanges[str(s)] = SelfAttentionExchange(self.tasks, ch)

    def width_at_scale(self, scale: int) -> int:
        """Decoder feature width at resolution input / 2**scale."""
        return self.config.decoder_widths[self.config.stages - scale]

    def forward(self, x: Tensor) -> MTLOutput:
        stages = self.config.stages
        factor = 2 ** stages
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise ValueError(f"input {h}x{w} not divisible by 2**stages = {factor}")
        if not self.tasks:
            return MTLOutput(final={}, intermediate={})

        enc = self.encoder(x)
        cur = {t: self.necks[t](enc[-1]) for t in self.tasks}
        intermediate: Dict[int, Dict[str, Tensor]] = {}
        for scale in range(stages, 0, -1):
            if scale < stages:
                i = stages - scale - 1
                skip = enc[scale - 1]
                cur = {t: self.ups[t][i](cur[t], skip) for t in self.tasks}
            if str(scale) in self.taps:
                intermediate[scale] = {
                    t: head_activation(t, self.taps[str(scale)][t](cur[t]))
                    for t in self.tasks
                }
            if str(scale) in self.exchanges:
                cur = self.exchanges[str(scale)](cur)
        final = {
            t: head_activation(t, self.heads[t](self.final_ups[t](cur[t])))
            for t in self.tasks
        }
        return MTLOutput(final=final, intermediate=intermediate)


def build_model(config: ModelConfig) -> MultiTaskNet:
    config.validate()
    return MultiTaskNet(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def exchange_parameter_count(model: MultiTaskNet) -> int:
    return sum(parameter_count(m) for m in model.exchanges.values())


def copy_matching_parameters(src: nn.Module, dst: nn.Module) -> List[str]:
    """Copy every state entry whose name and shape exist in both models."""
    dst_state = dst.state_dict()
    picked = {}
    for name, value in src.state_dict().items():
        if name in dst_state and dst_state[name].shape == value.shape:
            picked[name] = value
    dst.load_state_dict(picked, strict=False)
    return sorted(picked)
