"""Experiment configuration: typed specs, canonical YAML, budget guard.

Configs serialise to a *canonical* YAML form (sorted keys, plain style) so
that ``loads(dumps(cfg))`` reproduces the exact same text; the first 12 hex
chars of its SHA-256 identify a run directory.

Everything is desk-scale by design: a budget guard rejects configs whose
iteration count, dataset size, or image resolution exceed what a laptop CPU
chews through in minutes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import yaml

from .losses import DEFAULT_TASK_WEIGHTS, default_weights
from .model import ModelConfig
from .uda import DEFAULT_LAMBDA_ADV, UDA_TASKS


def _check_keys(data: dict, cls) -> dict:
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(data)


@dataclass
class DatasetSpec:
    """Where samples come from: generated on the fly or loaded from disk."""

    kind: str = "synthetic"  # synthetic | disk
    seed: int = 0
    count: int = 8
    size: int = 64
    num_classes: int = 6
    d_far: float = 20.0
    root: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in ("synthetic", "disk"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "disk" and not self.root:
            raise ValueError("disk datasets need a root path")
        if self.kind == "synthetic":
            if self.count < 1:
                raise ValueError("count must be >= 1")
            if self.size < 16 or self.size % 16:
                raise ValueError("size must be a positive multiple of 16")
            if self.d_far <= 0:
                raise ValueError("d_far must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "count": self.count,
            "size": self.size,
            "num_classes": self.num_classes,
            "d_far": self.d_far,
            "root": self.root,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        spec = cls(**_check_keys(data, cls))
        spec.validate()
        return spec


@dataclass
class OptimizerSpec:
    """Two-group optimiser: one learning rate for the encoder, one for the rest."""

    kind: str = "adam"  # adam | sgd
    lr_encoder: float = 2.0e-4
    lr_decoder: float = 3.0e-4
    betas: Tuple[float, float] = (0.9, 0.98)
    momentum: float = 0.9
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if min(self.lr_encoder, self.lr_decoder) <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr_encoder": self.lr_encoder,
            "lr_decoder": self.lr_decoder,
            "betas": list(self.betas),
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerSpec":
        kwargs = _check_keys(data, cls)
        if "betas" in kwargs:
            kwargs["betas"] = tuple(kwargs["betas"])
        spec = cls(**kwargs)
        spec.validate()
        return spec


@dataclass
class BudgetSpec:
    """Hard ceilings that keep every run laptop-sized."""

    max_iterations: int = 20000
    max_samples: int = 512
    max_size: int = 256

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "max_samples": self.max_samples,
            "max_size": self.max_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BudgetSpec":
        return cls(**_check_keys(data, cls))


@dataclass
class UdaSpec:
    """Adversarial adaptation towards an unlabelled target domain."""

    enabled: bool = True
    lambda_adv: float = DEFAULT_LAMBDA_ADV
    disc_base_width: int = 64
    disc_stages: int = 4
    disc_lr: float = 1.0e-4
    disc_betas: Tuple[float, float] = (0.9, 0.99)
    target: DatasetSpec = field(default_factory=lambda: DatasetSpec(seed=1000))

    def validate(self) -> None:
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.disc_stages < 1:
            raise ValueError("disc_stages must be >= 1")
        self.target.validate()

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "lambda_adv": self.lambda_adv,
            "disc_base_width": self.disc_base_width,
            "disc_stages": self.disc_stages,
            "disc_lr": self.disc_lr,
            "disc_betas": list(self.disc_betas),
            "target": self.target.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UdaSpec":
        kwargs = _check_keys(data, cls)
        if "disc_betas" in kwargs:
            kwargs["disc_betas"] = tuple(kwargs["disc_betas"])
        if "target" in kwargs and kwargs["target"] is not None:
            kwargs["target"] = DatasetSpec.from_dict(kwargs["target"])
        spec = cls(**kwargs)
        spec.validate()
        return spec


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    weights: Optional[Dict[str, float]] = None
    iterations: int = 500
    batch_size: int = 4
    grad_clip: float = 10.0
    lr_decay_at: Optional[int] = None
    seed: int = 0
    log_every: int = 50
    eval_batch_size: int = 8
    budget: BudgetSpec = field(default_factory=BudgetSpec)
    uda: Optional[UdaSpec] = None

    def task_weights(self) -> Dict[str, float]:
        if self.weights is not None:
            return dict(self.weights)
        return default_weights(self.model.tasks)

    def validate(self) -> None:
        self.model.validate()
        self.dataset.validate()
        self.optimizer.validate()
        if self.weights is not None:
            if set(self.weights) != set(self.model.tasks):
                raise ValueError(
                    f"weights cover {sorted(self.weights)} but tasks are "
                    f"{sorted(self.model.tasks)}"
                )
            if any(w < 0 for w in self.weights.values()):
                raise ValueError("task weights must be >= 0")
        elif tuple(self.model.tasks) not in DEFAULT_TASK_WEIGHTS:
            raise ValueError(
                f"no default weights for task set {self.model.tasks}; set weights"
            )
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_decay_at is not None and not 0 < self.lr_decay_at:
            raise ValueError("lr_decay_at must be positive")
        # budget guard
        if self.iterations > self.budget.max_iterations:
            raise ValueError(
                f"iterations {self.iterations} exceed budget {self.budget.max_iterations}"
            )
        for name, ds in (("dataset", self.dataset), ("uda target", self.uda.target if self.uda else None)):
            if ds is None:
                continue
            if ds.kind == "synthetic":
                if ds.count > self.budget.max_samples:
                    raise ValueError(
                        f"{name} count {ds.count} exceeds budget {self.budget.max_samples}"
                    )
                if ds.size > self.budget.max_size:
                    raise ValueError(
                        f"{name} size {ds.size} exceeds budget {self.budget.max_size}"
                    )
        if self.uda is not None and self.uda.enabled:
            self.uda.validate()
            bad = [t for t in self.model.tasks if t not in UDA_TASKS]
            if bad:
                raise ValueError(
                    f"domain adaptation supports tasks {UDA_TASKS}; remove {bad}"
                )
            # every aligned map must be large enough for the discriminator
            min_side = 2 ** (self.uda.disc_stages + 1)
            scales = self.model.taps + (0,)
            smallest = min(self.dataset.size // (2 ** s) for s in scales)
            if smallest < min_side:
                raise ValueError(
                    f"alignment maps reach {smallest}px but the discriminator needs "
                    f">= {min_side}px; lower disc_stages or the supervision scales"
                )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "dataset": self.dataset.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "weights": None if self.weights is None else dict(self.weights),
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "grad_clip": self.grad_clip,
            "lr_decay_at": self.lr_decay_at,
            "seed": self.seed,
            "log_every": self.log_every,
            "eval_batch_size": self.eval_batch_size,
            "budget": self.budget.to_dict(),
            "uda": None if self.uda is None else self.uda.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        kwargs = _check_keys(data, cls)
        if "model" in kwargs and kwargs["model"] is not None:
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if "dataset" in kwargs and kwargs["dataset"] is not None:
            kwargs["dataset"] = DatasetSpec.from_dict(kwargs["dataset"])
        if "optimizer" in kwargs and kwargs["optimizer"] is not None:
            kwargs["optimizer"] = OptimizerSpec.from_dict(kwargs["optimizer"])
        if "budget" in kwargs and kwargs["budget"] is not None:
            kwargs["budget"] = BudgetSpec.from_dict(kwargs["budget"])
        if "uda" in kwargs and kwargs["uda"] is not None:
            kwargs["uda"] = UdaSpec.from_dict(kwargs["uda"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def dumps(cfg: ExperimentConfig) -> str:
    """Canonical YAML text: sorted keys, block style, stable float repr."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def loads(text: str) -> ExperimentConfig:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("config YAML must be a mapping")
    return ExperimentConfig.from_dict(data)


def load_config(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()[:12]
