"""Experiment harness: training, evaluation, grid search, ablations, reports.

Every run is reproducible from (config, seed): seeding happens before model
construction, batches are drawn from a dedicated numpy generator, and the
``DENSEMTL_DETERMINISTIC=1`` environment variable additionally switches
torch to strictly deterministic kernels.

Artifacts per run directory: ``config.yaml`` (canonical form), ``report.json``,
``checkpoint.zip`` and ``loss_curve.png``.
"""

from __future__ import annotations

import copy
import itertools
import json
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from . import checkpoint as ckpt_io
from .config import DatasetSpec, ExperimentConfig, config_hash, save_config
from .data import Sample, load_dataset, synthetic_dataset
from .losses import (
    METRIC_NAMES,
    depth_loss,
    edge_loss,
    normal_loss,
    seg_loss,
    total_loss,
)
from .metrics import METRIC_FUNCTIONS, delta_metric
from .model import (
    MTLOutput,
    MultiTaskNet,
    build_model,
    exchange_parameter_count,
    parameter_count,
    resize_prediction,
)
from .uda import (
    PatchDiscriminator,
    adversarial_loss,
    alignment_channels,
    alignment_map,
    discriminator_loss,
    mtl_uda_total,
)

DETERMINISM_ENV = "DENSEMTL_DETERMINISTIC"

ABLATION_AXES: Dict[str, List] = {
    "fusion": ["concat", "prod", "add"],
    "attention": ["spatial", "channel", "both"],
    "scales": [(4,), (3,), (2,), (1,), (3, 1), (3, 2, 1), (4, 3, 2, 1)],
    "self_attention": [True, False],
}


def set_determinism(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if os.environ.get(DETERMINISM_ENV) == "1":
        torch.use_deterministic_algorithms(True)


def make_dataset(spec: DatasetSpec) -> List[Sample]:
    if spec.kind == "synthetic":
        return synthetic_dataset(spec.seed, spec.count, spec.size, spec.num_classes, spec.d_far)
    return load_dataset(spec.root)


def tensors_from_samples(samples: Sequence[Sample]) -> Dict[str, Tensor]:
    return {
        "image": torch.from_numpy(np.stack([s.image for s in samples])),
        "S": torch.from_numpy(np.stack([s.seg for s in samples])),
        "D": torch.from_numpy(np.stack([s.depth for s in samples])),
        "N": torch.from_numpy(np.stack([s.normals for s in samples])),
        "E": torch.from_numpy(np.stack([s.edges.astype(np.float32) for s in samples])),
    }


def task_supervised_loss(task: str, pred: Tensor, batch: Mapping[str, Tensor], d_far: float) -> Tensor:
    if task == "S":
        return seg_loss(pred, batch["S"])
    if task == "D":
        return depth_loss(pred, batch["D"], d_far)
    if task == "N":
        return normal_loss(pred, batch["N"])
    if task == "E":
        return edge_loss(pred, batch["E"])
    raise ValueError(f"unknown task {task!r}")


def supervised_losses(
    output: MTLOutput, batch: Mapping[str, Tensor], d_far: float
) -> Tuple[Dict[str, Tensor], Dict[int, Dict[str, Tensor]]]:
    """Per-task final and intermediate losses; intermediates are upsampled
    to label resolution first (normals get renormalised by the resize)."""
    size = tuple(batch["image"].shape[-2:])
    final = {t: task_supervised_loss(t, p, batch, d_far) for t, p in output.final.items()}
    intermediate: Dict[int, Dict[str, Tensor]] = {}
    for scale, preds in output.intermediate.items():
        intermediate[scale] = {
            t: task_supervised_loss(t, resize_prediction(t, p, size), batch, d_far)
            for t, p in preds.items()
        }
    return final, intermediate


def build_optimizer(model: MultiTaskNet, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    spec = cfg.optimizer
    encoder_ids = {id(p) for p in model.encoder.parameters()}
    encoder_params = [p for p in model.parameters() if id(p) in encoder_ids]
    decoder_params = [p for p in model.parameters() if id(p) not in encoder_ids]
    groups = [
        {"params": encoder_params, "lr": spec.lr_encoder},
        {"params": decoder_params, "lr": spec.lr_decoder},
    ]
    if spec.kind == "adam":
        return torch.optim.Adam(groups, betas=spec.betas, weight_decay=spec.weight_decay)
    return torch.optim.SGD(groups, momentum=spec.momentum, weight_decay=spec.weight_decay)


@dataclass
class TrainResult:
    model: MultiTaskNet
    samples: List[Sample]
    history: List[float]
    wall_time_s: float
    iterations_run: int
    disc_history: List[float] = field(default_factory=list)
    discriminators: Optional[nn.ModuleDict] = None


def _non_finite_diagnostics(it: int, final: Mapping[str, Tensor], inter) -> str:
    parts = [f"{t}={float(v.detach()):.6g}" for t, v in sorted(final.items())]
    for s in sorted(inter):
        parts.extend(f"s{s}:{t}={float(v.detach()):.6g}" for t, v in sorted(inter[s].items()))
    return f"non-finite loss at iteration {it}; task losses: " + ", ".join(parts)


def train_model(
    cfg: ExperimentConfig,
    stop_check: Optional[Callable[[MultiTaskNet, int], bool]] = None,
    check_every: int = 250,
) -> TrainResult:
    """Run the training loop; returns the trained model and loss history.

    ``stop_check(model, iteration)`` is polled every ``check_every``
    iterations and may end training early (used by convergence probes).
    """
    cfg.validate()
    set_determinism(cfg.seed)
    samples = make_dataset(cfg.dataset)
    data = tensors_from_samples(samples)
    d_far = samples[0].d_far

    model = build_model(cfg.model)
    model.train()
    weights = cfg.task_weights()
    optimizer = build_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(samples)

    uda_on = cfg.uda is not None and cfg.uda.enabled
    discs: Optional[nn.ModuleDict] = None
    disc_opt = None
    trg_data = None
    d_min = d_max = 0.0
    if uda_on:
        trg_samples = make_dataset(cfg.uda.target)
        trg_data = tensors_from_samples(trg_samples)
        d_min = float(data["D"].min())
        d_max = float(data["D"].max())
        discs = nn.ModuleDict(
            {
                t: PatchDiscriminator(
                    alignment_channels(t, cfg.model.num_classes),
                    base_width=cfg.uda.disc_base_width,
                    stages=cfg.uda.disc_stages,
                )
                for t in cfg.model.tasks
            }
        )
        disc_opt = torch.optim.Adam(
            discs.parameters(), lr=cfg.uda.disc_lr, betas=cfg.uda.disc_betas
        )

    history: List[float] = []
    disc_history: List[float] = []
    start = time.perf_counter()
    iterations_run = 0
    for it in range(cfg.iterations):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = {k: v[idx] for k, v in data.items()}
        output = model(batch["image"])
        final, inter = supervised_losses(output, batch, d_far)

        if not uda_on:
            loss = total_loss(final, inter, weights)
        else:
            m = len(trg_data["image"])
            trg_idx = rng.choice(m, size=min(cfg.batch_size, m), replace=False)
            trg_images = trg_data["image"][trg_idx]
            for p in discs.parameters():
                p.requires_grad_(False)
            trg_out = model(trg_images)
            adv_final = {
                t: adversarial_loss(discs[t], alignment_map(t, trg_out.final[t], d_min, d_max))
                for t in trg_out.final
            }
            adv_inter = {
                s: {
                    t: adversarial_loss(
                        discs[t], alignment_map(t, p, d_min, d_max)
                    )
                    for t, p in preds.items()
                }
                for s, preds in trg_out.intermediate.items()
            }
            loss = mtl_uda_total(final, inter, adv_final, adv_inter, weights, cfg.uda.lambda_adv)

        if not bool(torch.isfinite(loss.detach())):
            raise RuntimeError(_non_finite_diagnostics(it, final, inter))
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        history.append(float(loss.detach()))

        if uda_on:
            for p in discs.parameters():
                p.requires_grad_(True)
            levels: List[Tuple[str, Tensor, Tensor]] = []
            for t in output.final:
                levels.append((t, output.final[t].detach(), trg_out.final[t].detach()))
            for s in output.intermediate:
                for t in output.intermediate[s]:
                    levels.append(
                        (t, output.intermediate[s][t].detach(), trg_out.intermediate[s][t].detach())
                    )
            d_loss = sum(
                discriminator_loss(
                    discs[t],
                    alignment_map(t, src_pred, d_min, d_max),
                    alignment_map(t, trg_pred, d_min, d_max),
                )
                for t, src_pred, trg_pred in levels
            ) / len(levels)
            disc_opt.zero_grad()
            d_loss.backward()
            disc_opt.step()
            disc_history.append(float(d_loss.detach()))

        if cfg.lr_decay_at is not None and it + 1 == cfg.lr_decay_at:
            for group in optimizer.param_groups:
                group["lr"] *= 0.1
        iterations_run = it + 1
        if stop_check is not None and iterations_run % check_every == 0:
            if stop_check(model, iterations_run):
                break

    wall = time.perf_counter() - start
    return TrainResult(
        model=model,
        samples=samples,
        history=history,
        wall_time_s=wall,
        iterations_run=iterations_run,
        disc_history=disc_history,
        discriminators=discs,
    )


@torch.no_grad()
def predict_dataset(
    model: MultiTaskNet, samples: Sequence[Sample], batch_size: int = 8
) -> Dict[str, Tensor]:
    """Final predictions for every sample, concatenated along the batch."""
    was_training = model.training
    model.eval()
    data = tensors_from_samples(samples)
    outs: Dict[str, List[Tensor]] = {t: [] for t in model.tasks}
    for i in range(0, len(samples), batch_size):
        out = model(data["image"][i : i + batch_size])
        for t, pred in out.final.items():
            outs[t].append(pred)
    if was_training:
        model.train()
    return {t: torch.cat(chunks) for t, chunks in outs.items()}


def evaluate_model(
    model: MultiTaskNet,
    samples: Sequence[Sample],
    batch_size: int = 8,
    median_scale_depth: bool = False,
) -> Dict[str, float]:
    """Task metrics of the final predictions over a sample set."""
    from .data import median_scale  # local import to avoid cycle confusion

    data = tensors_from_samples(samples)
    preds = predict_dataset(model, samples, batch_size)
    metrics: Dict[str, float] = {}
    for t in model.tasks:
        if t == "S":
            label = preds[t].argmax(dim=1)
            metrics[t] = METRIC_FUNCTIONS[t](label, data["S"], model.config.num_classes)
        elif t == "D":
            p = preds[t].numpy()
            if median_scale_depth:
                p = median_scale(p, data["D"].numpy())
            metrics[t] = METRIC_FUNCTIONS[t](p, data["D"].numpy())
        else:
            metrics[t] = METRIC_FUNCTIONS[t](preds[t], data[t])
    return metrics


@dataclass
class RunReport:
    config_hash: str
    seed: int
    architecture: str
    tasks: List[str]
    iterations: int
    wall_time_s: float
    final_loss: float
    metrics: Dict[str, float]
    metric_names: Dict[str, str]
    parameters: int
    exchange_parameters: int
    loss_history: List[float] = field(default_factory=list)
    baselines: Optional[Dict[str, float]] = None
    delta: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "architecture": self.architecture,
            "tasks": list(self.tasks),
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
            "final_loss": self.final_loss,
            "metrics": dict(self.metrics),
            "metric_names": dict(self.metric_names),
            "parameters": self.parameters,
            "exchange_parameters": self.exchange_parameters,
            "loss_history": list(self.loss_history),
            "baselines": self.baselines,
            "delta": self.delta,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _thin(history: Sequence[float], limit: int = 2000) -> List[float]:
    if len(history) <= limit:
        return list(history)
    step = len(history) / limit
    return [history[int(i * step)] for i in range(limit)]


def _plot_history(history: Sequence[float], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(1, len(history) + 1), history, lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def make_report(
    cfg: ExperimentConfig,
    result: TrainResult,
    metrics: Dict[str, float],
    baselines: Optional[Dict[str, float]] = None,
    extra: Optional[dict] = None,
) -> RunReport:
    delta = None
    if baselines is not None:
        delta = delta_metric(metrics, baselines).to_dict()
    return RunReport(
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        architecture=cfg.model.architecture,
        tasks=list(cfg.model.tasks),
        iterations=result.iterations_run,
        wall_time_s=result.wall_time_s,
        final_loss=result.history[-1] if result.history else float("nan"),
        metrics=metrics,
        metric_names={t: METRIC_NAMES[t] for t in cfg.model.tasks},
        parameters=parameter_count(result.model),
        exchange_parameters=exchange_parameter_count(result.model),
        loss_history=_thin(result.history),
        baselines=dict(baselines) if baselines else None,
        delta=delta,
        extra=extra or {},
    )


def train(
    cfg: ExperimentConfig,
    out_dir: Optional[str | Path] = None,
    baselines: Optional[Dict[str, float]] = None,
) -> RunReport:
    """Train, evaluate on the training distribution, persist run artifacts."""
    result = train_model(cfg)
    metrics = evaluate_model(result.model, result.samples, cfg.eval_batch_size)
    report = make_report(cfg, result, metrics, baselines)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.yaml")
        report.save(out / "report.json")
        ckpt_io.save_checkpoint(
            out / "checkpoint.zip",
            result.model,
            extra={"config_hash": report.config_hash, "iterations": report.iterations},
        )
        _plot_history(result.history, out / "loss_curve.png")
    return report


def _load_baselines(path: str | Path) -> Dict[str, float]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "metrics" in data:
        data = data["metrics"]
    if not isinstance(data, dict):
        raise ValueError(f"{path} does not contain a task->metric mapping")
    return {str(k): float(v) for k, v in data.items()}


def evaluate(
    ckpt_path: str | Path,
    data_root: str | Path,
    baseline_path: Optional[str | Path] = None,
    batch_size: int = 8,
    median_scale_depth: bool = False,
) -> dict:
    """Evaluate a checkpoint on a dataset directory; optional gain vs baselines."""
    model, extra = ckpt_io.load_checkpoint(ckpt_path)
    samples = load_dataset(data_root)
    metrics = evaluate_model(model, samples, batch_size, median_scale_depth)
    out = {
        "checkpoint": str(ckpt_path),
        "data": str(data_root),
        "samples": len(samples),
        "tasks": list(model.tasks),
        "metric_names": {t: METRIC_NAMES[t] for t in model.tasks},
        "metrics": metrics,
        "extra": extra,
    }
    if baseline_path is not None:
        baselines = _load_baselines(baseline_path)
        relevant = {t: baselines[t] for t in metrics if t in baselines}
        if set(relevant) != set(metrics):
            missing = sorted(set(metrics) - set(relevant))
            raise ValueError(f"baseline file lacks tasks {missing}")
        out["delta"] = delta_metric(metrics, relevant).to_dict()
    return out


def stl_config(cfg: ExperimentConfig, task: str) -> ExperimentConfig:
    """Single-task twin of ``cfg`` with the same capacity and budget."""
    stl = copy.deepcopy(cfg)
    stl.model.architecture = "stl"
    stl.model.tasks = (task,)
    stl.weights = {task: 1.0}
    stl.uda = None
    stl.model.__post_init__()
    stl.validate()
    return stl


def train_stl_baselines(cfg: ExperimentConfig) -> Dict[str, float]:
    """Train one single-task model per task; returns their metric values."""
    baselines: Dict[str, float] = {}
    for task in cfg.model.tasks:
        report = train(stl_config(cfg, task))
        baselines[task] = report.metrics[task]
    return baselines


def gridsearch(
    cfg: ExperimentConfig,
    grid: Mapping[str, Sequence[float]],
    baselines: Optional[Dict[str, float]] = None,
) -> dict:
    """Cross-product search over task loss weights, ranked by the gain metric.

    ``grid`` maps task ids to candidate weights.  Tasks missing from the grid
    keep their configured weight.  The winner is deterministic: ties break
    towards the lexicographically smallest weight tuple.
    """
    cfg.validate()
    unknown = set(grid) - set(cfg.model.tasks)
    if unknown:
        raise ValueError(f"grid covers unknown tasks {sorted(unknown)}")
    if baselines is None:
        baselines = train_stl_baselines(cfg)
    base_weights = cfg.task_weights()
    grid_tasks = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[t] for t in grid_tasks)):
        weights = dict(base_weights)
        weights.update({t: float(w) for t, w in zip(grid_tasks, combo)})
        run_cfg = copy.deepcopy(cfg)
        run_cfg.weights = weights
        report = train(run_cfg, baselines=baselines)
        rows.append(
            {
                "weights": weights,
                "metrics": report.metrics,
                "delta": report.delta["delta"],
                "config_hash": report.config_hash,
            }
        )
    rows.sort(key=lambda r: (-r["delta"], tuple(r["weights"][t] for t in grid_tasks)))
    return {
        "baselines": baselines,
        "grid": {t: list(map(float, grid[t])) for t in grid_tasks},
        "rows": rows,
        "winner": rows[0] if rows else None,
    }


def ablation_variants(axis: str) -> List:
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    return list(ABLATION_AXES[axis])


def apply_ablation(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    run_cfg = copy.deepcopy(cfg)
    if axis == "fusion":
        run_cfg.model.fusion_kind = value
    elif axis == "attention":
        run_cfg.model.attention_kind = value
    elif axis == "scales":
        run_cfg.model.mteb_scales = tuple(value)
    elif axis == "self_attention":
        run_cfg.model.use_self_attention = bool(value)
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    run_cfg.model.__post_init__()
    run_cfg.validate()
    return run_cfg


def format_variant(axis: str, value) -> str:
    if axis == "scales":
        return ",".join(str(s) for s in sorted(value, reverse=True))
    if axis == "self_attention":
        return "with" if value else "without"
    return str(value)


def ablate(
    cfg: ExperimentConfig,
    axis: str,
    baselines: Optional[Dict[str, float]] = None,
) -> List[dict]:
    """Train/evaluate one run per variant along an ablation axis."""
    rows = []
    for value in ablation_variants(axis):
        run_cfg = apply_ablation(cfg, axis, value)
        result = train_model(run_cfg)
        metrics = evaluate_model(result.model, result.samples, run_cfg.eval_batch_size)
        row = {
            "axis": axis,
            "variant": format_variant(axis, value),
            "metrics": metrics,
            "parameters": parameter_count(result.model),
            "exchange_parameters": exchange_parameter_count(result.model),
            "wall_time_s": result.wall_time_s,
            "config_hash": config_hash(run_cfg),
        }
        if baselines is not None:
            row["delta"] = delta_metric(metrics, baselines).to_dict()["delta"]
        rows.append(row)
    return rows


def collect_reports(runs_dir: str | Path) -> List[RunReport]:
    paths = sorted(Path(runs_dir).glob("**/report.json"))
    return [RunReport.load(p) for p in paths]


def write_summary(reports: Sequence[RunReport], out_dir: str | Path) -> Path:
    """CSV + bar chart of the collected runs; returns the CSV path."""
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "summary.csv"
    tasks = sorted({t for r in reports for t in r.tasks})
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["config_hash", "architecture", "tasks", "seed", "iterations", "wall_time_s"]
            + [f"metric_{t}" for t in tasks]
            + ["delta"]
        )
        for r in reports:
            writer.writerow(
                [
                    r.config_hash,
                    r.architecture,
                    "".join(r.tasks),
                    r.seed,
                    r.iterations,
                    f"{r.wall_time_s:.2f}",
                ]
                + [("" if t not in r.metrics else f"{r.metrics[t]:.6f}") for t in tasks]
                + ["" if r.delta is None else f"{r.delta['delta']:.4f}"]
            )

    deltas = [(r.config_hash, r.delta["delta"]) for r in reports if r.delta is not None]
    if deltas:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(deltas)), 3.5))
        ax.bar([d[0] for d in deltas], [d[1] for d in deltas], color="#4878cf")
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_ylabel("multi-task gain (%)")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(out / "delta_bars.png", dpi=120)
        plt.close(fig)
    return csv_path
