"""Command line front end.

Verbs:

    train       --config PATH [--seed N] [--out DIR]
    eval        --ckpt PATH --data PATH [--stl-baseline PATH] [--median-scale]
    gridsearch  --config PATH --grid PATH [--out DIR]
    ablate      --config PATH --axis NAME [--out DIR] [--stl-baseline PATH]
    report      --runs DIR --out DIR
    make-data   --out DIR [--seed N] [--count N] [--size N] [--classes N] [--d-far F]

Set ``DENSEMTL_DETERMINISTIC=1`` to force strictly deterministic torch
kernels (slower, bit-stable across runs on the same machine).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import harness
from .config import load_config, config_hash
from .data import save_dataset, synthetic_dataset


def _fmt_metrics(metrics: dict, names: dict) -> str:
    return "  ".join(f"{names.get(t, t)}[{t}]={metrics[t]:.4f}" for t in sorted(metrics))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = Path(args.out) if args.out else Path("runs") / config_hash(cfg)
    report = harness.train(cfg, out_dir=out)
    print(f"run {report.config_hash} ({report.architecture}, tasks {''.join(report.tasks)})")
    print(f"  iterations: {report.iterations}  wall: {report.wall_time_s:.1f}s")
    print(f"  final loss: {report.final_loss:.6f}")
    print(f"  metrics: {_fmt_metrics(report.metrics, report.metric_names)}")
    print(f"  artifacts: {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    result = harness.evaluate(
        args.ckpt,
        args.data,
        baseline_path=args.stl_baseline,
        median_scale_depth=args.median_scale,
    )
    print(f"checkpoint: {result['checkpoint']}")
    print(f"data: {result['data']} ({result['samples']} samples)")
    print(f"metrics: {_fmt_metrics(result['metrics'], result['metric_names'])}")
    if "delta" in result:
        d = result["delta"]
        per_task = "  ".join(f"{t}:{v:+.2f}%" for t, v in sorted(d["per_task"].items()))
        print(f"gain vs baseline: {d['delta']:+.2f}%  ({per_task})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
        print(f"wrote {out / 'eval.json'}")
    return 0


def cmd_gridsearch(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    grid = yaml.safe_load(Path(args.grid).read_text())
    if not isinstance(grid, dict):
        raise SystemExit("grid file must map task ids to lists of weights")
    result = harness.gridsearch(cfg, grid)
    print("baselines: " + "  ".join(f"{t}={v:.4f}" for t, v in sorted(result["baselines"].items())))
    for row in result["rows"]:
        w = " ".join(f"{t}={row['weights'][t]:g}" for t in sorted(row["weights"]))
        print(f"  delta={row['delta']:+7.3f}%  {w}")
    if result["winner"]:
        w = result["winner"]
        print(f"winner: delta={w['delta']:+.3f}% weights={w['weights']}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gridsearch.json").write_text(json.dumps(result, indent=2, sort_keys=True))
        print(f"wrote {out / 'gridsearch.json'}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    baselines = None
    if args.stl_baseline:
        baselines = harness._load_baselines(args.stl_baseline)
    rows = harness.ablate(cfg, args.axis, baselines=baselines)
    for row in rows:
        metrics = "  ".join(f"{t}={v:.4f}" for t, v in sorted(row["metrics"].items()))
        extra = f"  delta={row['delta']:+.3f}%" if "delta" in row else ""
        print(
            f"  {row['axis']}={row['variant']:<10} params={row['parameters']:>9}"
            f" exch={row['exchange_parameters']:>8}  {metrics}{extra}"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
        print(f"wrote {out / 'ablation.json'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = harness.collect_reports(args.runs)
    if not reports:
        raise SystemExit(f"no report.json found under {args.runs}")
    csv_path = harness.write_summary(reports, args.out)
    print(f"{len(reports)} runs summarised")
    print(f"wrote {csv_path}")
    return 0


def cmd_make_data(args: argparse.Namespace) -> int:
    samples = synthetic_dataset(
        args.seed, args.count, size=args.size, num_classes=args.classes, d_far=args.d_far
    )
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densemtl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stl-baseline", default=None,
                   help="JSON with single-task baseline metrics for the gain summary")
    p.add_argument("--median-scale", action="store_true",
                   help="median-rescale depth before scoring")
    p.add_argument("--out", default=None, help="directory to write eval.json into")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="search task loss weights")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True,
                   help="path to a YAML mapping of task ids to weight lists")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(harness.ABLATION_AXES))
    p.add_argument("--stl-baseline", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarise a directory of runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-data", help="materialise a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--d-far", type=float, default=20.0)
    p.set_defaults(func=cmd_make_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
