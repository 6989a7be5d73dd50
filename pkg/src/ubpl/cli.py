"""Command-line entry point: ``ubpl {train,eval,diagnose,plot,ablate}``.

Examples::

    ubpl train --config configs/pose_mt_ubpl.yaml --out runs/mt_ubpl
    ubpl train --set task=regression --set method.name=mean_teacher --seed 1389 --out runs/mt
    ubpl eval runs/mt_ubpl
    ubpl diagnose runs/mt_ubpl --out runs/mt_ubpl/diagnostics
    ubpl plot runs/mt/metrics.csv runs/mt_ubpl/metrics.csv --metric keypoint_mse --out mse.svg
    ubpl ablate --config configs/cls_fixmatch.yaml --out runs/ablation
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .experiment import DiagnoseError, ablate, diagnose, evaluate_run, train_run
from .plot import PlotError, plot_metrics

log = logging.getLogger("ubpl")


def _config_from(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides).resolved()


def cmd_train(args) -> int:
    cfg = _config_from(args)
    out = args.out or f"runs/{cfg.task}_{cfg.method.name}{'_ubpl' if cfg.method.ubpl else ''}_seed{cfg.seed}"
    result = train_run(cfg, out, overwrite=args.overwrite)
    print(json.dumps({"run_dir": str(out), **result.final}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    metrics = evaluate_run(args.run_dir)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_diagnose(args) -> int:
    report = diagnose(args.source, args.out, num_bins=args.bins)
    print(json.dumps({"out_dir": report["out_dir"], "nonempty_bins": report["nonempty_bins"],
                      "decreasing": report["decreasing"]}, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    out = args.out or f"{args.metric}.svg"
    print(plot_metrics(args.metrics, args.metric, out, split=args.split))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    seeds = args.seeds or ([args.seed] if args.seed is not None else [1388, 1389, 1390])
    out = Path(args.out or "runs/ablation")
    out.mkdir(parents=True, exist_ok=True)
    result = ablate(cfg, seeds, out)
    for row in result["summary"]:
        print(json.dumps(row, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ubpl", description="Two-branch ensemble pseudo-labeling lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    configured.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field; repeatable")
    configured.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    p = sub.add_parser("train", parents=[configured], help="train one run")
    p.add_argument("--out", help="run directory (must be new or empty)")
    p.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run's final checkpoint on its test split")
    p.add_argument("run_dir")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="calibration curve and variance decomposition reports")
    p.add_argument("source", help="run directory or .npz dump with confidences/errors[/predictions]")
    p.add_argument("--out", help="report directory (default: <run>/diagnostics)")
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("plot", help="SVG line chart of a metric against epoch")
    p.add_argument("metrics", nargs="+", help="metrics.csv file(s)")
    p.add_argument("--metric", required=True)
    p.add_argument("--split", help="restrict to one split (train/eval/pseudo)")
    p.add_argument("--out", help="SVG path (default: <metric>.svg)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", parents=[configured], help="baseline vs UBPL(noFDL) vs UBPL over seeds")
    p.add_argument("--seeds", type=int, nargs="+", help="seed set (default 1388 1389 1390)")
    p.add_argument("--out", help="directory for per-run folders and ablation.csv")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DiagnoseError, PlotError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
