"""Command-line entry point.

Subcommands:
  run              train one configuration, evaluate on the test split,
                   write metrics CSV + best checkpoint + attention traces
  ablate           run the skip / position / init ablation suite across seeds
  gradcheck        finite-difference check of every differentiable operation
  inspect-routing  export attention weights of a trained checkpoint

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields

from .ablation import aggregate_rows, render_table, routing_rows, run_suite
from .backbone import build
from .config import ExperimentConfig
from .data import load_checkpoint, write_metrics_csv
from .errors import ConfigError
from .gradcheck import run_standard_suite
from .runner import (collect_traces, load_dataset, metrics_rows,
                     run_experiment, write_run_outputs, write_trace_csv)

_FLAG_TYPES = {"int": int, "float": float, "str": str}


def _add_config_flags(parser):
    for f in fields(ExperimentConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}",
                            type=_FLAG_TYPES[f.type], default=None,
                            help=f"override config field (default {f.default!r})")


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = ExperimentConfig.from_text(fh.read())
    else:
        cfg = ExperimentConfig()
    overrides = {f.name: getattr(args, f.name)
                 for f in fields(ExperimentConfig)
                 if getattr(args, f.name, None) is not None}
    return cfg.replace(**overrides).validate()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stageroute",
        description="Mini segmentation network with learned cross-stage routing")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate one configuration")
    p_run.add_argument("--config", default=None, help="flat key=value config file")
    _add_config_flags(p_run)

    p_abl = sub.add_parser("ablate", help="run an ablation suite across seeds")
    p_abl.add_argument("--suite", required=True, choices=("skip", "position", "init"))
    p_abl.add_argument("--seeds", default="0,1,2,3,4",
                       help="comma-separated seed list")
    p_abl.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes")
    p_abl.add_argument("--config", default=None)
    _add_config_flags(p_abl)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--tolerance", type=float, default=1e-4)

    p_ins = sub.add_parser("inspect-routing",
                           help="export attention weights of a checkpoint")
    p_ins.add_argument("--checkpoint", required=True)
    p_ins.add_argument("--out-dir", default=None)
    p_ins.add_argument("--batch-size", type=int, default=None)
    return parser


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    result, model = run_experiment(cfg)
    write_run_outputs(cfg, result, model)
    total, overhead = model.parameter_count()
    print(f"run {result.run_id}: {cfg.epochs} epochs, best epoch {result.best_epoch}, "
          f"params {total} (+{overhead} routing overhead)")
    print(f"{'class':>10s} {'dice':>10s} {'iou':>10s} {'hd95':>10s}")
    for c in range(cfg.num_classes):
        print(f"{c:>10d} {result.test_per_class_dice[c]:>10.4f} "
              f"{result.test_per_class_iou[c]:>10.4f} "
              f"{result.test_per_class_hd95[c]:>10.4f}")
    print(f"{'foreground':>10s} {result.test_mean_dice:>10.4f} "
          f"{result.test_mean_iou:>10.4f} {result.test_mean_hd95:>10.4f}")
    print(f"outputs under {cfg.out_dir}/")
    return 0


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    started = time.time()
    result = run_suite(args.suite, base, seeds, jobs=max(1, args.jobs))
    os.makedirs(base.out_dir, exist_ok=True)
    csv_path = os.path.join(base.out_dir, f"ablation_{args.suite}.csv")
    write_metrics_csv(aggregate_rows(result), csv_path)
    table = render_table(result)
    table_path = os.path.join(base.out_dir, f"ablation_{args.suite}.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    routing_path = os.path.join(base.out_dir, f"ablation_{args.suite}_routing.csv")
    with open(routing_path, "w", encoding="ascii") as fh:
        fh.write("run_id,site,uniformity\n")
        for run_id, site, score in routing_rows(result):
            fh.write(f"{run_id},{site},{score}\n")
    print(table)
    print(f"\n{len(seeds) * len(result.labels)} runs in {time.time() - started:.1f}s; "
          f"wrote {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    started = time.time()
    reports = run_standard_suite(tolerance=args.tolerance)
    failures = []
    for report in reports:
        print(report.summary())
        if not report.passed:
            failures.append(report.name)
    print(f"\n{len(reports)} operations checked in {time.time() - started:.1f}s "
          f"at tolerance {args.tolerance:g}")
    if failures:
        print(f"FAILED: {', '.join(failures)}")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_inspect_routing(args) -> int:
    config_text, params, _ = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_text(config_text)
    model = build(cfg.backbone_config(), precision=cfg.precision_mode())
    model.load_state(params)
    dataset = load_dataset(cfg)
    batch = args.batch_size or cfg.batch_size
    rows, uniformity = collect_traces(model, dataset, batch)
    out_dir = args.out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "attention_traces.csv")
    write_trace_csv(rows, trace_path)
    summary_path = os.path.join(out_dir, "routing_summary.csv")
    with open(summary_path, "w", encoding="ascii") as fh:
        fh.write("site,entries,uniformity\n")
        for site, score in sorted(uniformity.items()):
            entries = sum(1 for r in rows if r[0] == site)
            fh.write(f"{site},{entries},{score:.6f}\n")
    print(f"{'site':<8s} {'entries':>8s} {'uniformity':>12s}")
    for site, score in sorted(uniformity.items()):
        entries = sum(1 for r in rows if r[0] == site)
        print(f"{site:<8s} {entries:>8d} {score:>12.6f}")
    print(f"wrote {trace_path} and {summary_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "inspect-routing":
            return cmd_inspect_routing(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
