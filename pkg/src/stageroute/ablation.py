"""Ablation suites over routing, application position, and query init.

Each suite runs a fixed set of configurations across seeds, aggregates
mean and std of the test metrics, and renders a text table. Runs are
independent and may execute in parallel worker processes; each run stays
internally single-threaded and deterministic.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .data import format_metric_row
from .errors import ConfigError
from .runner import RunResult, run_experiment

SUITES = {
    "skip": [
        ("baseline", {"routing": "skip-only", "position": "full"}),
        ("no-skip", {"routing": "no-skip", "position": "full"}),
        ("replace", {"routing": "replace", "position": "full"}),
        ("both", {"routing": "both", "position": "full"}),
    ],
    "position": [
        ("None", {"routing": "replace", "position": "none"}),
        ("Encoder only", {"routing": "replace", "position": "encoder-only"}),
        ("Decoder only", {"routing": "replace", "position": "decoder-only"}),
        ("Full", {"routing": "replace", "position": "full"}),
    ],
    "init": [
        ("Zero-init", {"routing": "both", "position": "full", "init": "zero"}),
        ("Random", {"routing": "both", "position": "full", "init": "random-normal"}),
        ("Kaiming uniform", {"routing": "both", "position": "full", "init": "kaiming-uniform"}),
        ("Xavier uniform", {"routing": "both", "position": "full", "init": "xavier-uniform"}),
    ],
}

_METRICS = ("dice", "iou", "hd95")


def _slug(label):
    return label.lower().replace(" ", "-")


def suite_configs(suite, base: ExperimentConfig, seeds):
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    jobs = []
    for label, overrides in SUITES[suite]:
        for seed in seeds:
            cfg = base.replace(seed=seed, run_id=f"{_slug(label)}_seed{seed}",
                               **overrides)
            jobs.append((label, cfg))
    return jobs


def _run_one(payload):
    label, config_text = payload
    result, _ = run_experiment(ExperimentConfig.from_text(config_text))
    return label, result


@dataclass
class SuiteResult:
    suite: str
    labels: list
    seeds: list
    runs: dict = field(default_factory=dict)   # label -> list[RunResult] by seed order

    def metric_values(self, label, metric):
        key = {"dice": "test_mean_dice", "iou": "test_mean_iou",
               "hd95": "test_mean_hd95"}[metric]
        return [getattr(r, key) for r in self.runs[label]]

    def mean(self, label, metric="dice"):
        return float(np.mean(self.metric_values(label, metric)))

    def std(self, label, metric="dice"):
        return float(np.std(self.metric_values(label, metric)))


def run_suite(suite, base: ExperimentConfig, seeds, jobs=1) -> SuiteResult:
    configs = suite_configs(suite, base, seeds)
    labels = [label for label, _ in SUITES[suite]]
    payloads = [(label, cfg.to_text()) for label, cfg in configs]
    if jobs > 1:
        # cap BLAS threads so parallel workers do not oversubscribe the cores;
        # must be in the environment before each worker process loads numpy
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(processes=jobs) as pool:
            outcomes = pool.map(_run_one, payloads)
    else:
        outcomes = [_run_one(p) for p in payloads]
    result = SuiteResult(suite=suite, labels=labels, seeds=list(seeds),
                         runs={label: [] for label in labels})
    for label, run in outcomes:
        result.runs[label].append(run)
    for label in labels:
        result.runs[label].sort(key=lambda r: r.seed)
    return result


def aggregate_rows(result: SuiteResult):
    """Leaf rows (one per config x seed x metric) plus mean/std aggregates,
    all in the standard metrics CSV schema."""
    rows = []
    for label in result.labels:
        for run in result.runs[label]:
            cfg = ExperimentConfig.from_text(run.config_text)
            for metric in _METRICS:
                value = {"dice": run.test_mean_dice, "iou": run.test_mean_iou,
                         "hd95": run.test_mean_hd95}[metric]
                rows.append(format_metric_row(
                    run.run_id, run.seed, cfg.routing, cfg.position, cfg.init,
                    run.best_epoch, "test", metric, "foreground", value))
    for label in result.labels:
        cfg = ExperimentConfig.from_text(result.runs[label][0].config_text)
        for metric in _METRICS:
            rows.append(format_metric_row(
                _slug(label), "mean", cfg.routing, cfg.position, cfg.init,
                "-", "test", metric, "foreground", result.mean(label, metric)))
            rows.append(format_metric_row(
                _slug(label), "std", cfg.routing, cfg.position, cfg.init,
                "-", "test", metric, "foreground", result.std(label, metric)))
    return rows


def routing_rows(result: SuiteResult):
    """Per-run attention uniformity summaries (max - min mean weight)."""
    rows = []
    for label in result.labels:
        for run in result.runs[label]:
            for site, score in sorted(run.uniformity.items()):
                rows.append((run.run_id, site, f"{score:.6f}"))
    return rows


def render_table(result: SuiteResult):
    """Text table shaped like the ablation tables: Dice and IoU in percent,
    HD95 in pixels, mean over seeds with std."""
    header = f"{'config':<18s} {'DSC (%)':>16s} {'HD95 (px)':>16s} {'mIoU (%)':>16s}"
    lines = [f"suite: {result.suite}  (seeds: {', '.join(map(str, result.seeds))})",
             header, "-" * len(header)]
    for label in result.labels:
        dsc = f"{100 * result.mean(label, 'dice'):.2f} ± {100 * result.std(label, 'dice'):.2f}"
        hd = f"{result.mean(label, 'hd95'):.2f} ± {result.std(label, 'hd95'):.2f}"
        miou = f"{100 * result.mean(label, 'iou'):.2f} ± {100 * result.std(label, 'iou'):.2f}"
        lines.append(f"{label:<18s} {dsc:>16s} {hd:>16s} {miou:>16s}")
    return "\n".join(lines)
