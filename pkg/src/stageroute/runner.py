"""One experiment = dataset + model + training + evaluation + exports.

Shared by the CLI, the ablation suites, and the acceptance tests. Results
are plain data so that ablation runs can execute in parallel worker
processes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import build
from .config import ExperimentConfig
from .data import (Dataset, format_metric_row, generate_synthetic,
                   load_directory, save_checkpoint, write_metrics_csv)
from .tensor import Tensor, no_grad
from .training import TrainResult, evaluate_model, train_model

TRACE_COLUMNS = ("site", "source_side", "source_index",
                 "mean_weight", "min_weight", "max_weight")


@dataclass
class RunResult:
    run_id: str
    seed: int
    config_text: str
    history: list
    best_epoch: int
    best_val_dice: float
    test_mean_dice: float
    test_mean_iou: float
    test_mean_hd95: float
    test_per_class_dice: list
    test_per_class_iou: list
    test_per_class_hd95: list
    test_mean_dice_with_background: float
    trace_rows: list = field(default_factory=list)
    uniformity: dict = field(default_factory=dict)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_dir:
        return load_directory(cfg.data_dir, cfg.num_classes, cfg.data_seed)
    return generate_synthetic(cfg.synthetic_spec())


def collect_traces(model, dataset, batch_size):
    """Forward one deterministic test batch and summarize attention weights.

    Returns (trace rows in the export schema, per-site uniformity scores).
    """
    indices = dataset.splits["test"] or dataset.splits["val"] or dataset.splits["train"]
    chunk = indices[:max(1, batch_size)]
    xb = np.stack([dataset.images[i] for i in chunk]).astype(model.dtype)
    with no_grad():
        artifacts = model.forward(Tensor(xb))
    rows = []
    uniformity = {}
    for trace in artifacts.traces:
        rows.extend(trace.rows())
        uniformity[trace.site] = trace.uniformity_score()
    return rows, uniformity


def run_experiment(cfg: ExperimentConfig, dataset: Dataset = None):
    """Train and evaluate one configuration; returns (RunResult, model)."""
    cfg.validate()
    if dataset is None:
        dataset = load_dataset(cfg)
    model = build(cfg.backbone_config(), precision=cfg.precision_mode())
    result: TrainResult = train_model(model, dataset, cfg.train_settings())
    report = evaluate_model(model, dataset, split="test", batch_size=cfg.batch_size)
    trace_rows, uniformity = collect_traces(model, dataset, cfg.batch_size)
    return RunResult(
        run_id=cfg.resolved_run_id(),
        seed=cfg.seed,
        config_text=cfg.to_text(),
        history=result.history,
        best_epoch=result.best_epoch,
        best_val_dice=result.best_val_dice,
        test_mean_dice=report.mean_dice,
        test_mean_iou=report.mean_iou,
        test_mean_hd95=report.mean_hd95,
        test_per_class_dice=report.per_class_dice,
        test_per_class_iou=report.per_class_iou,
        test_per_class_hd95=report.per_class_hd95,
        test_mean_dice_with_background=report.mean_dice_with_background,
        trace_rows=trace_rows,
        uniformity=uniformity,
    ), model


def metrics_rows(cfg: ExperimentConfig, result: RunResult):
    """Per-epoch and final-test rows in the metrics CSV schema."""
    base = dict(run_id=result.run_id, seed=cfg.seed, routing=cfg.routing,
                position=cfg.position, init=cfg.init)
    rows = []
    for entry in result.history:
        rows.append(format_metric_row(**base, epoch=entry["epoch"], split="train",
                                      metric="loss", cls="all", value=entry["train_loss"]))
        rows.append(format_metric_row(**base, epoch=entry["epoch"], split="val",
                                      metric="dice", cls="foreground", value=entry["val_dice_fg"]))
    final = result.best_epoch
    per_class = [("dice", result.test_per_class_dice),
                 ("iou", result.test_per_class_iou),
                 ("hd95", result.test_per_class_hd95)]
    for metric, values in per_class:
        for c, value in enumerate(values):
            rows.append(format_metric_row(**base, epoch=final, split="test",
                                          metric=metric, cls=c, value=value))
    rows.append(format_metric_row(**base, epoch=final, split="test",
                                  metric="dice", cls="foreground", value=result.test_mean_dice))
    rows.append(format_metric_row(**base, epoch=final, split="test",
                                  metric="iou", cls="foreground", value=result.test_mean_iou))
    rows.append(format_metric_row(**base, epoch=final, split="test",
                                  metric="hd95", cls="foreground", value=result.test_mean_hd95))
    rows.append(format_metric_row(**base, epoch=final, split="test",
                                  metric="dice", cls="all", value=result.test_mean_dice_with_background))
    return rows


def write_trace_csv(rows, path):
    lines = [",".join(TRACE_COLUMNS)]
    for site, side, index, mean_w, min_w, max_w in rows:
        lines.append(f"{site},{side},{index},{mean_w:.6f},{min_w:.6f},{max_w:.6f}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_run_outputs(cfg: ExperimentConfig, result: RunResult, model,
                      optimizer_state=None):
    """Write metrics.csv, best checkpoint, trace CSV, and the config echo."""
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(metrics_rows(cfg, result), os.path.join(out_dir, "metrics.csv"))
    write_trace_csv(result.trace_rows, os.path.join(out_dir, "attention_traces.csv"))
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    ckpt_path = os.path.join(out_dir, "best_model.ckpt")
    save_checkpoint(ckpt_path, cfg.to_text(),
                    {name: p.data for name, p in model.parameters().items()},
                    optimizer=optimizer_state)
    return ckpt_path
