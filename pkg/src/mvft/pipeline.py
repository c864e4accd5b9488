"""Dataset -> views -> split -> normalization -> training, shared by the CLI and the ablation grid."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import DatasetSplit, WindowSet, make_split
from .model import build_model
from .rng import SeededRng
from .training import Metrics, evaluate, fit, restore_model
from .views import Normalizer, ViewBatch, build_batch, fit_normalizer

log = logging.getLogger(__name__)

# seven baseline view subsets, then the four multi-view MVFT subsets
ABLATION_CELLS = [("baseline", v) for v in ("t", "f", "s", "tf", "ts", "fs", "tfs")] + \
                 [("mvft", v) for v in ("tf", "ts", "fs", "tfs")]


@dataclass
class Experiment:
    dataset: WindowSet
    split: DatasetSplit
    normalizer: Normalizer
    train: ViewBatch
    val: ViewBatch
    test: ViewBatch
    time_quantum: int


@dataclass
class TrainResult:
    model: object
    checkpoint: Checkpoint
    history: list[dict]
    metrics: dict[str, Metrics]


def median_spacing(timestamps: np.ndarray) -> int:
    gaps = np.diff(timestamps, axis=-1)
    gaps = gaps[gaps > 0]
    return max(1, int(np.median(gaps))) if gaps.size else 1


def prepare_experiment(ws: WindowSet, config: TrainConfig) -> Experiment:
    split = make_split(ws.labels, ws.users, config.split_policy, config.split_ratios, config.seed)
    views = build_batch(ws.windows())
    norm = fit_normalizer(views.subset(split.train))
    parts = [norm.apply(views.subset(idx)) for idx in (split.train, split.val, split.test)]
    quantum = config.time_quantum or median_spacing(ws.timestamps)
    return Experiment(ws, split, norm, *parts, time_quantum=quantum)


def model_for(exp: Experiment, config: TrainConfig):
    cfg = config.model_config(exp.dataset.n_channels, exp.dataset.seq_len, exp.dataset.n_class,
                              exp.time_quantum)
    return build_model(cfg, SeededRng(config.seed).fork(0))


def run_training(exp: Experiment, config: TrainConfig, on_epoch=None) -> TrainResult:
    model = model_for(exp, config)
    echo = {"model": model.config.to_dict(),
            "train": dataclasses.replace(config, time_quantum=exp.time_quantum).to_dict()}
    val = exp.val if len(exp.val) else exp.train
    best, history = fit(model, exp.train, val, config, config_echo=echo,
                        normalizer=exp.normalizer.arrays(), on_epoch=on_epoch)
    best_model = restore_model(best)
    metrics = {name: evaluate(best_model, part)
               for name, part in (("train", exp.train), ("val", exp.val), ("test", exp.test)) if len(part)}
    return TrainResult(best_model, best, history, metrics)


def run_cell(exp: Experiment, config: TrainConfig, kind: str, views: str) -> TrainResult:
    """One ablation cell: fixed epoch budget (no early stop), best-validation snapshot."""
    cfg = dataclasses.replace(config, model=kind, views=views, patience=config.max_epochs)
    return run_training(exp, cfg)


def run_ablation(exp: Experiment, config: TrainConfig, cells=ABLATION_CELLS, on_cell=None) -> list[dict]:
    rows = []
    for kind, views in cells:
        try:
            result = run_cell(exp, config, kind, views)
            best_epoch = result.checkpoint.epoch
            test = result.metrics.get("test")
            row = {"model": kind, "views": views, "status": "ok",
                   "test_accuracy": test.accuracy if test else None,
                   "val_accuracy": result.checkpoint.best_val_accuracy,
                   "best_epoch": best_epoch, "epochs_run": len(result.history)}
        except Exception as exc:  # a failing cell is recorded, the grid continues
            log.exception("ablation cell %s/%s failed", kind, views)
            row = {"model": kind, "views": views, "status": "failed", "test_accuracy": None,
                   "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
        if on_cell is not None:
            on_cell(row)
    return rows


def format_grid(rows: list[dict]) -> str:
    lines = [f"{'model':<9} {'T':^3} {'F':^3} {'S':^3} {'test acc (%)':>12}"]
    for r in rows:
        marks = ["x" if v in r["views"] else "" for v in "tfs"]
        acc = f"{100 * r['test_accuracy']:.2f}" if r["test_accuracy"] is not None else r["status"]
        lines.append(f"{r['model']:<9} {marks[0]:^3} {marks[1]:^3} {marks[2]:^3} {acc:>12}")
    return "\n".join(lines)
