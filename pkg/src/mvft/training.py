"""Mini-batch Adam training, evaluation, early stopping and checkpoint snapshots."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint
from .config import TrainConfig
from .model import ModelConfig, build_model
from .optim import Adam, AdamState
from .rng import SeededRng
from .views import ViewBatch

log = logging.getLogger(__name__)

EVAL_BATCH = 256


class TrainingError(ValueError):
    pass


@dataclass
class Metrics:
    accuracy: float
    loss: float
    confusion: np.ndarray  # true x predicted counts
    precision: list[float]
    recall: list[float]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "loss": self.loss, "confusion": self.confusion.tolist(),
                "precision": self.precision, "recall": self.recall}


def predict_logits(model, data: ViewBatch, batch_size: int = EVAL_BATCH) -> np.ndarray:
    with ag.no_grad():
        return np.concatenate([model.forward(data.subset(np.arange(s, min(s + batch_size, len(data))))).data
                               for s in range(0, len(data), batch_size)])


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray, n_class: int) -> Metrics:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    pred = probs.argmax(axis=1)  # first maximum: ties go to the smaller class index
    confusion = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    hits = np.diag(confusion).astype(np.float64)
    cols, rows = confusion.sum(axis=0), confusion.sum(axis=1)
    precision = [float(hits[k] / cols[k]) if cols[k] else 0.0 for k in range(n_class)]
    recall = [float(hits[k] / rows[k]) if rows[k] else 0.0 for k in range(n_class)]
    return Metrics(accuracy=float(hits.sum() / labels.shape[0]),
                   loss=float(-logp[np.arange(labels.shape[0]), labels].mean()),
                   confusion=confusion, precision=precision, recall=recall)


def evaluate(model, data: ViewBatch) -> Metrics:
    if len(data) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    return metrics_from_logits(predict_logits(model, data), data.labels, model.config.n_class)


def train_epoch(model, optimizer: Adam, data: ViewBatch, config: TrainConfig, rng: SeededRng) -> float:
    """One shuffled pass of Adam steps; returns the sample-weighted mean batch loss."""
    n = len(data)
    if n == 0:
        raise TrainingError("cannot train on an empty dataset")
    order = rng.permutation(n)
    drop_rng = rng.fork(0) if config.dropout > 0 else None
    total = 0.0
    for start in range(0, n, config.batch_size):
        batch = data.subset(order[start:start + config.batch_size])
        optimizer.zero_grad()
        loss = ag.cross_entropy(model.forward(batch, rng=drop_rng), batch.labels)
        ag.backward(loss)
        optimizer.step()
        total += loss.item() * len(batch)
    return total / n


def make_optimizer(model, config: TrainConfig) -> Adam:
    return Adam(model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def snapshot(model, optimizer: Adam, epoch: int, config_echo: dict, best_val_accuracy: float,
             normalizer: dict | None = None) -> Checkpoint:
    return Checkpoint(params={k: p.data.copy() for k, p in model.named_parameters()},
                      adam=copy.deepcopy(optimizer.state), epoch=epoch, config=copy.deepcopy(config_echo),
                      best_val_accuracy=best_val_accuracy,
                      normalizer={k: v.copy() for k, v in (normalizer or {}).items()})


def load_params(model, params: dict[str, np.ndarray]) -> None:
    own = model.parameters()
    if set(own) != set(params):
        missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise TrainingError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise TrainingError(f"{name}: checkpoint shape {params[name].shape}, model {p.shape}")
        p.data = np.array(params[name], dtype=np.float64)


def restore_model(ckpt: Checkpoint):
    model = build_model(ModelConfig.from_dict(ckpt.config["model"]), SeededRng(0))
    load_params(model, ckpt.params)
    return model


def restore_optimizer(model, ckpt: Checkpoint) -> Adam:
    opt = Adam(model.parameters())
    opt.state = AdamState(lr=ckpt.adam.lr, beta1=ckpt.adam.beta1, beta2=ckpt.adam.beta2, eps=ckpt.adam.eps,
                          t=ckpt.adam.t, m={k: v.copy() for k, v in ckpt.adam.m.items()},
                          v={k: v.copy() for k, v in ckpt.adam.v.items()})
    return opt


def fit(model, train: ViewBatch, val: ViewBatch, config: TrainConfig, *, config_echo: dict | None = None,
        normalizer: dict | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train up to ``max_epochs``; keep the best-validation-accuracy snapshot.

    Stops once more than ``patience`` consecutive epochs fail to strictly
    improve validation accuracy. With ``max_epochs == 0`` the initial model is
    evaluated once and returned.
    """
    if len(train) == 0:
        raise TrainingError("empty training set")
    echo = config_echo if config_echo is not None else {"model": model.config.to_dict(),
                                                        "train": config.to_dict()}
    optimizer = make_optimizer(model, config)
    rng = SeededRng(config.seed).fork(1)
    history: list[dict] = []
    if config.max_epochs == 0:
        acc = evaluate(model, val).accuracy
        return snapshot(model, optimizer, 0, echo, acc, normalizer), history
    best: Checkpoint | None = None
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        loss = train_epoch(model, optimizer, train, config, rng)
        vm = evaluate(model, val)
        record = {"epoch": epoch, "train_loss": loss, "val_accuracy": vm.accuracy, "val_loss": vm.loss}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d loss %.5f val_acc %.4f", epoch, loss, vm.accuracy)
        if best is None or vm.accuracy > best.best_val_accuracy:
            best = snapshot(model, optimizer, epoch, echo, vm.accuracy, normalizer)
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    return best, history
