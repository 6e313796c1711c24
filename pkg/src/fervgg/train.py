"""Training runs, ten-crop evaluation, fine-tuning and confusion matrices.

Metrics log (``metrics.tsv``) is tab-separated with the header
``epoch lr train_loss train_acc val_acc seconds`` and one row per epoch.
``seconds`` is ``-`` unless wall-time logging is enabled, which keeps
logs byte-identical across reruns. The last line is
``summary <test_acc> <49 confusion counts, row-major, space-separated>``.
"""

from __future__ import annotations

import copy
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import (N_CLASSES, FerRecord, Batch, limit_per_class, make_batches, merge_train_val,
                   select_split)
from .errors import DataError, NumericError
from .model import VggModel, build, decode_checkpoint, encode_checkpoint, load_state, save_checkpoint
from .nn import softmax, softmax_cross_entropy
from .optim import Optimizer
from .sched import Scheduler, make_scheduler
from .tensor import SeededRng

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch\tlr\ttrain_loss\ttrain_acc\tval_acc\tseconds"


class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    def __init__(self, n_classes: int = N_CLASSES):
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def add(self, true, pred):
        np.add.at(self.counts, (np.asarray(true), np.asarray(pred)), 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def flat(self) -> List[int]:
        return [int(v) for v in self.counts.ravel()]


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: Optional[float] = None

    def line(self) -> str:
        secs = "-" if self.seconds is None else f"{self.seconds:.3f}"
        return (f"{self.epoch}\t{self.lr:.9g}\t{self.train_loss:.6f}\t{self.train_acc:.6f}"
                f"\t{self.val_acc:.6f}\t{secs}")


@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    predictions: np.ndarray
    labels: np.ndarray


@dataclass
class RunResult:
    metrics: List[EpochMetrics]
    best_val_acc: float
    best_epoch: int
    test: Optional[EvalResult]
    checkpoint: bytes
    model: VggModel


def summary_line(result: EvalResult) -> str:
    return f"summary\t{result.accuracy:.6f}\t" + " ".join(map(str, result.confusion.flat()))


def train_epoch(model: VggModel, optimizer: Optimizer, batches: Iterable[Batch],
                loss_scale: float = 1.0, rng: Optional[SeededRng] = None):
    """One pass over ``batches``; returns (mean unscaled loss, accuracy over crops).

    With ``loss_scale`` s the logit gradient is multiplied by s before
    backpropagation and parameter gradients are divided by s before the step.
    """
    total_loss = 0.0
    correct = 0
    seen = 0
    for i, batch in enumerate(batches):
        drop_rng = rng.child(i) if rng is not None else SeededRng(0, keys=(i,))
        logits = model.forward(batch.images, "train", drop_rng)
        res = softmax_cross_entropy(logits, batch.labels)
        if not np.isfinite(res.loss):
            raise NumericError(f"non-finite loss in batch {i}")
        upstream = res.logit_grad * logits.dtype.type(loss_scale) if loss_scale != 1 else res.logit_grad
        grads = model.backward(upstream)
        if loss_scale != 1:
            inv = logits.dtype.type(loss_scale)
            grads = {k: g / inv for k, g in grads.items()}
        try:
            optimizer.step(model.params, grads)
        except NumericError as exc:
            raise NumericError(f"batch {i}: {exc}") from None
        n = len(batch)
        total_loss += res.loss * n
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
        seen += n
    if seen == 0:
        raise DataError("empty epoch")
    return total_loss / seen, correct / seen


def evaluate(model, batches: Iterable[Batch], average: str = "prob", n_classes: int = N_CLASSES) -> EvalResult:
    """Ten-crop evaluation: per record, average softmax probabilities (or logits)
    over its crops and predict the argmax. Accuracy is counted over records."""
    cm = ConfusionMatrix(n_classes)
    preds, labels = [], []
    for batch in batches:
        logits = model.forward(batch.images, "eval")
        scores = softmax(logits.astype(np.float64)) if average == "prob" else logits.astype(np.float64)
        ids = batch.record_ids
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        means = np.add.reduceat(scores, starts, axis=0) / np.diff(np.r_[starts, len(ids)])[:, None]
        p = means.argmax(axis=1)
        y = batch.labels[starts]
        cm.add(y, p)
        preds.append(p)
        labels.append(y)
    preds = np.concatenate(preds) if preds else np.zeros(0, int)
    labels = np.concatenate(labels) if labels else np.zeros(0, int)
    return EvalResult(cm.accuracy, cm, preds, labels)


def evaluate_records(model, records: Sequence[FerRecord], cfg: RunConfig,
                     optimizer: Optional[Optimizer] = None) -> EvalResult:
    """Evaluate ``records``; averaged parameters are swapped in for ASGD."""
    batches = make_batches(records, cfg.data, None, "eval", cfg.train.batch_size,
                           dtype=model.config.np_dtype)
    if optimizer is not None and optimizer.kind == "asgd" and optimizer.step_count > 0:
        optimizer.swap_in_average(model.params)
        try:
            return evaluate(model, batches, cfg.train.average)
        finally:
            optimizer.swap_out_average(model.params)
    return evaluate(model, batches, cfg.train.average)


@dataclass
class Splits:
    train: List[FerRecord]
    val: List[FerRecord]
    test: List[FerRecord]


def split_records(records: Sequence[FerRecord], cfg: RunConfig, merge_val: bool = False) -> Splits:
    d = cfg.data
    if d.limit_per_class > 0:
        records = limit_per_class(records, d.limit_per_class)
    val = select_split(records, d.val_split)
    if merge_val:
        records = merge_train_val(records, d.val_split, d.train_split)
    splits = Splits(select_split(records, d.train_split), val, select_split(records, d.test_split))
    if not splits.train:
        raise DataError(f"no records in training split {d.train_split!r}")
    return splits


class _Outputs:
    """Optional on-disk artifacts of a run."""

    def __init__(self, out_dir: Optional[str]):
        self.out_dir = out_dir
        self.fh = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self.fh = open(os.path.join(out_dir, "metrics.tsv"), "w", encoding="utf-8", newline="\n")
            self.fh.write(METRICS_HEADER + "\n")
            self.fh.flush()

    def epoch(self, m: EpochMetrics):
        if self.fh:
            self.fh.write(m.line() + "\n")
            self.fh.flush()

    def checkpoint(self, model, extras):
        if self.out_dir:
            save_checkpoint(model, os.path.join(self.out_dir, "best.ckpt"), extras)

    def close(self, test: Optional[EvalResult], summary: Dict[str, str]):
        if not self.fh:
            return
        if test is not None:
            self.fh.write(summary_line(test) + "\n")
        self.fh.close()
        with open(os.path.join(self.out_dir, "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
            for k, v in summary.items():
                fh.write(f"{k}\t{v}\n")


def _fit(model: VggModel, optimizer: Optimizer, scheduler: Scheduler, splits: Splits,
         cfg: RunConfig, epochs: int, rng: SeededRng, out: _Outputs, select: str = "best",
         restore_best_on_restart: bool = False) -> RunResult:
    metrics: List[EpochMetrics] = []
    best_val, best_epoch = -1.0, -1
    best_bytes = b""
    dtype = model.config.np_dtype
    for epoch in range(epochs):
        if restore_best_on_restart and scheduler.is_restart(epoch) and best_bytes:
            load_state(model, decode_checkpoint(best_bytes)[2])
        lr = scheduler.current_lr
        optimizer.lr = lr
        t_start = time.perf_counter()
        batches = make_batches(splits.train, cfg.data, rng.child(1), "train", cfg.train.batch_size,
                               epoch=epoch, train_crops=cfg.data.train_crops, dtype=dtype)
        loss, acc = train_epoch(model, optimizer, batches, cfg.train.loss_scale, rng.child(2, epoch))
        val_acc = evaluate_records(model, splits.val, cfg, optimizer).accuracy if splits.val else 0.0
        scheduler.observe(val_acc)
        seconds = time.perf_counter() - t_start if cfg.train.log_wall_time else None
        m = EpochMetrics(epoch, lr, loss, acc, val_acc, seconds)
        metrics.append(m)
        out.epoch(m)
        log.info(m.line())
        improved = val_acc > best_val
        if select == "last" or improved:
            if improved:
                best_val, best_epoch = val_acc, epoch
            if select == "last":
                best_epoch = epoch
            extras = {"epoch": epoch, "best_val_acc": best_val, "val_acc": val_acc,
                      "optimizer": optimizer.state_dict(), "scheduler": scheduler.state_dict()}
            if optimizer.kind == "asgd":
                optimizer.swap_in_average(model.params)
            try:
                best_bytes = encode_checkpoint(model, extras)
                out.checkpoint(model, extras)
            finally:
                if optimizer.kind == "asgd":
                    optimizer.swap_out_average(model.params)
    load_state(model, decode_checkpoint(best_bytes)[2])
    test = None
    if splits.test:
        test = evaluate_records(model, splits.test, cfg)
    summary = {"best_epoch": str(best_epoch), "best_val_acc": f"{best_val:.6f}",
               "test_acc": f"{test.accuracy:.6f}" if test else "-",
               "confusion": " ".join(map(str, test.confusion.flat())) if test else "-"}
    out.close(test, summary)
    return RunResult(metrics, best_val, best_epoch, test, best_bytes, model)


def new_optimizer(cfg: RunConfig, lr: float) -> Optimizer:
    return Optimizer(cfg.optim.kind, cfg.optim.hyperparams(lr))


def run_experiment(cfg: RunConfig, records: Sequence[FerRecord], out_dir: Optional[str] = None) -> RunResult:
    """Train from scratch for ``cfg.train.epochs`` and test the best-by-validation checkpoint."""
    splits = split_records(records, cfg)
    rng = SeededRng(cfg.train.seed)
    model = build(cfg.model, rng.child(0))
    scheduler = make_scheduler(cfg.sched, cfg.train.epochs)
    optimizer = new_optimizer(cfg, scheduler.current_lr)
    out = _Outputs(out_dir)
    return _fit(model, optimizer, scheduler, splits, cfg, cfg.train.epochs, rng.child(1), out,
                restore_best_on_restart=cfg.sched.restore_best_on_restart)


def finetune_config(cfg: RunConfig, scheduler: str) -> RunConfig:
    epochs = cfg.train.finetune_epochs
    sched = copy.copy(cfg.sched)
    sched.kind = scheduler
    sched.__post_init__()
    if sched.kind not in ("cosine", "cosine-wr"):
        raise ValueError("fine-tuning uses cosine or cosine-wr")
    sched.lr0 = cfg.train.finetune_lr
    sched.t_max = epochs
    return cfg.replace(sched=sched)


def fine_tune(model: VggModel, cfg: RunConfig, records: Sequence[FerRecord], scheduler: str = "cosine",
              merge_val: bool = False, out_dir: Optional[str] = None) -> RunResult:
    """Continue training a loaded model for the fine-tune horizon at a small initial lr.

    With ``merge_val`` the validation split joins the training data and the
    final epoch is kept instead of the best-by-validation one.
    """
    cfg = finetune_config(cfg, scheduler)
    splits = split_records(records, cfg, merge_val=merge_val)
    epochs = cfg.train.finetune_epochs
    sched = make_scheduler(cfg.sched, epochs)
    optimizer = new_optimizer(cfg, sched.current_lr)
    rng = SeededRng(cfg.train.seed).child(2)
    return _fit(model, optimizer, sched, splits, cfg, epochs, rng, _Outputs(out_dir),
                select="last" if merge_val else "best",
                restore_best_on_restart=cfg.sched.restore_best_on_restart)
