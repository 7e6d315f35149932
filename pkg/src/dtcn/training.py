"""Optimisation loop, metrics, evaluation and the fusion ablation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import Sample, epoch_order, iterate_batches, load_dataset, split_texts
from .errors import CheckpointError, ContractError, DataError, NumericError
from .model import ModelParams, forward, init_model, loss
from .rng import Rng
from .tensor import Tape, Tensor, backward, zero_grad
from .text import Vocab

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss_total", "loss_cls", "loss_contrast", "accuracy", "macro_f1")


class TrainingError(NumericError):
    """Non-finite values during a training step."""


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState) -> None:
    """Bias-corrected Adam update of every ``(name, tensor)`` pair, in place."""
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(params: Sequence[tuple[str, Tensor]], max_norm: float | None) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in params if p.grad is not None))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------- metrics


def accuracy_macro_f1(preds: Sequence[int], labels: Sequence[int], num_classes: int, average: str = "macro") -> tuple[float, float]:
    """Accuracy and class-averaged F1.

    ``macro`` is the unweighted mean over all ``num_classes`` classes (a class
    with no predictions and no labels scores 0); ``weighted`` weights each
    class by its label count.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise ContractError("predictions and labels must be equal-length, non-empty 1-d sequences")
    for arr, what in ((preds, "prediction"), (labels, "label")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractError(f"{what} outside [0, {num_classes})")
    acc = float((preds == labels).mean())
    f1 = np.zeros(num_classes)
    support = np.zeros(num_classes)
    for c in range(num_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        support[c] = tp + fn
        f1[c] = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    if average == "macro":
        return acc, float(f1.mean())
    if average == "weighted":
        return acc, float((f1 * support).sum() / support.sum())
    raise ContractError(f"unknown F1 average {average!r}")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss_total: float
    loss_cls: float
    loss_contrast: float
    accuracy: float
    macro_f1: float

    def row(self) -> list[str]:
        return [str(self.epoch), self.split] + [
            f"{x:.6f}" for x in (self.loss_total, self.loss_cls, self.loss_contrast, self.accuracy, self.macro_f1)
        ]


@dataclass
class BatchRecord:
    epoch: int
    split: str
    index: int
    loss_total: float
    loss_cls: float
    loss_contrast: float
    lam: float


def write_metrics(path: str | Path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for rec in records:
            writer.writerow(rec.row())


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class _Tally:
    def __init__(self):
        self.totals = [0.0, 0.0, 0.0]
        self.batches = 0
        self.preds: list[int] = []
        self.labels: list[int] = []

    def add(self, losses, logits: np.ndarray, labels: np.ndarray) -> None:
        for i, value in enumerate(losses):
            self.totals[i] += value
        self.batches += 1
        self.preds.extend(int(p) for p in logits.argmax(axis=1))
        self.labels.extend(int(y) for y in labels)

    def record(self, epoch: int, split: str, cfg: RunConfig) -> MetricsRecord:
        means = [t / self.batches for t in self.totals]
        acc, f1 = accuracy_macro_f1(self.preds, self.labels, cfg.num_classes, cfg.f1_average)
        return MetricsRecord(epoch, split, means[0], means[1], means[2], acc, f1)


def evaluate_samples(
    params: ModelParams,
    samples: Sequence[Sample],
    cfg: RunConfig,
    epoch: int = 0,
    split: str = "val",
    batch_log: list[BatchRecord] | None = None,
) -> MetricsRecord:
    """Eval-mode pass in the given order; deterministic."""
    if not samples:
        raise DataError(f"split {split!r} is empty")
    tally = _Tally()
    for i, batch in enumerate(iterate_batches(samples, cfg.batch_size)):
        out = forward(params, batch, cfg, None, training=False)
        total, cls, con = (t.item() for t in loss(out, batch, cfg))
        tally.add((total, cls, con), out.logits.data, batch.labels)
        if batch_log is not None:
            batch_log.append(BatchRecord(epoch, split, i, total, cls, con, _effective_lambda(cfg)))
    return tally.record(epoch, split, cfg)


def _effective_lambda(cfg: RunConfig) -> float:
    return 0.0 if cfg.fusion == "late" else cfg.lam


# ---------------------------------------------------------------- training loop


@dataclass
class EarlyStopState:
    patience: int
    path: Path
    best_val_f1: float | None = None
    best_epoch: int = 0

    def update(self, epoch: int, val_f1: float) -> bool:
        """True when ``val_f1`` strictly improves on the best so far."""
        if self.best_val_f1 is None or val_f1 > self.best_val_f1:
            self.best_val_f1 = val_f1
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    run_dir: Path
    records: list[MetricsRecord]
    batch_log: list[BatchRecord]
    best_epoch: int
    best_val_f1: float | None

    def record(self, split: str, epoch: int | None = None) -> MetricsRecord:
        for rec in self.records:
            if rec.split == split and (epoch is None or rec.epoch == epoch):
                return rec
        raise KeyError((split, epoch))


StepHook = Callable[[int, int, ModelParams], None]


def train(
    cfg: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    on_step: StepHook | None = None,
) -> TrainResult:
    """Train one model and write its run directory.

    Produces ``config.txt``, ``vocab.txt``, ``metrics.csv``, ``batches.csv``,
    ``best.ckpt`` and ``final.ckpt``.  ``on_step(epoch, batch_index, params)``
    runs after each backward pass, while gradients are still attached.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    vocab = Vocab.build(split_texts(data_dir, "train"), cfg.vocab_size)
    vocab.save(out / "vocab.txt")
    ds = load_dataset(data_dir, vocab, cfg)
    for name in ("train", "val", "test"):
        if not ds[name]:
            raise DataError(f"{data_dir}: split {name!r} is empty")

    params = init_model(cfg, len(vocab))
    named = params.named()
    adam = AdamState(cfg.lr)
    drop_rng = Rng(cfg.seed).spawn("dropout")
    early = EarlyStopState(cfg.patience, out / "best.ckpt")
    checkpoint.save(early.path, cfg, params)
    records: list[MetricsRecord] = []
    batch_log: list[BatchRecord] = []
    lam = _effective_lambda(cfg)
    train_samples = ds["train"]

    for epoch in range(1, cfg.epochs + 1):
        tally = _Tally()
        order = epoch_order(len(train_samples), cfg.seed, epoch)
        for bi, batch in enumerate(iterate_batches(train_samples, cfg.batch_size, order)):
            zero_grad(params)
            try:
                with Tape() as tape:
                    result = forward(params, batch, cfg, drop_rng, training=True)
                    total, cls, con = loss(result, batch, cfg)
                backward(total, tape)
            except NumericError as e:
                _dump_diagnostic(out, epoch, bi, batch.sample_ids, str(e))
                raise TrainingError(
                    f"non-finite value at epoch {epoch}, batch {bi} (samples {batch.sample_ids[:4]}...): {e}"
                ) from e
            if on_step is not None:
                on_step(epoch, bi, params)
            clip_grad_norm(named, cfg.clip_norm)
            adam_step(named, adam)
            values = (total.item(), cls.item(), con.item())
            tally.add(values, result.logits.data, batch.labels)
            batch_log.append(BatchRecord(epoch, "train", bi, *values, lam))
        records.append(tally.record(epoch, "train", cfg))
        val = evaluate_samples(params, ds["val"], cfg, epoch, "val", batch_log)
        records.append(val)
        log.info("epoch %d: train loss %.4f, val acc %.4f f1 %.4f", epoch, records[-2].loss_total, val.accuracy, val.macro_f1)
        if early.update(epoch, val.macro_f1):
            checkpoint.save(early.path, cfg, params)
        elif early.should_stop(epoch):
            log.info("early stop at epoch %d (best %d)", epoch, early.best_epoch)
            break

    checkpoint.save(out / "final.ckpt", cfg, params)
    _, best = checkpoint.load(early.path, len(vocab))
    records.append(evaluate_samples(best, ds["test"], cfg, early.best_epoch, "test", batch_log))
    write_metrics(out / "metrics.csv", records)
    _write_batch_log(out / "batches.csv", batch_log)
    return TrainResult(out, records, batch_log, early.best_epoch, early.best_val_f1)


def _dump_diagnostic(out: Path, epoch: int, batch: int, sample_ids: list[str], message: str) -> None:
    payload = {"epoch": epoch, "batch": batch, "sample_ids": sample_ids, "error": message}
    (out / "diagnostic.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_batch_log(path: Path, batch_log: Sequence[BatchRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "split", "batch", "loss_total", "loss_cls", "loss_contrast", "lambda"))
        for r in batch_log:
            writer.writerow((r.epoch, r.split, r.index, repr(r.loss_total), repr(r.loss_cls), repr(r.loss_contrast), repr(r.lam)))


# ---------------------------------------------------------------- evaluation from disk


def evaluate(checkpoint_path: str | Path, data_dir: str | Path, split: str = "val") -> MetricsRecord:
    """Re-run a stored model on one split.  Expects ``vocab.txt`` beside the checkpoint."""
    checkpoint_path = Path(checkpoint_path)
    vocab_path = checkpoint_path.parent / "vocab.txt"
    if not vocab_path.exists():
        raise CheckpointError(f"{vocab_path}: vocabulary not found next to checkpoint")
    vocab = Vocab.load(vocab_path)
    cfg, params = checkpoint.load(checkpoint_path)
    if params.text.token_embedding.shape[0] != len(vocab):
        raise CheckpointError(f"{checkpoint_path}: vocabulary has {len(vocab)} entries, model expects {params.text.token_embedding.shape[0]}")
    try:
        ds = load_dataset(data_dir, vocab, cfg)
    except DataError as e:
        raise CheckpointError(f"{checkpoint_path}: data does not match the stored config ({e})") from e
    return evaluate_samples(params, ds[split], cfg, 0, split)


def ablate_fusion(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path) -> list[dict]:
    """Train the early- and late-fusion variants on the same data and seed.

    Late fusion has no contrastive term, so its lambda is forced to 0.
    Writes ``ablation.csv`` with one row per mode (test accuracy and F1).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in ("early", "late"):
        run_cfg = cfg.replace(fusion=mode, lam=cfg.lam if mode == "early" else 0.0)
        result = train(run_cfg, data_dir, out / mode)
        test = result.record("test")
        rows.append({"mode": mode, "acc": test.accuracy, "f1": test.macro_f1})
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("mode", "acc", "f1"))
        for row in rows:
            writer.writerow((row["mode"], f"{row['acc']:.6f}", f"{row['f1']:.6f}"))
    return rows
