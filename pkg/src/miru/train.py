"""Mini-batch training and evaluation loops shared by every experiment."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .data import Dataset, SequenceBatch, batches, to_sequences
from .network import (ModelConfig, ModelParams, backward_through_time, forward_sequence,
                      loss_and_grad, predict_logits)
from .numerics import Rng
from .optim import Optimizer


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, context: dict):
        super().__init__(f"{message}: {context}")
        self.context = context


@dataclass
class EpochStats:
    loss: float
    accuracy: float
    examples: int
    seconds: float


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def train_step(p: ModelParams, cfg: ModelConfig, opt: Optimizer, batch: SequenceBatch,
               clip: float | None = None) -> tuple[float, int]:
    """One forward/backward/update. Returns (loss, correct predictions)."""
    rec = forward_sequence(p, cfg, batch)
    loss, dlogits = loss_and_grad(rec.logits, batch.labels, cfg.loss)
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite loss", {"batch_size": batch.size})
    grads = backward_through_time(p, cfg, rec, dlogits)
    if clip is not None:
        clip_global_norm(grads, clip)
    opt.step(p.tensors(), grads)
    return loss, int((_predicted(rec.logits, cfg) == batch.labels).sum())


def _predicted(logits: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.loss == "sigmoid" and cfg.n_y == 1:
        return (logits[0] > 0).astype(np.int64)
    return logits.argmax(axis=0)


def train_epoch(p: ModelParams, cfg: ModelConfig, opt: Optimizer,
                batch_iter: Iterable[SequenceBatch],
                prepare: Callable[[SequenceBatch], SequenceBatch] | None = None,
                clip: float | None = None, context: dict | None = None) -> EpochStats:
    """Train over ``batch_iter``; ``prepare`` may rewrite each batch first
    (the replay hook uses it to store and interleave samples)."""
    start = time.perf_counter()
    total_loss = 0.0
    correct = seen = 0
    for j, batch in enumerate(batch_iter):
        if prepare is not None:
            batch = prepare(batch)
        try:
            loss, hits = train_step(p, cfg, opt, batch, clip)
        except TrainingDiverged as err:
            raise TrainingDiverged("training diverged",
                                   {**(context or {}), "batch": j, **err.context}) from None
        total_loss += loss * batch.size
        correct += hits
        seen += batch.size
    return EpochStats(total_loss / max(seen, 1), correct / max(seen, 1), seen,
                      time.perf_counter() - start)


def fit_epoch(p, cfg, opt, ds: Dataset, n_b: int, rng: Rng, task: int = 0,
              prepare=None, clip=None, context=None) -> EpochStats:
    return train_epoch(p, cfg, opt, batches(ds, n_b, rng, shuffle=True, task=task, n_T=cfg.n_T),
                       prepare, clip, context)


def evaluate(p: ModelParams, cfg: ModelConfig, ds: Dataset | tuple, chunk: int = 2000) -> float:
    """Accuracy over a dataset (or an ``(images, labels)`` pair)."""
    images, labels = (ds.images, ds.labels) if isinstance(ds, Dataset) else ds
    correct = 0
    for start in range(0, len(labels), chunk):
        x = np.ascontiguousarray(to_sequences(images[start:start + chunk], cfg.n_T))
        logits = predict_logits(p, cfg, x)
        correct += int((_predicted(logits, cfg) == labels[start:start + chunk]).sum())
    return correct / max(len(labels), 1)


def timed_evaluate(p, cfg, ds, chunk: int = 2000) -> tuple[float, float]:
    start = time.perf_counter()
    acc = evaluate(p, cfg, ds, chunk)
    return acc, time.perf_counter() - start
