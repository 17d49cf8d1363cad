"""Domain-incremental learning on permuted MNIST.

Rehearsal works in two halves. While a task trains, ``k`` fresh samples of
every mini-batch are offered to that task's reservoir. From the second
task on, ``k`` stored samples pooled over all *earlier* tasks are appended
to every mini-batch. Each task's reservoir is frozen once its task ends.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cells import CellKind, CoeffSpec
from .data import Dataset, SequenceBatch, apply_task, make_tasks, n_batches
from .network import ModelConfig, ModelParams, forward_sequence, init_model
from .numerics import ContractError, Rng
from .optim import make_optimizer
from .train import evaluate, fit_epoch


class _TaskStore:
    def __init__(self, capacity: int, n_T: int, n_x: int, dtype):
        self.x = np.empty((capacity, n_T, n_x), dtype=dtype)
        self.labels = np.empty(capacity, dtype=np.int64)
        self.count = 0
        self.n_seen = 0


class ReplayBuffer:
    """Per-task reservoirs of labelled sequences, ``capacity`` slots each."""

    def __init__(self, capacity: int, n_T: int = 28, n_x: int = 28, rng: Rng | None = None,
                 dtype=np.float32):
        if capacity < 0:
            raise ContractError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.n_T, self.n_x = n_T, n_x
        self.rng = rng or Rng(0)
        self.dtype = dtype
        self.stores: dict[int, _TaskStore] = {}
        self._u = np.empty(0)
        self._u_pos = 0

    def _uniform(self) -> float:
        # uniforms are drawn in blocks; one scalar draw per offer is the hot path
        if self._u_pos == len(self._u):
            self._u = self.rng.uniform(0.0, 1.0, 4096)
            self._u_pos = 0
        self._u_pos += 1
        return self._u[self._u_pos - 1]

    def __len__(self):
        return sum(s.count for s in self.stores.values())

    def occupancy(self, task: int) -> int:
        store = self.stores.get(task)
        return 0 if store is None else store.count

    def seen(self, task: int) -> int:
        store = self.stores.get(task)
        return 0 if store is None else store.n_seen

    def offer(self, task: int, x: np.ndarray, label: int) -> None:
        """Reservoir rule for one candidate ``x`` of shape ``(n_T, n_x)``."""
        store = self.stores.get(task)
        if store is None:
            store = self.stores[task] = _TaskStore(self.capacity, self.n_T, self.n_x,
                                                   self.dtype)
        store.n_seen += 1
        if store.count < self.capacity:
            slot = store.count
            store.count += 1
        else:
            slot = int(self._uniform() * store.n_seen)
            if slot >= self.capacity:
                return
        store.x[slot] = x
        store.labels[slot] = label

    def items(self, task: int) -> tuple[np.ndarray, np.ndarray]:
        store = self.stores[task]
        return store.x[:store.count], store.labels[:store.count]

    def sample(self, k: int, rng: Rng, tasks: Sequence[int] | None = None):
        """Up to ``k`` distinct items drawn uniformly from the pooled stores.

        Returns ``(x, labels, task_ids)`` with ``x`` in ``(n_T, n_x, m)`` layout.
        """
        tasks = sorted(self.stores) if tasks is None else [t for t in tasks if t in self.stores]
        counts = np.array([self.stores[t].count for t in tasks], dtype=np.int64)
        total = int(counts.sum())
        m = min(k, total)
        if m == 0:
            return (np.empty((self.n_T, self.n_x, 0), dtype=self.dtype),
                    np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        flat = rng.choice(total, m)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        owner = np.searchsorted(offsets, flat, side="right") - 1
        xs = np.empty((m, self.n_T, self.n_x), dtype=self.dtype)
        labels = np.empty(m, dtype=np.int64)
        task_ids = np.empty(m, dtype=np.int64)
        for j, (o, f) in enumerate(zip(owner, flat)):
            store = self.stores[tasks[o]]
            slot = f - offsets[o]
            xs[j] = store.x[slot]
            labels[j] = store.labels[slot]
            task_ids[j] = tasks[o]
        return xs.transpose(1, 2, 0), labels, task_ids


def reservoir_update(buf: ReplayBuffer, batch: SequenceBatch, k: int) -> ReplayBuffer:
    """Offer ``k`` fresh columns, chosen uniformly without replacement, to
    the reservoirs of their own tasks. Replayed columns are never offered."""
    fresh = np.flatnonzero(~batch.replay)
    if k > len(fresh):
        raise ContractError(f"k={k} exceeds the {len(fresh)} fresh columns of the batch")
    if k == 0:
        return buf
    for pos in fresh[buf.rng.choice(len(fresh), k)]:
        buf.offer(int(batch.task[pos]), batch.x[:, :, pos], int(batch.labels[pos]))
    return buf


def interleave(buf: ReplayBuffer, batch: SequenceBatch, k: int, rng: Rng,
               tasks: Sequence[int] | None = None) -> SequenceBatch:
    """Append up to ``k`` stored samples (pooled over ``tasks``, default all)."""
    if k <= 0 or len(buf) == 0:
        return batch
    x, labels, task_ids = buf.sample(k, rng, tasks)
    if len(labels) == 0:
        return batch
    return batch.extend(x.astype(batch.x.dtype, copy=False), labels, task_ids, replay=True)


class AccuracyMatrix:
    """``R[j, i]``: accuracy on task ``i`` after training through task ``j``
    (both 0-based here). Cells above the diagonal stay NaN."""

    def __init__(self, T: int):
        self.R = np.full((T, T), np.nan)

    @property
    def T(self) -> int:
        return self.R.shape[0]

    def record(self, after: int, task: int, acc: float) -> None:
        if not 0.0 <= acc <= 1.0:
            raise ContractError(f"accuracy {acc} outside [0, 1]")
        self.R[after, task] = acc

    def last_row(self) -> np.ndarray:
        return self.R[-1]

    def to_rows(self) -> list[list[float]]:
        return self.R.tolist()


def mean_accuracy(R) -> float:
    """Mean of the final row: accuracy on every task after the last one."""
    R = R.R if isinstance(R, AccuracyMatrix) else np.asarray(R, dtype=float)
    last = R[-1]
    if np.isnan(last).any():
        raise ContractError("final row of the accuracy matrix is incomplete")
    return float(last.mean())


@dataclass
class DilConfig:
    T: int = 5
    epochs: int = 10
    k_store: int = 0
    k_interleave: int | None = None      # defaults to k_store
    capacity: int | None = None          # per task; defaults to k_store * batches/epoch
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        28, 256, 10, 28, CellKind.MIRU2))
    coeff: CoeffSpec = field(default_factory=lambda: CoeffSpec(random=True))
    optimizer: str = "adam"
    lr: float = 1e-3
    opt_params: dict = field(default_factory=dict)
    n_b: int = 32
    seeds: Sequence[int] = (0,)
    train_fraction: float = 1.0
    clip: float | None = None

    def __post_init__(self):
        if self.k_interleave is None:
            self.k_interleave = self.k_store
        if self.T < 1 or self.epochs < 0 or self.k_store < 0 or self.k_interleave < 0:
            raise ContractError(f"invalid DIL config: {self}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ContractError(f"train_fraction must lie in (0, 1]: {self.train_fraction}")
        if self.k_store > self.n_b:
            raise ContractError(f"k_store={self.k_store} exceeds the batch size {self.n_b}")

    def resolved_capacity(self, n_train: int) -> int:
        if self.capacity is not None:
            return self.capacity
        return self.k_store * n_batches(n_train, self.n_b)


@dataclass
class DilRun:
    seed: int
    matrix: AccuracyMatrix
    log: list[dict]
    params: ModelParams

    @property
    def mean_accuracy(self) -> float:
        return mean_accuracy(self.matrix)


def _replay_hook(cfg: DilConfig, buf: ReplayBuffer, rng: Rng, past: list[int]):
    """Batch rewrite for one task: append stored samples of earlier tasks,
    then offer fresh columns to the current task's reservoir."""
    if cfg.k_store == 0 and (cfg.k_interleave == 0 or not past):
        return None

    def prepare(batch):
        out = interleave(buf, batch, cfg.k_interleave, rng, past) if past else batch
        reservoir_update(buf, batch, cfg.k_store)
        return out
    return prepare


def run_dil_seed(cfg: DilConfig, train: Dataset, test: Dataset, seed: int,
                 on_record: Callable[[dict], None] | None = None,
                 after_task: Callable[[int, ModelParams], None] | None = None) -> DilRun:
    """One full pass over ``cfg.T`` tasks for one seed."""
    init_rng, shuffle_rng, buf_rng, mix_rng, sub_rng = Rng(seed).spawn(5)
    model = cfg.model
    if cfg.train_fraction < 1.0:
        n_sub = max(1, int(round(cfg.train_fraction * len(train))))
        train = train.subset(np.sort(sub_rng.choice(len(train), n_sub)))
    tasks = make_tasks(cfg.T, seed)
    p = init_model(model, cfg.coeff, init_rng)
    opt = make_optimizer(cfg.optimizer, **{**cfg.opt_params, "lr": cfg.lr})
    capacity = cfg.resolved_capacity(len(train))
    buf = ReplayBuffer(capacity, model.n_T, model.n_x, buf_rng)
    R = AccuracyMatrix(cfg.T)
    log = []
    test_sets = [apply_task(test, spec) for spec in tasks]

    for spec in tasks:
        t = spec.index
        task_train = apply_task(train, spec)
        prepare = _replay_hook(cfg, buf, mix_rng, list(range(1, t)))
        for epoch in range(1, cfg.epochs + 1):
            ctx = {"seed": seed, "task": t, "epoch": epoch}
            stats = fit_epoch(p, model, opt, task_train, cfg.n_b, shuffle_rng, task=t,
                              prepare=prepare, clip=cfg.clip, context=ctx)
            rec = {**ctx, "loss": stats.loss, "train_acc": stats.accuracy,
                   "examples": stats.examples, "buffer": len(buf)}
            log.append(rec)
            if on_record:
                on_record(rec)
        for i in range(t):
            R.record(t - 1, i, evaluate(p, model, test_sets[i]))
        rec = {"seed": seed, "task": t, "epoch": cfg.epochs, "eval": R.R[t - 1, :t].tolist()}
        log.append(rec)
        if on_record:
            on_record(rec)
        if after_task:
            after_task(t, p)
    return DilRun(seed, R, log, p)


def run_dil(cfg: DilConfig, train: Dataset, test: Dataset,
            on_record: Callable[[dict], None] | None = None) -> list[DilRun]:
    return [run_dil_seed(cfg, train, test, s, on_record) for s in cfg.seeds]


def _nan_to_none(a: np.ndarray) -> list:
    return [[None if math.isnan(v) else float(v) for v in row] for row in a]


def summarize(runs: Sequence[DilRun]) -> dict:
    """Mean and (population) std over seeds of each final-row cell and of MA."""
    last = np.array([r.matrix.last_row() for r in runs])
    ma = np.array([r.mean_accuracy for r in runs])
    stack = np.array([r.matrix.R for r in runs])
    return {
        "seeds": [r.seed for r in runs],
        "final_mean": last.mean(axis=0).tolist(),
        "final_std": last.std(axis=0).tolist(),
        "ma_mean": float(ma.mean()),
        "ma_std": float(ma.std()),
        "ma_per_seed": ma.tolist(),
        "matrix_mean": _nan_to_none(stack.mean(axis=0)) if len(runs) else [],
        "matrix_std": _nan_to_none(stack.std(axis=0)) if len(runs) else [],
    }


def write_matrix_csv(path, runs: Sequence[DilRun]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "after_task", "task", "accuracy"])
        for run in runs:
            T = run.matrix.T
            for j in range(T):
                for i in range(j + 1):
                    w.writerow([run.seed, j + 1, i + 1, f"{run.matrix.R[j, i]:.6f}"])


def write_jsonl(path, records) -> None:
    with open(path, "a") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# -- gate statistics -------------------------------------------------------

@dataclass
class GateHistogram:
    counts: np.ndarray
    edges: np.ndarray
    extreme_fraction: float     # share of values in [0, 0.05] or [0.95, 1]
    mode: str

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def write_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([*extra, "bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([*extra.values(), f"{lo:.4f}", f"{hi:.4f}", int(c)])


def extreme_fraction(values: np.ndarray, margin: float = 0.05) -> float:
    v = np.asarray(values)
    return float(((v <= margin) | (v >= 1.0 - margin)).mean()) if v.size else math.nan


def gate_histogram(p: ModelParams, cfg: ModelConfig, sequences, mode: str = "z",
                   bins: int = 50, chunk: int = 1000) -> GateHistogram:
    """Pool update-gate activations (``mode="z"``, GRU only) or the MiRU
    update coefficients (``mode="lambda"``) over units, steps and samples.

    ``sequences`` is an ``(n_T, n_x, n)`` array or an iterable of batches.
    """
    if mode == "z" and cfg.kind is not CellKind.GRU:
        raise ContractError(f"update-gate histogram needs a GRU, got {cfg.kind.value}")
    if mode == "lambda" and p.cell.lam is None:
        raise ContractError(f"{cfg.kind.value} has no update coefficient")
    if mode not in ("z", "lambda"):
        raise ContractError(f"unknown histogram mode {mode!r}")
    if isinstance(sequences, np.ndarray):
        chunks = (sequences[:, :, i:i + chunk] for i in range(0, sequences.shape[2], chunk))
    else:
        chunks = (getattr(b, "x", b) for b in sequences)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    n_extreme = n_total = 0
    for x in chunks:
        if mode == "z":
            rec = forward_sequence(p, cfg, x)
            values = np.concatenate([tr.z.ravel() for tr in rec.traces])
        else:
            values = np.tile(p.cell.lam, cfg.n_T * x.shape[2])
        counts += np.histogram(values, bins=edges)[0]
        n_extreme += int(((values <= 0.05) | (values >= 0.95)).sum())
        n_total += values.size
    frac = n_extreme / n_total if n_total else math.nan
    return GateHistogram(counts, edges, frac, mode)
