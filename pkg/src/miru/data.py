"""MNIST ingestion, permuted-pixel tasks and row-sequence mini-batches.

An image becomes a sequence by reading its 28 rows top to bottom: row
``r`` is the feature vector at step ``r``. Task permutations act on the
flat 784-pixel image before it is cut into rows.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import ContractError, Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_PIXELS = 784
SIDE = 28

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
DATA_ENV = "MIRU_DATA"


class IdxError(ValueError):
    """Base class for IDX load failures."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray       # (n, 784) float32 in [0, 1]
    labels: np.ndarray       # (n,) int64 in [0, 10)
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ContractError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split)

    def as_sequences(self, n_T: int = SIDE) -> np.ndarray:
        """All images in sequence layout ``(n_T, n_x, n)``."""
        return to_sequences(self.images, n_T)


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims, dtype=np.int64))
    have = len(raw) - head
    if have < need:
        raise TruncatedFileError(f"{path}: {have} data bytes, header promises {need}")
    if have > need:
        raise CountMismatchError(f"{path}: {have - need} bytes beyond the declared data")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label file pair (optionally gzip-compressed)."""
    images = _parse_idx(_read(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read(labels_path), LABEL_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise IdxError(f"{labels_path}: label {labels.max()} outside [0, 10)")
    n, rows, cols = images.shape
    flat = images.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0)
    return Dataset(flat, labels.astype(np.int64), split)


def _locate(data_dir, name: str) -> Path:
    base = Path(data_dir)
    for candidate in (base / name, base / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"MNIST file {name}[.gz] not found in {base}")


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get(DATA_ENV)
    if data_dir is None:
        raise FileNotFoundError(
            f"no MNIST directory given; pass a path or set ${DATA_ENV}")
    return Path(data_dir)


def load_npz(path) -> tuple[Dataset, Dataset]:
    """Pre-built sequence data: arrays ``train_x``/``test_x`` of shape
    ``(n, n_T, n_x)`` (or already flat) and integer ``train_y``/``test_y``."""
    with np.load(path) as z:
        out = []
        for split in ("train", "test"):
            x = np.asarray(z[f"{split}_x"], dtype=np.float32)
            out.append(Dataset(x.reshape(len(x), -1), np.asarray(z[f"{split}_y"], np.int64), split))
    return out[0], out[1]


def load_mnist(data_dir=None) -> tuple[Dataset, Dataset]:
    base = resolve_data_dir(data_dir)
    train = load_idx(*(_locate(base, f) for f in TRAIN_FILES), split="train")
    test = load_idx(*(_locate(base, f) for f in TEST_FILES), split="test")
    return train, test


@dataclass(frozen=True)
class TaskSpec:
    index: int                          # 1-based task number
    seed: int
    permutation: np.ndarray = field(repr=False)

    def inverse(self) -> "TaskSpec":
        return TaskSpec(self.index, self.seed, np.argsort(self.permutation))


def make_tasks(T: int, seed: int, n_pixels: int = N_PIXELS) -> list[TaskSpec]:
    """``T`` permuted tasks; task ``t``'s permutation depends only on ``(seed, t)``."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    identity = np.arange(n_pixels)
    specs = []
    for t in range(1, T + 1):
        rng = Rng.from_key(seed, t)
        perm = rng.permutation(n_pixels)
        while np.array_equal(perm, identity):
            perm = rng.permutation(n_pixels)
        specs.append(TaskSpec(t, seed, perm))
    return specs


def apply_task(ds: Dataset, spec: TaskSpec) -> Dataset:
    """Output pixel ``i`` is input pixel ``permutation[i]``; labels unchanged."""
    if ds.images.shape[1] != len(spec.permutation):
        raise ContractError(
            f"images have {ds.images.shape[1]} pixels, permutation has "
            f"{len(spec.permutation)}")
    return Dataset(ds.images[:, spec.permutation], ds.labels, ds.split)


def to_sequences(images: np.ndarray, n_T: int = SIDE) -> np.ndarray:
    """``(n, n_T*n_x)`` flat images -> ``(n_T, n_x, n)`` sequences."""
    n = images.shape[0]
    return images.reshape(n, n_T, -1).transpose(1, 2, 0)


@dataclass
class SequenceBatch:
    x: np.ndarray            # (n_T, n_x, n_b)
    labels: np.ndarray       # (n_b,)
    task: np.ndarray         # (n_b,) task index per column
    replay: np.ndarray       # (n_b,) bool, True for columns drawn from a buffer

    @property
    def size(self) -> int:
        return len(self.labels)

    @classmethod
    def from_images(cls, images, labels, task: int = 0, n_T: int = SIDE) -> "SequenceBatch":
        n = len(labels)
        return cls(np.ascontiguousarray(to_sequences(images, n_T)), np.asarray(labels),
                   np.full(n, task, dtype=np.int64), np.zeros(n, dtype=bool))

    def extend(self, x_cols: np.ndarray, labels, task, replay=True) -> "SequenceBatch":
        """Append columns; ``x_cols`` has shape ``(n_T, n_x, m)``."""
        m = len(labels)
        return SequenceBatch(
            np.concatenate([self.x, x_cols], axis=2),
            np.concatenate([self.labels, np.asarray(labels)]),
            np.concatenate([self.task, np.broadcast_to(task, m).astype(np.int64)]),
            np.concatenate([self.replay, np.full(m, replay, dtype=bool)]),
        )


def batches(ds: Dataset, n_b: int, rng: Rng | None = None, shuffle: bool = True,
            task: int = 0, n_T: int = SIDE) -> Iterator[SequenceBatch]:
    """Mini-batches covering every example once; the final short batch is kept."""
    if n_b < 1:
        raise ContractError(f"batch size must be >= 1, got {n_b}")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ContractError("shuffling needs an Rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, n_b):
        idx = order[start:start + n_b]
        yield SequenceBatch.from_images(ds.images[idx], ds.labels[idx], task, n_T)


def n_batches(n: int, n_b: int) -> int:
    return -(-n // n_b)
