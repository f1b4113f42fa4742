"""MNIST IDX ingestion, train/validation splits and mini-batch streams."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import FLOAT, Prng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
N_CLASSES = 10
DATA_ENV = "QBP_DATA_DIR"

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

# PRNG stream tags for data ordering
SPLIT_STREAM = 2
EPOCH_STREAM = 3


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_header(data: bytes, magic: int, ndim: int) -> tuple[int, ...]:
    if len(data) < 4:
        raise IdxError("truncated header", len(data))
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise IdxError(f"unexpected magic 0x{found:08x}, wanted 0x{magic:08x}", 0)
    need = 4 + 4 * ndim
    if len(data) < need:
        raise IdxError("truncated dimension sizes", len(data))
    return struct.unpack_from(f">{ndim}I", data, 4)


def _payload(data: bytes, dims: tuple[int, ...]) -> np.ndarray:
    start = 4 + 4 * len(dims)
    size = int(np.prod(dims))
    if len(data) - start < size:
        raise IdxError(f"truncated payload: {len(data) - start} of {size} bytes", len(data))
    if len(data) - start > size:
        raise IdxError(f"{len(data) - start - size} trailing bytes after payload", start + size)
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=start)


def load_idx_images(data: bytes) -> np.ndarray:
    """Parse an IDX image file into an n x (rows*cols) float32 matrix in [0, 1]."""
    n, rows, cols = _read_header(data, IMAGES_MAGIC, 3)
    raw = _payload(data, (n, rows, cols)).reshape(n, rows * cols)
    return raw.astype(FLOAT) / FLOAT(255)


def load_idx_labels(data: bytes) -> np.ndarray:
    (n,) = _read_header(data, LABELS_MAGIC, 1)
    labels = _payload(data, (n,)).copy()
    if labels.size and labels.max() >= N_CLASSES:
        bad = int(np.argmax(labels >= N_CLASSES))
        raise IdxError(f"label {labels[bad]} out of range", 8 + bad)
    return labels


def dump_idx_images(images: np.ndarray, rows: int = 28, cols: int = 28) -> bytes:
    images = np.asarray(images)
    if images.ndim != 2 or images.shape[1] != rows * cols:
        raise ValueError(f"images must be n x {rows * cols}")
    raw = np.rint(images.astype(np.float64) * 255).astype(np.uint8)
    return struct.pack(">IIII", IMAGES_MAGIC, images.shape[0], rows, cols) + raw.tobytes()


def dump_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # n x features, float32 in [0, 1]
    labels: np.ndarray  # n, uint8

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class SplitSpec:
    train_count: int = 40000
    valid_count: int = 10000
    shuffle_seed: int = 0


class DataError(ValueError):
    pass


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``train_count`` and next ``valid_count``."""
    need = spec.train_count + spec.valid_count
    if len(dataset) < need:
        raise DataError(f"split needs {need} examples, dataset has {len(dataset)}")
    perm = Prng(spec.shuffle_seed, (SPLIT_STREAM,)).permutation(len(dataset))
    return dataset.subset(perm[: spec.train_count]), dataset.subset(perm[spec.train_count : need])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return Prng(seed, (EPOCH_STREAM, epoch)).permutation(n)


def minibatches(
    dataset: Dataset, batch_size: int = 200, seed: int = 0, epoch: int = 0
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (features x B input matrix, labels) pairs in a seeded order.

    A final short batch is dropped.
    """
    if batch_size < 2:
        raise ValueError("batch size must be at least 2")
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(dataset) - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        yield np.ascontiguousarray(dataset.images[idx].T), dataset.labels[idx]


def eval_batches(dataset: Dataset, batch_size: int = 1000) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        yield np.ascontiguousarray(dataset.images[sl].T), dataset.labels[sl]


def _read(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            opener = gzip.open if candidate.suffix == ".gz" else open
            with opener(candidate, "rb") as f:
                return f.read()
    raise FileNotFoundError(f"missing MNIST file {path}[.gz]")


def load_pair(directory, names) -> Dataset:
    d = Path(directory)
    images = load_idx_images(_read(d / names[0]))
    labels = load_idx_labels(_read(d / names[1]))
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels in {d}")
    return Dataset(images, labels)


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Load the standard training and test files (raw or gzip) from ``directory``."""
    return load_pair(directory, TRAIN_FILES), load_pair(directory, TEST_FILES)


def fixture_dir() -> Path:
    """Bundled 1000-example training / 500-example test subset in IDX format."""
    return Path(__file__).parent / "fixtures" / "mnist1k"


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data/mnist"))
