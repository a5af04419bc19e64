"""MNIST IDX parsing, normalization and seeded batching."""

from __future__ import annotations

import enum
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import PrecisionMode

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATA_DIR_ENV = "SATGRAD_DATA_DIR"

# Refuse headers that would require absurd allocations.
MAX_ELEMENTS = 1 << 31


class IdxError(ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


class LabelRangeError(IdxError):
    pass


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    else:
        path = Path(source)
        with open(path, "rb") as fh:
            data = fh.read()
    # gzip is detected by its magic, so a renamed .gz still works
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise IdxTruncatedError(f"corrupt gzip stream: {exc}") from None
    return data


def _parse(data: bytes, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(data) >= 4:
        found = struct.unpack_from(">I", data)[0]
        if found != magic:
            raise IdxMagicError(f"magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(data) < header:
        raise IdxTruncatedError(f"header needs {header} bytes, file has {len(data)}")
    shape = struct.unpack_from(f">{ndim}I", data, 4)
    count = 1
    for d in shape:
        count *= d
        if count > MAX_ELEMENTS:
            raise IdxDimensionError(f"dimensions {shape} exceed {MAX_ELEMENTS} elements")
    body = len(data) - header
    if body < count:
        raise IdxTruncatedError(f"expected {count} data bytes, found {body}")
    if body > count:
        raise IdxDimensionError(f"{body - count} trailing bytes after {shape} payload")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(shape).copy()


def load_idx_images(source) -> np.ndarray:
    """Parse an IDX3 image file (path or raw bytes) into ``(n, rows, cols)`` uint8."""
    return _parse(_read_bytes(source), IMAGE_MAGIC, 3)


def load_idx_labels(source) -> np.ndarray:
    labels = _parse(_read_bytes(source), LABEL_MAGIC, 1)
    if labels.size and labels.max() >= N_CLASSES:
        bad = int(np.argmax(labels >= N_CLASSES))
        raise LabelRangeError(f"label {labels[bad]} at index {bad} is outside 0-9")
    return labels


def normalize(raw: np.ndarray, precision=PrecisionMode.BINARY64) -> np.ndarray:
    """Flatten ``(n, rows, cols)`` bytes row-major and map them to ``value / 255``."""
    raw = np.asarray(raw)
    if raw.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {raw.dtype}")
    dtype = PrecisionMode.parse(precision).dtype
    flat = raw.reshape(raw.shape[0], -1) if raw.ndim > 1 else raw.reshape(1, -1)
    return flat.astype(dtype) / dtype.type(255)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: Split = Split.TEST

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be (n, features), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise LabelRangeError("labels must lie in 0-9")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n].copy(), self.labels[:n].copy(), self.split)

    @classmethod
    def from_idx(cls, images_path, labels_path, split=Split.TEST,
                 precision=PrecisionMode.BINARY64) -> "Dataset":
        raw = load_idx_images(images_path)
        labels = load_idx_labels(labels_path)
        if raw.shape[0] != labels.shape[0]:
            raise ValueError(f"{images_path}: {raw.shape[0]} images vs {labels.shape[0]} labels")
        return cls(normalize(raw, precision), labels.astype(np.int64), Split(split))


def resolve_data_dir(data_dir=None) -> Path:
    path = data_dir or os.environ.get(DATA_DIR_ENV)
    if not path:
        raise FileNotFoundError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(path)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(data_dir=None, split="train", precision=PrecisionMode.BINARY64) -> Dataset:
    directory = resolve_data_dir(data_dir)
    images, labels = MNIST_FILES[Split(split).value]
    return Dataset.from_idx(_find(directory, images), _find(directory, labels), split, precision)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield ``(images, labels)`` in a permutation fixed by ``(seed, epoch)``.

    The final short batch is kept.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
