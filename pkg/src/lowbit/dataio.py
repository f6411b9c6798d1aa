"""MNIST (IDX) and CIFAR-10 (binary batch) loading and binary task construction.

Pixels are scaled by 1/255 into [0, 1] with no centering: the layerwise
objectives are only supermodular when every input is non-negative.
"""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_SHAPE = (3, 32, 32)
MNIST_SHAPE = (1, 28, 28)

DATA_DIR_ENV = "LBW_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DataFormatError(ValueError):
    pass


class IdxMagicError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CifarFormatError(DataFormatError):
    pass


class TaskConstructionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    image_shape: tuple = ()

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryTask:
    features: np.ndarray
    y: np.ndarray
    image_shape: tuple = ()

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.y.shape[0]:
            raise TaskConstructionError("features and labels disagree on n")
        if not np.all(np.abs(self.y) == 1):
            raise TaskConstructionError("labels must be +-1")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def images(self) -> np.ndarray:
        """Features reshaped to (n, C, H, W); needs ``image_shape``."""
        return self.features.reshape((self.n,) + tuple(self.image_shape))


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_header(buf: bytes, expected_magic: int, ndim: int, path) -> tuple:
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: file too short for IDX header")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    return tuple(int.from_bytes(buf[4 + 4 * k: 8 + 4 * k], "big") for k in range(ndim))


def read_idx_images(path) -> np.ndarray:
    buf = _read(path)
    n, rows, cols = _idx_header(buf, IDX_IMAGES_MAGIC, 3, path)
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16)
    if pixels.size != n * rows * cols:
        raise DataFormatError(f"{path}: expected {n * rows * cols} pixels, found {pixels.size}")
    return pixels.reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read(path)
    (n,) = _idx_header(buf, IDX_LABELS_MAGIC, 1, path)
    labels = np.frombuffer(buf, dtype=np.uint8, offset=8)
    if labels.size != n:
        raise DataFormatError(f"{path}: expected {n} labels, found {labels.size}")
    return labels


def load_mnist(image_path, label_path) -> Dataset:
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = images.shape
    features = images.reshape(n, rows * cols) / 255.0
    return Dataset(features, labels.astype(np.int64), (1, rows, cols))


def load_cifar10(batch_paths) -> Dataset:
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    feats, labels = [], []
    for path in batch_paths:
        buf = _read(path)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise CifarFormatError(
                f"{path}: size {len(buf)} is not a positive multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:] / 255.0)
    if not feats:
        raise CifarFormatError("no batch files given")
    labels = np.concatenate(labels)
    if labels.max() > 9:
        raise CifarFormatError(f"label {labels.max()} outside 0..9")
    return Dataset(np.concatenate(feats), labels, CIFAR_SHAPE)


def data_root(root=None) -> Path:
    if root is None:
        root = os.environ.get(DATA_DIR_ENV)
    if root is None:
        raise FileNotFoundError(
            f"no dataset root given; pass a path or set {DATA_DIR_ENV}")
    return Path(root)


def _locate(root: Path, names, subdirs) -> list:
    found = []
    for name in names:
        for sub in subdirs:
            for cand in (root / sub / name, root / sub / (name + ".gz")):
                if cand.exists():
                    found.append(cand)
                    break
            else:
                continue
            break
        else:
            raise FileNotFoundError(
                f"{name} not found under {root} (looked in {', '.join(map(str, subdirs))}); "
                f"download the dataset and point {DATA_DIR_ENV} or --data at it")
    return found


def mnist_paths(split: str = "train", root=None) -> tuple:
    root = data_root(root)
    return tuple(_locate(root, MNIST_FILES[split], (".", "mnist", "MNIST/raw")))


def cifar_paths(split: str = "train", root=None) -> list:
    root = data_root(root)
    return _locate(root, CIFAR_FILES[split], (".", "cifar-10-batches-bin", "cifar10"))


def load_mnist_split(split: str = "train", root=None) -> Dataset:
    return load_mnist(*mnist_paths(split, root))


def load_cifar10_split(split: str = "train", root=None) -> Dataset:
    return load_cifar10(cifar_paths(split, root))


def make_binary_task(ds: Dataset, positive, negative) -> BinaryTask:
    positive, negative = set(positive), set(negative)
    if positive & negative:
        raise TaskConstructionError(f"classes {sorted(positive & negative)} on both sides")
    is_pos = np.isin(ds.labels, sorted(positive))
    is_neg = np.isin(ds.labels, sorted(negative))
    if not is_pos.any() or not is_neg.any():
        raise TaskConstructionError("one side of the task matches no samples")
    keep = is_pos | is_neg
    y = np.where(is_pos[keep], 1.0, -1.0)
    return BinaryTask(ds.features[keep], y, ds.image_shape)


def subsample(task: BinaryTask, fraction: float, seed: int = 0) -> BinaryTask:
    """Stratified subset keeping each class's share (rounded per class)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return task
    rng = np.random.default_rng(seed)
    keep = []
    for label in (1.0, -1.0):
        idx = np.flatnonzero(task.y == label)
        k = max(1, int(round(fraction * idx.size)))
        keep.append(rng.choice(idx, size=k, replace=False))
    keep = np.sort(np.concatenate(keep))
    return BinaryTask(task.features[keep], task.y[keep], task.image_shape)
