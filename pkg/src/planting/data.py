"""Dataset ingestion: CIFAR-10/100 and STL-10 binaries, splits, batching.

Images are scaled to [0, 1] and then standardized per channel with the
training split's statistics; the same mean/std are applied verbatim to the
validation and test splits.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "LabeledDataset",
    "SplitSpec",
    "batches",
    "decode_cifar_records",
    "decode_stl_images",
    "encode_cifar_records",
    "encode_stl_images",
    "load_cifar10",
    "load_cifar100",
    "load_stl10",
    "make_synthetic",
    "split_holdout",
    "standardize",
]

CIFAR_PIXELS = 3 * 32 * 32
STL_SHAPE = (3, 96, 96)


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    val_count: int
    test_count: int
    split_seed: int = 0


def _channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(train: LabeledDataset, *others: LabeledDataset) -> list[LabeledDataset]:
    """Per-channel standardization with statistics taken from ``train`` only."""
    mean, std = _channel_stats(train.images)

    def apply(ds: LabeledDataset) -> LabeledDataset:
        images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
        return replace(ds, images=images, mean=mean, std=std)

    return [apply(train), *(apply(d) for d in others)]


def split_holdout(data: LabeledDataset, holdout: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded uniform permutation; the first ``holdout`` permuted indices form the second part."""
    if not 0 <= holdout <= len(data):
        raise DatasetError(f"cannot hold out {holdout} of {len(data)} samples")
    perm = np.random.default_rng(seed).permutation(len(data))
    held = np.sort(perm[:holdout])
    kept = np.sort(perm[holdout:])
    return data.subset(kept), data.subset(held)


def batches(n: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# CIFAR binary format: per record [label bytes..., 3072 pixel bytes R,G,B planes]
# ---------------------------------------------------------------------------

def decode_cifar_records(raw: bytes, label_bytes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(labels (N, label_bytes) uint8, pixels (N, 3, 32, 32) uint8)``."""
    record = label_bytes + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % record:
        raise DatasetError(f"{len(raw)} bytes is not a whole number of {record}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    return arr[:, :label_bytes].copy(), arr[:, label_bytes:].reshape(-1, 3, 32, 32).copy()


def encode_cifar_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim == 1:
        labels = labels[:, None]
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def _find(directory: Path, names: Sequence[str], subdirs: Sequence[str]) -> list[Path]:
    for base in [directory, *(directory / s for s in subdirs)]:
        paths = [base / n for n in names]
        if all(p.is_file() for p in paths):
            return paths
    raise DatasetError(f"could not find {', '.join(names)} under {directory}")


def _read_cifar(paths: Sequence[Path], label_bytes: int, label_index: int) -> tuple[np.ndarray, np.ndarray]:
    labels, pixels = [], []
    for p in paths:
        lab, pix = decode_cifar_records(p.read_bytes(), label_bytes)
        labels.append(lab[:, label_index])
        pixels.append(pix)
    return np.concatenate(labels), np.concatenate(pixels)


def _limit(n: int, limit: Optional[int]) -> int:
    return n if limit is None else min(n, limit)


def _finish(train_x, train_y, val_x, val_y, test_x, test_y, classes: int):
    def make(x, y):
        return LabeledDataset(x.astype(np.float64) / 255.0, y, classes)

    return tuple(standardize(make(train_x, train_y), make(val_x, val_y), make(test_x, test_y)))


def _load_cifar(directory, split: SplitSpec, train_names, test_names, subdirs, label_bytes, label_index,
                classes: int):
    directory = Path(directory)
    train_paths = _find(directory, train_names, subdirs)
    test_paths = _find(directory, test_names, subdirs)
    y, x = _read_cifar(train_paths, label_bytes, label_index)
    ty, tx = _read_cifar(test_paths, label_bytes, label_index)
    if split.train_count + split.val_count > len(y) or split.test_count > len(ty):
        raise DatasetError(f"split {split} does not fit {len(y)} train / {len(ty)} test records")
    perm = np.random.default_rng(split.split_seed).permutation(len(y))
    val_idx = np.sort(perm[:split.val_count])
    train_idx = np.sort(perm[split.val_count:split.val_count + split.train_count])
    test_idx = np.arange(split.test_count)
    if np.any(y >= classes) or np.any(ty >= classes):
        raise DatasetError(f"label byte outside [0, {classes})")
    return _finish(x[train_idx], y[train_idx], x[val_idx], y[val_idx], tx[test_idx], ty[test_idx], classes)


CIFAR10_SPLIT = SplitSpec(45_000, 5_000, 10_000)
CIFAR100_SPLIT = SplitSpec(45_000, 5_000, 10_000)
STL10_SPLIT = SplitSpec(5_000, 1_000, 7_000)


def load_cifar10(directory, split_seed: int = 0, split: Optional[SplitSpec] = None):
    """(train, val, test) from ``data_batch_1..5.bin`` + ``test_batch.bin``.

    Validation images are a seeded permutation draw from the 50,000 training
    records; the default split is 45,000 / 5,000 / 10,000.
    """
    split = replace(split or CIFAR10_SPLIT, split_seed=split_seed)
    return _load_cifar(directory, split, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"],
                       ["cifar-10-batches-bin"], 1, 0, 10)


def load_cifar100(directory, split_seed: int = 0, split: Optional[SplitSpec] = None):
    """Like :func:`load_cifar10`; records carry (coarse, fine) label bytes, fine is used."""
    split = replace(split or CIFAR100_SPLIT, split_seed=split_seed)
    return _load_cifar(directory, split, ["train.bin"], ["test.bin"], ["cifar-100-binary"], 2, 1, 100)


# ---------------------------------------------------------------------------
# STL-10: *_X.bin uint8 images, column-major inside each channel; *_y.bin labels 1..10
# ---------------------------------------------------------------------------

def decode_stl_images(raw: bytes) -> np.ndarray:
    size = int(np.prod(STL_SHAPE))
    if len(raw) == 0 or len(raw) % size:
        raise DatasetError(f"{len(raw)} bytes is not a whole number of STL-10 images")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3, 96, 96)
    return arr.transpose(0, 1, 3, 2).copy()


def encode_stl_images(images: np.ndarray) -> bytes:
    return np.ascontiguousarray(np.asarray(images, dtype=np.uint8).transpose(0, 1, 3, 2)).tobytes()


def load_stl10(directory, split_seed: int = 0, split: Optional[SplitSpec] = None):
    """(train, val, test): the 5,000 labeled training images, and the 8,000
    test images divided by seeded permutation into 1,000 val + 7,000 test."""
    split = replace(split or STL10_SPLIT, split_seed=split_seed)
    directory = Path(directory)
    tx_p, ty_p, sx_p, sy_p = _find(directory, ["train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin"],
                                   ["stl10_binary"])
    train_x = decode_stl_images(tx_p.read_bytes())
    train_y = np.frombuffer(ty_p.read_bytes(), dtype=np.uint8).astype(np.int64) - 1
    test_x = decode_stl_images(sx_p.read_bytes())
    test_y = np.frombuffer(sy_p.read_bytes(), dtype=np.uint8).astype(np.int64) - 1
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise DatasetError("STL-10 image and label counts differ")
    if split.train_count > len(train_y) or split.val_count + split.test_count > len(test_y):
        raise DatasetError(f"split {split} does not fit {len(train_y)} train / {len(test_y)} test images")
    perm = np.random.default_rng(split.split_seed).permutation(len(test_y))
    val_idx = np.sort(perm[:split.val_count])
    test_idx = np.sort(perm[split.val_count:split.val_count + split.test_count])
    train_idx = np.arange(split.train_count)
    return _finish(train_x[train_idx], train_y[train_idx], test_x[val_idx], test_y[val_idx],
                   test_x[test_idx], test_y[test_idx], 10)


def make_synthetic(classes: int, per_class: int, dims: tuple[int, int, int], seed: int,
                   separation: float = 10.0) -> LabeledDataset:
    """Gaussian blobs: class ``k`` is unit-variance noise shifted by ``k * separation``.

    Every pixel of every channel carries the shift, so the classes are
    linearly separable along the all-ones direction. Samples are interleaved
    by class. Not standardized.
    """
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.tile(np.arange(classes), per_class)
    noise = rng.standard_normal((n, *dims))
    images = noise + (labels * separation)[:, None, None, None]
    return LabeledDataset(images, labels, classes)
