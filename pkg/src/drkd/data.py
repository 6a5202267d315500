"""Dataset loaders (IDX, CIFAR-10 binary, synthetic) and deterministic batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_CLASSES = 10


class DataFormatError(ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the problem."""

    def __init__(self, path, message: str, offset: int | None = None):
        self.path = str(path)
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {message}")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    # Per-channel mean/std already applied to ``inputs``; empty when unnormalised.
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, index) -> "Dataset":
        return replace(self, inputs=self.inputs[index], labels=self.labels[index])


# -- IDX ----------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise DataFormatError(path, "file too short for IDX magic", 0)
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise DataFormatError(path, f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < header:
        raise DataFormatError(path, "truncated IDX header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) < need:
        raise DataFormatError(path, f"truncated data: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise DataFormatError(path, f"{len(buf) - need} unexpected trailing bytes", need)
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count: int = 10, split: str = "train") -> Dataset:
    """MNIST-family IDX pair; pixels become ``byte / 255`` with shape (n, 1, rows, cols)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(images_path, f"image count {images.shape[0]} does not match "
                                           f"label count {labels.shape[0]} in {labels_path}")
    bad = np.flatnonzero(labels >= class_count)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(labels_path, f"label {labels[i]} at index {i} is not below {class_count}", 8 + i)
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(inputs, labels.astype(np.int64), class_count, split)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# -- CIFAR-10 -----------------------------------------------------------------

def load_cifar10_bin(paths, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes (R, G, B planes) per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    inputs, labels = [], []
    for path in paths:
        buf = Path(path).read_bytes()
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise DataFormatError(path, f"length {len(buf)} is not a positive multiple of "
                                        f"the {CIFAR_RECORD}-byte record size",
                                  len(buf) - len(buf) % CIFAR_RECORD)
        recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(recs[:, 0] >= CIFAR_CLASSES)
        if bad.size:
            i = int(bad[0])
            raise DataFormatError(path, f"record {i} has label {recs[i, 0]}, expected < {CIFAR_CLASSES}",
                                  i * CIFAR_RECORD)
        labels.append(recs[:, 0].astype(np.int64))
        inputs.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(inputs), np.concatenate(labels), CIFAR_CLASSES, split)


def write_cifar10_bin(images, labels, path) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3072)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


# -- synthetic ----------------------------------------------------------------

def synth_blobs(seed: int, classes: int, dim: int, n_per_class: int, spread: float,
                split: str = "train") -> Dataset:
    """Gaussian clusters around seed-determined class means.

    Means depend only on ``seed``; the samples also depend on ``split`` so the
    train and test sets share clusters but not points.
    """
    if classes < 2 or dim < 2 or n_per_class < 1 or not spread > 0:
        raise ValueError("synth_blobs needs classes >= 2, dim >= 2, n_per_class >= 1, spread > 0")
    means = np.random.default_rng([seed, 0]).standard_normal((classes, dim))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(classes), n_per_class)
    inputs = means[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset(inputs, labels, classes, split)


def synth_glyphs(seed: int, n: int, classes: int = 10, size: int = 28, noise: float = 0.9,
                 max_shift: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Noisy, shifted copies of random blocky class templates as uint8 images.

    Produces an MNIST-shaped corpus (``n`` images of ``size``x``size``) for
    exercising the IDX path without network access.
    """
    rng = np.random.default_rng([seed, 7])
    coarse = rng.random((classes, size // 4, size // 4)) < 0.35
    templates = np.kron(coarse, np.ones((4, 4))).astype(np.float64)
    labels = rng.integers(0, classes, size=n)
    images = np.empty((n, size, size))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        images[i] = np.roll(templates[labels[i]], tuple(shifts[i]), axis=(0, 1))
    images += noise * rng.standard_normal(images.shape)
    return (np.clip(images, 0.0, 1.0) * 255).round().astype(np.uint8), labels.astype(np.uint8)


# -- preprocessing and batching ----------------------------------------------

def channel_stats(ds: Dataset) -> dict:
    """Per-channel mean and std (features count as channels for flat inputs)."""
    x = ds.inputs
    axes = (0,) if x.ndim == 2 else (0,) + tuple(range(2, x.ndim))
    std = x.std(axis=axes)
    return {"mean": x.mean(axis=axes).tolist(), "std": np.where(std > 0, std, 1.0).tolist()}


def standardize(ds: Dataset, stats: dict) -> Dataset:
    """Apply recorded per-channel statistics; the record travels with the dataset."""
    mean = np.asarray(stats["mean"])
    std = np.asarray(stats["std"])
    shape = (1, -1) + (1,) * (ds.inputs.ndim - 2)
    x = (ds.inputs - mean.reshape(shape)) / std.reshape(shape)
    return replace(ds, inputs=x, normalization={"mean": list(stats["mean"]), "std": list(stats["std"])})


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 64
    seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, plan: BatchPlan, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Minibatches for one epoch; the order depends only on (plan.seed, epoch)."""
    n = len(ds)
    if plan.drop_last and plan.batch_size > n:
        raise ValueError(f"batch_size {plan.batch_size} exceeds dataset size {n} with drop_last")
    order = epoch_order(n, plan.seed, epoch)
    stop = n - n % plan.batch_size if plan.drop_last else n
    for start in range(0, stop, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield ds.inputs[idx], ds.labels[idx]
