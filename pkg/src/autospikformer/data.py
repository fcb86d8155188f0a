"""Datasets: synthetic prototypes, MNIST IDX files, CIFAR-10 binary batches."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
MAX_SYNTHETIC_CLASSES = 60
MIN_SYNTHETIC_SIZE = 8

# per-channel (mean, std) applied after [0, 1] scaling
NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "synthetic": ((0.5,), (0.5,)),
}


class DataFormatError(ValueError):
    """Malformed or truncated dataset file."""


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    name: str = ""
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def normalize(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel affine normalization (monotone; order-preserving)."""
    if mean is None or std is None:
        mean, std = NORMALIZATION.get(ds.name.split("-")[0], ((0.0,), (1.0,)))
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return replace(ds, images=((ds.images - m) / s).astype(np.float32), mean=tuple(mean), std=tuple(std))


# -------------------------------------------------------------------- IDX


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _idx_header(buf: bytes, magic: int, ndims: int, path) -> tuple:
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndims, buf[4:need])
    body = int(np.prod(dims))
    if len(buf) - need < body:
        raise DataFormatError(f"{path}: truncated IDX body ({len(buf) - need} of {body} bytes)")
    if len(buf) - need > body:
        raise DataFormatError(f"{path}: {len(buf) - need - body} trailing bytes after IDX body")
    return dims, need


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label file pair (MNIST layout, uint8 pixels)."""
    ib = _read(images_path)
    (n, h, w), off = _idx_header(ib, IDX_IMAGES_MAGIC, 3, images_path)
    lb = _read(labels_path)
    (m,), loff = _idx_header(lb, IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise DataFormatError(f"{images_path} has {n} images but {labels_path} has {m} labels")
    pixels = np.frombuffer(ib, np.uint8, count=n * h * w, offset=off).reshape(n, 1, h, w)
    labels = np.frombuffer(lb, np.uint8, count=m, offset=loff).astype(np.int64)
    return Dataset(pixels.astype(np.float32) / 255.0, labels, num_classes, split, "mnist")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 ``images[N, H, W]`` / ``labels[N]`` as an IDX pair."""
    images = np.asarray(images, np.uint8)
    labels = np.asarray(labels, np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist(directory, split: str = "train") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    return load_idx(
        os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
        os.path.join(directory, f"{prefix}-labels-idx1-ubyte"),
        split,
    )


# ------------------------------------------------------------------ CIFAR


def parse_cifar_records(buf: bytes, path="<bytes>", num_classes: int = 10):
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    rec = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise DataFormatError(f"{path}: label {labels.max()} >= {num_classes}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_bin(directory, split: str = "train") -> Dataset:
    """Read the CIFAR-10 binary batches (label byte + R, G, B 32x32 planes)."""
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    imgs, labs = [], []
    for name in files:
        path = os.path.join(directory, name)
        i, l = parse_cifar_records(_read(path), path)
        imgs.append(i)
        labs.append(l)
    return Dataset(np.concatenate(imgs), np.concatenate(labs), 10, split, "cifar10")


# -------------------------------------------------------------- synthetic


def _prototype(k: int, size: int, channels: int) -> np.ndarray:
    """Deterministic geometric pattern for class ``k``."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    shape = k % 6
    phase = (k // 6) * 0.17
    if shape == 0:  # horizontal bars
        m = (np.floor((yy + phase) * 4) % 2 == 0)
    elif shape == 1:  # vertical bars
        m = (np.floor((xx + phase) * 4) % 2 == 0)
    elif shape == 2:  # cross
        m = (np.abs(yy - 0.5 - phase / 2) < 0.15) | (np.abs(xx - 0.5) < 0.15)
    elif shape == 3:  # centred blob
        m = (yy - 0.5 - phase / 2) ** 2 + (xx - 0.5) ** 2 < 0.09
    elif shape == 4:  # diagonal stripes
        m = (np.floor((xx + yy + phase) * 3) % 2 == 0)
    else:  # ring
        r = (yy - 0.5) ** 2 + (xx - 0.5 - phase / 2) ** 2
        m = (r > 0.06) & (r < 0.16)
    m = m.astype(np.float32)
    # later groups of six dim slightly so no two classes share a prototype
    level = 1.0 - 0.03 * (k // 6)
    tint = [(0.9 if (k + c) % 3 else 0.5) * level for c in range(channels)]
    return np.stack([m * t for t in tint])


def synthetic_patterns(
    seed: int = 0,
    num_classes: int = 3,
    size: int = 16,
    samples_per_class: int = 32,
    channels: int = 3,
    noise: float = 0.1,
    split: str = "train",
) -> Dataset:
    """Class prototypes (bars, crosses, blobs, ...) plus clamped Gaussian noise."""
    protos = prototypes(num_classes, size, channels)
    rng = Rng(seed, (0xDA7A, {"train": 0, "val": 1, "test": 2}.get(split, 3)))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    images = protos[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order].astype(np.int64), num_classes, split, "synthetic")


def prototypes(num_classes: int, size: int, channels: int = 3) -> np.ndarray:
    """The ``num_classes`` distinct noise-free patterns, ``[K, C, size, size]``."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if num_classes > MAX_SYNTHETIC_CLASSES:
        raise ValueError(f"at most {MAX_SYNTHETIC_CLASSES} synthetic classes are distinct")
    if size < MIN_SYNTHETIC_SIZE:
        raise ValueError(f"synthetic images need size >= {MIN_SYNTHETIC_SIZE}")
    return np.stack([_prototype(k, size, channels) for k in range(num_classes)]).astype(np.float32)


# ---------------------------------------------------------------- batching


def batch_indices(n: int, batch_size: int, seed: int | None = 0, epoch: int = 0) -> list[np.ndarray]:
    """Partition ``range(n)`` into batches; the final short batch is kept.

    ``seed=None`` keeps natural order; otherwise the permutation is a pure
    function of ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if seed is None else Rng(seed, (0xBA7C, epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = 0, epoch: int = 0, flip: bool = False):
    """Yield ``(images, labels)`` batches.  ``flip`` mirrors a seeded half of
    each batch horizontally (training augmentation)."""
    for j, idx in enumerate(batch_indices(len(ds), batch_size, shuffle_seed, epoch)):
        x = ds.images[idx]
        if flip:
            mask = Rng(shuffle_seed or 0, (0xF11B, epoch, j)).random(len(idx)) < 0.5
            x = x.copy()
            x[mask] = x[mask][..., ::-1]
        yield x, ds.labels[idx]
