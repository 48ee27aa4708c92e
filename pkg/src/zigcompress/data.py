"""Datasets: the IDX reader, a synthetic class-template generator, and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, dict(self.meta))

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))

    def batches(self, batch_size: int, seed: int):
        """Endless stream of minibatches; each epoch is a fresh seeded permutation."""
        rng = np.random.default_rng(seed)
        n = len(self)
        while True:
            perm = rng.permutation(n)
            for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
                idx = perm[i : i + batch_size]
                yield self.images[idx], self.labels[idx]


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expect_magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DatasetError(f"{path}: unexpected EOF in IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expect_magic:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    dims = [count]
    pos = 8
    for _ in range((magic & 0xFF) - 1):
        if len(raw) < pos + 4:
            raise DatasetError(f"{path}: unexpected EOF in IDX header")
        dims.append(struct.unpack(">I", raw[pos : pos + 4])[0])
        pos += 4
    size = int(np.prod(dims))
    if len(raw) < pos + size:
        raise DatasetError(f"{path}: unexpected EOF (need {size} bytes of data, have {len(raw) - pos})")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=pos).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Big-endian IDX images/labels (optionally gzipped); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float32)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), classes, {"source": str(images_path)})


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (labels when 1-D, images when 3-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def gen_synthetic(classes: int, n: int, shape, seed: int, noise: float = 1.0, smooth: int = 4) -> Dataset:
    """Balanced Gaussian class templates plus pixel noise.

    Templates are drawn on a coarse grid and upsampled so that they carry
    spatial structure a convolution can pick up.
    """
    if n < classes:
        raise DatasetError(f"need at least one sample per class (n={n}, classes={classes})")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    gh, gw = max(1, -(-h // smooth)), max(1, -(-w // smooth))
    coarse = rng.standard_normal((classes, c, gh, gw))
    templates = np.repeat(np.repeat(coarse, smooth, axis=2), smooth, axis=3)[:, :, :h, :w]
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    images = templates[labels] + noise * rng.standard_normal((n, c, h, w))
    return Dataset(images.astype(np.float32), labels, classes, {"source": "synthetic", "seed": seed})


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))
