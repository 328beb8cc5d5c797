"""Datasets: CIFAR-10 binary batches and a seeded synthetic stand-in."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000
CIFAR_BATCH_BYTES = CIFAR_RECORD * CIFAR_BATCH_RECORDS  # 30730000


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                crop_pad: int = 0, flip: bool = False):
        """Yield (images, labels); every record appears exactly once per pass."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            x = self.images[idx]
            if rng is not None and (crop_pad or flip):
                x = augment(x, rng, crop_pad, flip)
            yield x, self.labels[idx]


def augment(x: np.ndarray, rng: np.random.Generator, crop_pad: int = 4, flip: bool = True) -> np.ndarray:
    n, _, h, w = x.shape
    out = np.empty_like(x)
    if crop_pad:
        xp = np.pad(x, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        dy = rng.integers(0, 2 * crop_pad + 1, size=n)
        dx = rng.integers(0, 2 * crop_pad + 1, size=n)
        for i in range(n):
            out[i] = xp[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    else:
        out[:] = x
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    return out


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) != CIFAR_BATCH_BYTES:
        raise DatasetError(
            f"{path}: expected {CIFAR_BATCH_BYTES} bytes per batch file "
            f"({CIFAR_BATCH_RECORDS} records of {CIFAR_RECORD}), got {len(raw)}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10_binary(directory, split: str = "train", classes=None, per_class: int | None = None,
                        downsample: int = 1) -> Dataset:
    """Load the standard binary release (data_batch_1..5.bin / test_batch.bin).

    ``classes`` and ``per_class`` cut a reduced-scale subset (labels are
    re-indexed to 0..len(classes)-1); ``downsample`` average-pools pixels.
    """
    d = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    files = [d / n for n in names if (d / n).exists()]
    if not files:
        raise DatasetError(f"no CIFAR-10 {split} batches found in {d}")
    parts = [read_cifar10_batch(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    num_classes = 10
    if classes is not None:
        classes = list(classes)
        keep = np.isin(labels, classes)
        images, labels = images[keep], labels[keep]
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap[int(c)] for c in labels], dtype=np.int64)
        num_classes = len(classes)
    if per_class is not None:
        idx = np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in range(num_classes)])
        idx.sort()
        images, labels = images[idx], labels[idx]
    if downsample > 1:
        n, c, h, w = images.shape
        f = downsample
        images = images.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    return Dataset(images, labels, num_classes)


def synthetic_prototypes(classes: int, resolution: int, channels: int, rng: np.random.Generator,
                         blobs: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:resolution, 0:resolution] / max(resolution - 1, 1)
    protos = np.zeros((classes, channels, resolution, resolution))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            width = rng.uniform(0.08, 0.25)
            colour = rng.uniform(0.2, 1.0, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            protos[c] += colour[:, None, None] * bump
    return np.clip(protos, 0.0, 1.0)


def synthetic_dataset(classes: int = 2, per_class: int = 500, resolution: int = 16, seed: int = 0,
                      noise: float = 0.25, channels: int = 3, shift: int = 0) -> Dataset:
    """Gaussian-blob class prototypes plus pixel noise (and optional random shifts).

    ``noise=0`` and ``shift=0`` reproduce the prototypes exactly.
    """
    if classes < 2:
        raise DatasetError("synthetic_dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    protos = synthetic_prototypes(classes, resolution, channels, rng)
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    images = protos[labels].copy()
    if shift:
        dy = rng.integers(-shift, shift + 1, size=len(labels))
        dx = rng.integers(-shift, shift + 1, size=len(labels))
        for i in range(len(labels)):
            images[i] = np.roll(images[i], (dy[i], dx[i]), axis=(1, 2))
    if noise:
        images += noise * rng.standard_normal(images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), classes)


def train_test_split(ds: Dataset, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(slice(n_test, None)), ds.subset(slice(0, n_test))
