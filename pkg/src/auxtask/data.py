"""CIFAR-10 ingestion, train/val protocol, augmentation and batch loaders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

RECORD_BYTES = 3073
PIXEL_BYTES = 3072
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


class CifarFormatError(ValueError):
    pass


class PhaseError(RuntimeError):
    """Test data requested before training finished."""


@dataclass
class ImageRecord:
    label: int
    pixels: np.ndarray  # (3, 32, 32); uint8 at ingest, float after standardization

    def __post_init__(self):
        if not 0 <= self.label < 10:
            raise ValueError(f"label {self.label} outside 0..9")
        if self.pixels.size != PIXEL_BYTES:
            raise ValueError(f"pixel buffer has {self.pixels.size} values, expected {PIXEL_BYTES}")
        self.pixels = self.pixels.reshape(3, 32, 32)


@dataclass
class ImageSet:
    """Column-oriented stack of records: images (N, 3, 32, 32) and labels (N,)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "ImageSet":
        return ImageSet(self.images[index], self.labels[index])

    def records(self) -> list[ImageRecord]:
        return [ImageRecord(int(y), x) for x, y in zip(self.images, self.labels)]

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord]) -> "ImageSet":
        if not records:
            return cls(np.zeros((0, 3, 32, 32), dtype=np.uint8), np.zeros(0, dtype=np.int64))
        return cls(np.stack([r.pixels for r in records]), np.array([r.label for r in records]))

    def filter_classes(self, classes: Sequence[int]) -> "ImageSet":
        """Keep only ``classes`` and relabel them 0..len(classes)-1."""
        keep = np.isin(self.labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        return ImageSet(self.images[keep], np.array([remap[int(c)] for c in self.labels[keep]], dtype=np.int64))


# ---------------------------------------------------------------- CIFAR-10 binary


def _parse_array(buf: bytes) -> ImageSet:
    if len(buf) % RECORD_BYTES:
        whole = len(buf) // RECORD_BYTES
        raise CifarFormatError(
            f"truncated record at byte offset {whole * RECORD_BYTES}: "
            f"{len(buf) - whole * RECORD_BYTES} trailing bytes, records are {RECORD_BYTES} bytes"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(f"label byte {labels[i]} > 9 at byte offset {i * RECORD_BYTES}")
    return ImageSet(raw[:, 1:].reshape(-1, 3, 32, 32).copy(), labels.astype(np.int64))


def parse_cifar10_binary(buf: bytes) -> list[ImageRecord]:
    """Split a CIFAR-10 binary batch into records (1 label byte + R, G, B planes)."""
    return _parse_array(bytes(buf)).records()


def load_cifar10(data_dir: str | Path) -> tuple[ImageSet, ImageSet]:
    """Read the five train batches and the test batch from ``data_dir``."""
    data_dir = Path(data_dir)
    expected = (*TRAIN_FILES, TEST_FILE)
    missing = [name for name in expected if not (data_dir / name).is_file()]
    if missing:
        raise FileNotFoundError(
            f"CIFAR-10 binary files missing from {data_dir}: {', '.join(missing)} "
            f"(expected {', '.join(expected)}; use --synthetic for the built-in dataset)"
        )
    parts = [_parse_array((data_dir / name).read_bytes()) for name in TRAIN_FILES]
    train = ImageSet(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    test = _parse_array((data_dir / TEST_FILE).read_bytes())
    return train, test


# ---------------------------------------------------------------- statistics


def compute_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of uint8 images scaled to [0, 1]; zero std becomes 1."""
    if len(images) == 0:
        raise ValueError("compute_stats needs at least one image")
    x = np.asarray(images, dtype=np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)
    return mean, std


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    """``(pixel / 255 - mean[c]) / std[c]`` as float32; works for one image or a batch."""
    images = np.asarray(images)
    m = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    return ((images / 255.0 - m) / s).astype(np.float32)


def destandardize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    return (np.asarray(images, dtype=np.float64) * s + m) * 255.0


# ---------------------------------------------------------------- split


@dataclass
class DatasetSplit:
    """Train/val partition of the original train set plus a phase-guarded test set.

    Images are standardized float32 with the statistics of the original
    (pre-split) train set.
    """

    train: ImageSet
    val: ImageSet
    channel_mean: np.ndarray
    channel_std: np.ndarray
    _test: ImageSet | None = field(default=None, repr=False)
    _evaluating: bool = field(default=False, repr=False)

    def begin_evaluation(self) -> None:
        self._evaluating = True

    @property
    def test(self) -> ImageSet:
        if not self._evaluating:
            raise PhaseError("test data is only available after training (call begin_evaluation())")
        if self._test is None:
            raise PhaseError("this split has no test set")
        return self._test


def val_count(n: int, fraction: float) -> int:
    return math.floor(n * fraction + 1e-9)


def split_train_val(train: ImageSet, test: ImageSet | None = None, fraction: float = 0.05, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle of the original train set, then the first ``floor(fraction*N)`` go to val.

    Stats come from the whole original train set before partitioning.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    mean, std = compute_stats(train.images)
    perm = np.random.default_rng(seed).permutation(len(train))
    n_val = val_count(len(train), fraction)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    def prep(s: ImageSet) -> ImageSet:
        return ImageSet(standardize(s.images, mean, std), s.labels)

    return DatasetSplit(
        train=prep(train.subset(train_idx)),
        val=prep(train.subset(val_idx)),
        channel_mean=mean,
        channel_std=std,
        _test=prep(test) if test is not None else None,
    )


# ---------------------------------------------------------------- augmentation

PAD = 4


def augment(image: np.ndarray, rng: np.random.Generator | None = None, *, offset: tuple[int, int] | None = None,
            flip: bool | None = None, pad: int = PAD) -> np.ndarray:
    """Reflect-pad by ``pad``, crop back to the original size, maybe mirror horizontally.

    ``offset`` and ``flip`` override the random draws; ``offset=(pad, pad)``
    with ``flip=False`` is the identity.
    """
    c, h, w = image.shape
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy, dx = offset
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = PAD) -> np.ndarray:
    n, c, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# ---------------------------------------------------------------- loaders


class Loader:
    """Mini-batch iterator over an :class:`ImageSet`.

    ``order="random"`` reshuffles each epoch from ``(seed, epoch)``;
    ``"sequential"`` always walks the data in stored order. The final partial
    batch is kept.
    """

    def __init__(self, data: ImageSet, batch_size: int, order: str = "sequential", seed: int = 0, augment: bool = False):
        if order not in ("random", "sequential"):
            raise ValueError(f"order must be 'random' or 'sequential', got {order!r}")
        self.data = data
        self.batch_size = batch_size
        self.order = order
        self.seed = seed
        self.augment = augment
        self._epoch = 0

    def __len__(self) -> int:
        return -(-len(self.data) // self.batch_size)

    def permutation(self, epoch: int) -> np.ndarray:
        if self.order == "sequential":
            return np.arange(len(self.data))
        return np.random.default_rng([self.seed, epoch, 0]).permutation(len(self.data))

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        idx = self.permutation(epoch)
        aug_rng = np.random.default_rng([self.seed, epoch, 1])
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start : start + self.batch_size]
            x = self.data.images[sel]
            if self.augment:
                x = augment_batch(x, aug_rng)
            yield x, self.data.labels[sel]

    def __iter__(self):
        it = self.epoch(self._epoch)
        self._epoch += 1
        return it


def make_loader(data: ImageSet, batch_size: int, order: str = "sequential", seed: int = 0, augment: bool = False) -> Loader:
    return Loader(data, batch_size, order, seed, augment)


# ---------------------------------------------------------------- synthetic data


def synth_dataset(n_per_class: int, n_classes: int = 2, seed: int = 0, amplitude: float = 30.0,
                  noise: float = 50.0) -> ImageSet:
    """Class-conditional oriented gratings plus Gaussian pixel noise, as uint8 images.

    Class ``k`` uses orientation ``k * pi / n_classes`` with a phase jittered
    around a class-fixed value, so both convolutional and linear models can
    separate the classes. Records are interleaved by class.
    """
    if not 1 <= n_classes <= 10:
        raise ValueError(f"n_classes must be in 1..10, got {n_classes}")
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.tile(np.arange(n_classes), n_per_class)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    freq = 2 * np.pi / 8.0
    theta = labels * np.pi / n_classes
    phase = rng.uniform(-np.pi / 4, np.pi / 4, size=n)
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    grating = amplitude * np.cos(freq * proj + phase[:, None, None])
    tint = np.array([1.0, 0.8, 0.6])[None, :, None, None]
    img = 128.0 + grating[:, None] * tint + rng.normal(0.0, noise, size=(n, 3, 32, 32))
    return ImageSet(np.clip(np.rint(img), 0, 255).astype(np.uint8), labels)
