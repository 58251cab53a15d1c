"""Dataset ingestion and batch construction.

Batches default to pairwise-distinct labels, enforced by the sampler
rather than assumed; attacks warn when the caller turns that off. All
loaders scale pixels to [0, 1] as float32, images laid out NCHW.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .container import MAGIC_DATASET, read_container, write_container

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    images: np.ndarray  # (M, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (M,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError(f"dataset {self.name}: images {self.images.shape} do not match "
                             f"{len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"dataset {self.name}: label outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class BatchSpec:
    batch_size: int
    anchor: int | None = None  # dataset index that must be included
    distinct_labels: bool = True
    seed: int = 0


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Read the canonical big-endian IDX image/label file pair."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ValueError(f"{images_path}: too short for an IDX image file")
    magic, m, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) != 16 + m * h * w:
        raise ValueError(f"{images_path}: payload length does not match header dims {m}x{h}x{w}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(m, 1, h, w).astype(np.float32) / 255.0

    with open(labels_path, "rb") as f:
        raw_l = f.read()
    if len(raw_l) < 8:
        raise ValueError(f"{labels_path}: too short for an IDX label file")
    magic_l, m_l = struct.unpack(">II", raw_l[:8])
    if magic_l != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: bad IDX magic 0x{magic_l:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if m_l != m:
        raise ValueError(f"IDX pair mismatch: {m} images but {m_l} labels")
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, num_classes=int(labels.max()) + 1 if m else 0, name=name)


def load_cifar_binary(paths, name: str = "cifar") -> Dataset:
    """Read CIFAR-10 binary batches (3073-byte records: label + 3x32x32 pixels)."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    chunks_img, chunks_lab = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise ValueError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        chunks_lab.append(records[:, 0].astype(np.int64))
        chunks_img.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    images = np.concatenate(chunks_img)
    labels = np.concatenate(chunks_lab)
    return Dataset(images, labels, num_classes=10, name=name)


def _class_grating(cls: int, size: int, channels: int, n_orientations: int,
                   base_freq: float, freq_step: float, amplitude: float) -> np.ndarray:
    """Deterministic oriented sinusoid for a class.

    Orientation walks [0, pi) in n_orientations steps; every full turn of the
    orientation index bumps the frequency. A fine orientation grid makes
    neighboring classes genuinely confusable (fine-grained classification),
    a coarse one keeps them well separated.
    """
    orient = (cls % n_orientations) * np.pi / n_orientations
    band = cls // n_orientations
    freq = base_freq + freq_step * band
    phase = 0.7 * band
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    t = xx * np.cos(orient) + yy * np.sin(orient)
    img = 0.5 + amplitude * np.sin(2 * np.pi * freq * t + phase)
    return np.repeat(img[None, :, :], channels, axis=0).astype(np.float32)


def generate_synthetic(num_classes: int, per_class: int, size: int = 28, seed: int = 0,
                       channels: int = 1, noise: float = 0.1, name: str = "synthetic",
                       n_orientations: int = 8, base_freq: float = 2.0, freq_step: float = 1.0,
                       amplitude: float = 0.4) -> Dataset:
    """Oriented sinusoidal gratings, one frequency/orientation per class, plus
    seeded noise; with the default coarse orientation grid the classes are
    separable enough for high test accuracy."""
    if num_classes <= 0 or num_classes > 256:
        raise ValueError(f"num_classes must be in [1, 256], got {num_classes}")
    if per_class <= 0:
        raise ValueError("per_class must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    images = np.empty((num_classes * per_class, channels, size, size), dtype=np.float32)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    i = 0
    for cls in range(num_classes):
        base = _class_grating(cls, size, channels, n_orientations, base_freq, freq_step, amplitude)
        for _ in range(per_class):
            jitter = rng.normal(0.0, noise, size=base.shape).astype(np.float32)
            images[i] = np.clip(base + jitter, 0.0, 1.0)
            labels[i] = cls
            i += 1
    return Dataset(images, labels, num_classes=num_classes, name=name)


def sample_batch(dataset: Dataset, spec: BatchSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw a batch; returns (images, labels, dataset indices).

    With distinct_labels, labels are pairwise distinct (batch size must not
    exceed the class count). A specified anchor is always placed at slot 0.
    """
    n = spec.batch_size
    if n <= 0:
        raise ValueError("batch_size must be positive")
    if spec.anchor is not None and not (0 <= spec.anchor < len(dataset)):
        raise ValueError(f"anchor index {spec.anchor} outside dataset of size {len(dataset)}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    if not spec.distinct_labels:
        pool = np.arange(len(dataset))
        if spec.anchor is not None:
            rest = rng.choice(pool, size=n - 1, replace=True)
            idx = np.concatenate(([spec.anchor], rest))
        else:
            idx = rng.choice(pool, size=n, replace=True)
    else:
        present = np.unique(dataset.labels)
        if n > dataset.num_classes or n > len(present):
            raise ValueError(f"cannot draw {n} distinct labels from {len(present)} available classes")
        chosen: list[int] = []
        if spec.anchor is not None:
            chosen.append(spec.anchor)
            present = present[present != dataset.labels[spec.anchor]]
        extra_labels = rng.choice(present, size=n - len(chosen), replace=False)
        for lab in extra_labels:
            members = np.flatnonzero(dataset.labels == lab)
            chosen.append(int(rng.choice(members)))
        idx = np.asarray(chosen)
    return dataset.images[idx].copy(), dataset.labels[idx].copy(), idx


def save_dataset(dataset: Dataset, path):
    """Persist to the shared container format (labels stored as float32,
    exact for class ids below 2**24)."""
    write_container(path, MAGIC_DATASET,
                    {"name": dataset.name, "num_classes": dataset.num_classes},
                    {"images": dataset.images, "labels": dataset.labels.astype(np.float32)})


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path, MAGIC_DATASET)
    return Dataset(arrays["images"], arrays["labels"].astype(np.int64),
                   num_classes=header["num_classes"], name=header["name"])
