"""CIFAR-10 binary ingestion, a synthetic stand-in dataset, and augmentation.

Randomness everywhere comes from numpy's PCG64 bit generator seeded
explicitly (``numpy.random.Generator(numpy.random.PCG64(seed))``).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.class_count, self.name)


# ---------------------------------------------------------------- CIFAR-10


def parse_cifar_batch(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records: one label byte, then R, G, B planes of 1024 bytes."""
    if len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise DataFormatError(
            f"{source}: truncated record at offset {whole * RECORD_BYTES} "
            f"(length {len(raw)} is not a multiple of {RECORD_BYTES})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataFormatError(f"{source}: label {labels[bad[0]]} >= 10 at offset {bad[0] * RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 255.0
    return images, labels


def encode_cifar_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    pix = np.rint(np.asarray(images) * 255.0).astype(np.uint8).reshape(len(labels), -1)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1).tobytes()


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    return parse_cifar_batch(path.read_bytes(), str(path))


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the binary-version train (5 files) and test splits from ``directory``."""
    directory = Path(directory)
    parts = [read_cifar_batch(directory / f) for f in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                    10, "cifar10-train")
    test_images, test_labels = read_cifar_batch(directory / CIFAR_TEST_FILE)
    return train, Dataset(test_images, test_labels, 10, "cifar10-test")


# ---------------------------------------------------------------- synthetic


def class_template(c: int, classes: int, size: int = 32) -> np.ndarray:
    """Oriented gradient plus a coloured blob, both unique to class ``c``."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    angle = np.pi * c / classes
    ramp = 0.5 + (np.cos(angle) * xx + np.sin(angle) * yy)  # in [~0, ~1]
    hue = c / classes
    color = 0.5 + 0.5 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
    cx = 0.3 * np.cos(2 * np.pi * c / classes + 0.5)
    cy = 0.3 * np.sin(2 * np.pi * c / classes + 0.5)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.12**2))
    img = 0.5 * ramp[None] * (0.4 + 0.6 * color[::-1, None, None]) + 0.5 * blob[None] * color[:, None, None]
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(seed: int, n_per_class: int, classes: int = 10, noise: float = 0.08,
                      size: int = 32) -> Dataset:
    """Class templates with seeded jitter and Gaussian pixel noise, in shuffled order."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = make_rng(seed)
    templates = np.stack([class_template(c, classes, size) for c in range(classes)])
    labels = np.repeat(np.arange(classes), n_per_class)
    labels = labels[rng.permutation(labels.size)]
    gain = rng.uniform(0.85, 1.15, size=(labels.size, 1, 1, 1))
    shift = rng.integers(-2, 3, size=(labels.size, 2))
    images = np.empty((labels.size, 3, size, size))
    for i, (y, (dy, dx)) in enumerate(zip(labels, shift)):
        images[i] = np.roll(templates[y], (int(dy), int(dx)), axis=(1, 2))
    images = images * gain + noise * rng.standard_normal(images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, f"synthetic-{seed}")


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    brightness: float = 0.0  # additive, RGB
    saturation: float = 1.0  # multiplicative, HSV S channel
    hue: float = 0.0  # rotation in turns, HSV H channel


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    brightness: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05

    def sample(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            flip=bool(rng.random() < self.flip_probability),
            brightness=float(rng.uniform(-self.brightness, self.brightness)),
            saturation=float(rng.uniform(1.0 - self.saturation, 1.0 + self.saturation)),
            hue=float(rng.uniform(-self.hue, self.hue)),
        )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """(3, ...) RGB in [0, 1] to HSV with hue in turns, same conventions as ``colorsys``."""
    r, g, b = rgb
    maxc = np.max(rgb, axis=0)
    minc = np.min(rgb, axis=0)
    v = maxc
    delta = maxc - minc
    nz = delta > 0
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(nz, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(nz, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Flip, hue rotation and saturation scaling via HSV, additive brightness, clamp."""
    out = image[:, :, ::-1] if params.flip else image
    if params.hue != 0.0 or params.saturation != 1.0:
        hsv = rgb_to_hsv(out)
        hsv[0] = (hsv[0] + params.hue) % 1.0
        hsv[1] = np.clip(hsv[1] * params.saturation, 0.0, 1.0)
        out = hsv_to_rgb(hsv)
    out = out + params.brightness
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return apply_augment(image, config.sample(rng))


def augment_batch(images: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return np.stack([augment(img, rng, config) for img in images])
