"""Dataset ingestion (CIFAR-10 binary records, seeded synthetic benchmark),
deterministic shuffling, and batch resizing to sampled resolutions."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeMismatch

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2023, 0.1994, 0.2010)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray  # (N,) int64
    split: str
    classes: int
    mean: tuple
    std: tuple
    checksum: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise FormatError(f"{self.split} split is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise FormatError(f"label out of range for {self.classes} classes")
        if not self.checksum:
            h = hashlib.sha256()
            h.update(np.ascontiguousarray(self.images, dtype=np.float32).tobytes())
            h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
            self.checksum = h.hexdigest()

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    def __len__(self):
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def parse_cifar_records(path: str):
    """Decode one binary batch file into (images u8 (N,3,32,32), labels u8 (N,))."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = arr[:, 0]
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} > 9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def save_cifar_records(path: str, images, labels):
    """Write (N,3,32,32) u8 images + labels in the standard record layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[1:] != (3, 32, 32):
        raise FormatError(f"expected (N,3,32,32) u8 images, got {images.shape}")
    if labels.min() < 0 or labels.max() > 9:
        raise FormatError("labels must be in [0, 9]")
    records = np.empty((images.shape[0], CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(images.shape[0], -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def _normalize(images_u8, mean, std):
    x = images_u8.astype(np.float32) / 255.0
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - m) / s


def load_cifar10(directory: str):
    """Load the standard binary batches; returns (train, test) Datasets.

    Normalization uses the fixed published channel statistics so runs stay
    comparable across machines.
    """
    nested = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        directory = nested
    train_parts = []
    for name in CIFAR_TRAIN_FILES:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 batch file {path}")
        train_parts.append(parse_cifar_records(path))
    test_images, test_labels = parse_cifar_records(os.path.join(directory, CIFAR_TEST_FILE))
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    train = Dataset(
        images=_normalize(images, CIFAR_MEAN, CIFAR_STD),
        labels=labels.astype(np.int64),
        split="train", classes=10, mean=CIFAR_MEAN, std=CIFAR_STD,
    )
    test = Dataset(
        images=_normalize(test_images, CIFAR_MEAN, CIFAR_STD),
        labels=test_labels.astype(np.int64),
        split="test", classes=10, mean=CIFAR_MEAN, std=CIFAR_STD,
    )
    return train, test


# ---------------------------------------------------------------------------
# resizing (half-pixel-center convention)


def _axis_plan(src: int, dst: int):
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, coords - i0


def _lerp_axis(x, axis, i0, i1, frac):
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = frac.size
    f = frac.astype(x.dtype).reshape(shape)
    return a * (1 - f) + b * f


def _bilinear_resize(x, target: int):
    """Separable bilinear resample of NCHW (or CHW) to target x target."""
    h_axis, w_axis = x.ndim - 2, x.ndim - 1
    i0, i1, f = _axis_plan(x.shape[h_axis], target)
    x = _lerp_axis(x, h_axis, i0, i1, f)
    i0, i1, f = _axis_plan(x.shape[w_axis], target)
    return _lerp_axis(x, w_axis, i0, i1, f)


def resize_batch(batch, target_resolution: int, method: str = "bilinear"):
    """Downsample an NCHW batch to a square target resolution.

    Source pixels map through half-pixel centers (align-corners=false);
    upscaling is rejected since training only ever shrinks inputs. A target
    equal to the source returns the batch unchanged.
    """
    if batch.ndim != 4:
        raise ShapeMismatch(f"expected NCHW batch, got shape {batch.shape}")
    src = batch.shape[2]
    if batch.shape[3] != src:
        raise ShapeMismatch("only square inputs are supported")
    if target_resolution > src:
        raise ShapeMismatch(
            f"upscaling {src} -> {target_resolution} rejected (downsample only)"
        )
    if target_resolution == src:
        return batch
    if method == "bilinear":
        return _bilinear_resize(batch, target_resolution)
    if method == "nearest":
        idx = np.minimum(
            np.floor((np.arange(target_resolution) + 0.5) * (src / target_resolution)).astype(np.int64),
            src - 1,
        )
        return batch[:, :, idx][:, :, :, idx]
    raise ValueError(f"unknown resize method {method!r}")


# ---------------------------------------------------------------------------
# synthetic benchmark


def synthetic_templates(seed: int, classes: int, channels: int, resolution: int,
                        coarse: int = 8):
    """Smooth class templates: coarse seeded noise grids upsampled bilinearly."""
    rng = np.random.default_rng([seed, 0xC1A55])
    grids = rng.normal(0.0, 1.0, size=(classes, channels, coarse, coarse))
    return _bilinear_resize(grids.astype(np.float32), resolution)


def synthetic_dataset(seed: int, n_per_class: int = 250, classes: int = 8,
                      base_resolution: int = 32, channels: int = 3,
                      sigma: float = 0.6, max_shift: int = 10,
                      contrast: float = 0.30, coarse: int = 8):
    """Class-conditional pattern benchmark, fully determined by the seed.

    Each image is its class's smooth template (circularly shifted by up to
    max_shift pixels) plus pixel noise, clipped to [0, 1] and normalized by
    the train split's channel statistics. Split is 80/20 per class, so the
    test set stays balanced. Templates travel in Dataset.meta for
    noiseless-oracle tests. coarse sets the template grid before upsampling:
    finer grids need more channels and resolution to separate, which widens
    the accuracy spread between wide and heavily pruned structures.
    """
    if classes < 2:
        raise FormatError("need at least 2 classes")
    templates = synthetic_templates(seed, classes, channels, base_resolution,
                                    coarse=coarse)
    rng = np.random.default_rng([seed, 0xDA7A])
    n_total = classes * n_per_class
    labels = np.repeat(np.arange(classes), n_per_class)
    images = 0.5 + contrast * templates[labels]
    if max_shift > 0:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n_total, 2))
        for i in range(n_total):
            images[i] = np.roll(images[i], tuple(shifts[i]), axis=(1, 2))
    if sigma > 0:
        images = images + rng.normal(0.0, sigma, size=images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    n_train_pc = int(round(0.8 * n_per_class))
    train_idx, test_idx = [], []
    for c in range(classes):
        start = c * n_per_class
        train_idx.extend(range(start, start + n_train_pc))
        test_idx.extend(range(start + n_train_pc, start + n_per_class))
    train_idx = np.array(train_idx)[rng.permutation(classes * n_train_pc)]
    test_idx = np.array(test_idx)[rng.permutation(n_total - classes * n_train_pc)]

    mean = tuple(float(m) for m in images[train_idx].mean(axis=(0, 2, 3)))
    std = tuple(float(s) for s in images[train_idx].std(axis=(0, 2, 3)))
    std = tuple(max(s, 1e-6) for s in std)

    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]

    def make(idx, split):
        return Dataset(
            images=(images[idx] - m) / s,
            labels=labels[idx].astype(np.int64),
            split=split, classes=classes, mean=mean, std=std,
            meta={"templates": templates, "sigma": sigma, "max_shift": max_shift,
                  "contrast": contrast},
        )

    return make(train_idx, "train"), make(test_idx, "test")


def denormalize_to_u8(images, mean, std):
    """Invert dataset normalization and quantize to u8 for record export."""
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    raw = np.clip(images * s + m, 0.0, 1.0)
    return np.round(raw * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# shuffling / batching / augmentation


def epoch_permutation(n: int, seed: int, epoch: int):
    """Epoch ordering as a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0x5133]).permutation(n)


def iterate_batches(dataset: Dataset, batch_size: int, seed: int | None = None,
                    epoch: int = 0, drop_last: bool = False):
    """Yield (images, labels) batches; seeded shuffling when seed is given."""
    n = len(dataset)
    order = epoch_permutation(n, seed, epoch) if seed is not None else np.arange(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        if idx.size == 0:
            break
        yield dataset.images[idx], dataset.labels[idx]


def augment_batch(images, rng, flip: bool = True, crop_pad: int = 0):
    """Seeded horizontal flip and zero-pad random crop."""
    out = images
    n = images.shape[0]
    if flip:
        coins = rng.random(n) < 0.5
        out = out.copy()
        out[coins] = out[coins, :, :, ::-1]
    if crop_pad > 0:
        h, w = out.shape[2], out.shape[3]
        padded = np.pad(out, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        cropped = np.empty_like(out)
        for i in range(n):
            oy, ox = offs[i]
            cropped[i] = padded[i, :, oy : oy + h, ox : ox + w]
        out = cropped
    return out
