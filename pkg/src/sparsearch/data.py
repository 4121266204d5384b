"""Dataset ingestion: IDX and CIFAR-10 binary formats plus a synthetic task.

Loaders return raw pixel values (byte-exact, as floats); normalization is a
separate step so its statistics can come from the training portion only.
Dataset.take() counts reads, which is how the pipeline audits that test data
stays untouched until the final evaluation.
"""

from __future__ import annotations

import struct

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073


class FormatError(ValueError):
    """Malformed dataset file."""


class Dataset:
    def __init__(self, images, labels, num_classes):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError("images must be [count, channels, height, width]")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must be one integer per image")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.read_count = 0

    def __len__(self):
        return self.images.shape[0]

    def take(self, indices):
        """Fetch a batch by index; every fetch is counted."""
        indices = np.asarray(indices)
        self.read_count += int(indices.size)
        return self.images[indices], self.labels[indices]

    def subset(self, indices):
        ds = Dataset(self.images[np.asarray(indices)], self.labels[np.asarray(indices)],
                     self.num_classes)
        return ds


def compute_norm_stats(dataset):
    """Per-channel mean/std over a dataset (call on the training portion)."""
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-8)


def normalize(dataset, stats):
    mean, std = stats
    imgs = (dataset.images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(imgs, dataset.labels, dataset.num_classes)


def _read_be32(f, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated file while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair (big-endian, uint8 payload)."""
    with open(images_path, "rb") as f:
        magic = _read_be32(f, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        count = _read_be32(f, "image count")
        rows = _read_be32(f, "row count")
        cols = _read_be32(f, "column count")
        payload = f.read()
    if len(payload) != count * rows * cols:
        raise FormatError(
            f"image payload holds {len(payload)} bytes, expected {count * rows * cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        label_count = _read_be32(f, "label count")
        labels_raw = f.read()
    if len(labels_raw) != label_count:
        raise FormatError(
            f"label payload holds {len(labels_raw)} bytes, expected {label_count}")
    if label_count != count:
        raise FormatError(f"image/label count mismatch: {count} vs {label_count}")
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if count else 10
    return Dataset(images.astype(np.float64), labels, num_classes)


def load_cifar_binary(path):
    """Parse a CIFAR-10 binary batch: 3073-byte records, label + RGB planes."""
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"file length {len(payload)} is not a multiple of {CIFAR_RECORD_BYTES}")
    n = len(payload) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float64)
    if n and labels.max() > 9:
        raise FormatError(f"label {labels.max()} out of range for 10 classes")
    return Dataset(images, labels, 10)


def synth_dataset(num_classes, per_class, size, seed, noise=0.1, wavelength=4.0,
                  distractors=2):
    """Oriented-stripe grayscale patterns, class k at angle k*pi/num_classes.

    Random phase keeps raw pixels linearly inseparable. Each image also
    carries distractor gratings at uniformly random angles: pixel noise alone
    averages out under global pooling, so without structured clutter a single
    conv layer saturates the task. Deterministic per seed.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((num_classes * per_class, 1, size, size))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    freq = 2.0 * np.pi / wavelength
    i = 0
    for k in range(num_classes):
        theta = k * np.pi / num_classes
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        for _ in range(per_class):
            img = np.sin(freq * proj + rng.uniform(0.0, 2.0 * np.pi))
            for _ in range(distractors):
                phi = rng.uniform(0.0, np.pi)
                dproj = xx * np.cos(phi) + yy * np.sin(phi)
                img = img + np.sin(freq * dproj + rng.uniform(0.0, 2.0 * np.pi))
            images[i, 0] = img + rng.normal(0.0, noise, (size, size))
            labels[i] = k
            i += 1
    return Dataset(images, labels, num_classes)


def augment_batch(rng, images, pad=2, flip=True):
    """Random shift (zero-padded crop) and horizontal flip, per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.integers(0, 2, size=n) if flip else np.zeros(n, dtype=int)
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
