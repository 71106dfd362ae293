"""Dataset ingestion: IDX files, synthetic generators and epoch streaming."""

from __future__ import annotations

import struct

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


class IdxParseError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def load_idx_images(path):
    """Parse a big-endian IDX image file into a float array scaled to [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxParseError("truncated header", len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_MAGIC_IMAGES:
        raise IdxParseError(f"bad magic 0x{magic:08x}, expected 0x{IDX_MAGIC_IMAGES:08x}", 0)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise IdxParseError(f"file ends before pixel {len(raw) - 16}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def load_idx_labels(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxParseError("truncated header", len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_MAGIC_LABELS:
        raise IdxParseError(f"bad magic 0x{magic:08x}, expected 0x{IDX_MAGIC_LABELS:08x}", 0)
    if len(raw) < 8 + count:
        raise IdxParseError(f"file ends before label {len(raw) - 8}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(image_path, label_path, normalize=True):
    """Validated (images, labels) pair; images per-channel normalized."""
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", 0)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise IdxParseError("label out of range", 8)
    if normalize:
        images = normalize_per_channel(images)
    return images, labels


def normalize_per_channel(images):
    mean = images.mean(axis=(0, 2, 3), keepdims=True)
    std = images.std(axis=(0, 2, 3), keepdims=True)
    std[std == 0] = 1.0
    return (images - mean) / std


# ---------------------------------------------------------------------------
# synthetic datasets (no downloads needed for the full suite)


def striped_textures(count, classes=4, size=16, noise=1.0, frequency=2.0, seed=0):
    """Oriented sinusoidal gratings with random phase plus Gaussian noise.

    Class c uses orientation c * pi / classes; a local filter bank can read
    the orientation, so convolutional capacity genuinely matters.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    labels = rng.integers(classes, size=count)
    images = np.empty((count, 1, size, size))
    for i, c in enumerate(labels):
        theta = np.pi * c / classes
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * frequency * (xs * np.cos(theta) + ys * np.sin(theta))
                      + phase)
        images[i, 0] = wave + noise * rng.standard_normal((size, size))
    return normalize_per_channel(images), labels.astype(np.int64)


def gaussian_blobs(count, classes=2, size=8, separation=2.0, seed=0):
    """Linearly separable class blobs in pixel space."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(classes, size=count)
    means = rng.standard_normal((classes, 1, size, size))
    means *= separation / np.sqrt((means ** 2).mean())
    images = means[labels] + rng.standard_normal((count, 1, size, size))
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# streaming


class DatasetStream:
    """Deterministic epoch iterator with optional crop/flip augmentation.

    Epoch order is a pure function of (seed, epoch); augmentation draws come
    from the same per-epoch stream.
    """

    def __init__(self, images, labels, batch=64, seed=0, augment_crop=False,
                 augment_flip=False, pad=2):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.shape[0] != labels.shape[0]:
            raise ValueError("images/labels length mismatch")
        if labels.size and labels.min() < 0:
            raise ValueError("negative label")
        self.images = images
        self.labels = labels
        self.batch = batch
        self.seed = seed
        self.augment_crop = augment_crop
        self.augment_flip = augment_flip
        self.pad = pad

    @property
    def batches_per_epoch(self):
        return max(len(self.images) // self.batch, 1)

    def epoch(self, epoch_index):
        rng = np.random.default_rng([self.seed, epoch_index])
        order = rng.permutation(len(self.images))
        for b in range(self.batches_per_epoch):
            idx = order[b * self.batch:(b + 1) * self.batch]
            xb = self.images[idx]
            if self.augment_crop:
                xb = self._random_crop(xb, rng)
            if self.augment_flip:
                flips = rng.random(len(xb)) < 0.5
                xb = xb.copy()
                xb[flips] = xb[flips, :, :, ::-1]
            yield xb, self.labels[idx]

    def _random_crop(self, xb, rng):
        p = self.pad
        n = xb.shape[2]
        padded = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.empty_like(xb)
        offs = rng.integers(0, 2 * p + 1, size=(len(xb), 2))
        for i, (oy, ox) in enumerate(offs):
            out[i] = padded[i, :, oy:oy + n, ox:ox + n]
        return out
