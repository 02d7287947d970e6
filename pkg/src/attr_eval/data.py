"""Datasets: loading, synthetic generation, SNR-controlled noise, statistics."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np


class DatasetError(ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    class_count: int
    _means: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelRangeError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def channel_means(self) -> np.ndarray:
        if self._means is None:
            self._means = channel_means(self)
        return self._means

    def subset(self, n: int) -> LabeledDataset:
        return LabeledDataset(self.images[:n], self.labels[:n], self.class_count)


def channel_means(dataset: LabeledDataset) -> np.ndarray:
    """Per-channel mean over every image and spatial position."""
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    return dataset.images.mean(axis=(0, 2, 3))


# --------------------------------------------------------------------------
# loaders


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise MalformedHeaderError(f"{path}: too short for an IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype != 0x08 or ndim == 0:
        raise MalformedHeaderError(f"{path}: unsupported IDX magic {buf[:4].hex()}")
    if len(buf) < 4 + 4 * ndim:
        raise MalformedHeaderError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    size = int(np.prod(dims))
    payload = buf[4 + 4 * ndim:]
    if len(payload) < size:
        raise TruncatedPayloadError(f"{path}: expected {size} bytes of data, found {len(payload)}")
    if len(payload) > size:
        raise MalformedHeaderError(f"{path}: {len(payload) - size} bytes beyond the declared dimensions")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _default_labels_path(path: str) -> str:
    base = os.path.basename(path)
    guess = base.replace("images", "labels").replace("idx3", "idx1").replace("idx4", "idx1")
    return os.path.join(os.path.dirname(path), guess)


def load_idx(path, labels_path=None, class_count: int | None = None) -> LabeledDataset:
    raw = _read_idx(path)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise MalformedHeaderError(f"{path}: image file must have 3 or 4 dimensions, has {raw.ndim}")
    labels_path = labels_path or _default_labels_path(os.fspath(path))
    if labels_path == os.fspath(path) or not os.path.exists(labels_path):
        raise DatasetError(f"{path}: no labels file (looked for {labels_path})")
    labels = _read_idx(labels_path)
    if labels.ndim != 1 or len(labels) != len(raw):
        raise MalformedHeaderError(f"{labels_path}: expected {len(raw)} labels, got shape {labels.shape}")
    return _build(raw.astype(np.float64) / 255.0, labels.astype(np.int64), class_count)


def load_csv(path, shape=None, class_count: int | None = None) -> LabeledDataset:
    """Rows ``label,pix0,...,pixN`` with pixels in 0..255, channel-major."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue  # header line
                raise MalformedHeaderError(f"{path}:{lineno}: non-numeric field") from None
            if vals[0] != int(vals[0]):
                raise MalformedHeaderError(f"{path}:{lineno}: label must be an integer")
            labels.append(int(vals[0]))
            rows.append(vals[1:])
    if not rows:
        raise TruncatedPayloadError(f"{path}: no data rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise TruncatedPayloadError(f"{path}: row {i} has {len(r)} pixels, expected {width}")
    pix = np.asarray(rows)
    if pix.min() < 0 or pix.max() > 255:
        raise DatasetError(f"{path}: pixel values outside 0..255")
    if shape is None:
        side = int(round(np.sqrt(width)))
        if side * side != width:
            raise DatasetError(f"{path}: cannot infer a square shape from {width} pixels")
        shape = (1, side, side)
    shape = tuple(shape)
    if int(np.prod(shape)) != width:
        raise DatasetError(f"{path}: shape {shape} does not hold {width} pixels")
    return _build(pix.reshape((len(rows),) + shape) / 255.0, np.asarray(labels), class_count)


def _build(images, labels, class_count) -> LabeledDataset:
    if len(labels) and labels.min() < 0:
        raise LabelRangeError("negative label")
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    elif len(labels) and labels.max() >= class_count:
        raise LabelRangeError(f"label {int(labels.max())} out of range for {class_count} classes")
    return LabeledDataset(images, labels, class_count)


def load_dataset(path, fmt: str, **kwargs) -> LabeledDataset:
    if fmt == "idx":
        return load_idx(path, **kwargs)
    if fmt == "csv":
        return load_csv(path, **kwargs)
    raise DatasetError(f"unknown dataset format {fmt!r}")


def write_idx(path, images_u8: np.ndarray) -> None:
    """Write a ubyte IDX file (used by tests and for exporting fixtures)."""
    arr = np.ascontiguousarray(images_u8, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


# --------------------------------------------------------------------------
# synthetic data


def synth_dataset(n: int, classes: int, shape=(3, 8, 8), seed: int = 0,
                  noise: float = 0.1, jitter: int = 1) -> LabeledDataset:
    """Class-conditional Gaussian blobs on a mid-grey background.

    Each class owns a blob centre (spread around a ring) and a channel
    colour; images add pixel noise and a small positional jitter, then clip
    to [0, 1].  Labels cycle so every class is represented.
    """
    if n < classes:
        raise ValueError("need at least one image per class")
    c, h, w = shape
    rng = np.random.default_rng([seed, 0x5EED])
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = 0.28 * min(h, w)
    centres = np.stack([(h - 1) / 2 + radius * np.sin(angles), (w - 1) / 2 + radius * np.cos(angles)], axis=1)
    colours = rng.uniform(0.3, 1.0, size=(classes, c))
    width = max(min(h, w) / 6.0, 0.75)

    labels = np.arange(n) % classes
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    shifts = rng.integers(-jitter, jitter + 1, size=(n, 2)) if jitter else np.zeros((n, 2))
    cy = centres[labels, 0] + shifts[:, 0]
    cx = centres[labels, 1] + shifts[:, 1]
    blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * width ** 2))
    images = 0.3 + 0.6 * colours[labels][:, :, None, None] * blob[:, None]
    images = images + rng.normal(0.0, noise, size=images.shape)
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, classes)


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


def noise_sigma(image: np.ndarray, snr_db: float) -> float:
    """Noise std giving ``snr_db`` against the image's mean squared value."""
    power = float(np.mean(np.square(image)))
    return float(np.sqrt(power / 10.0 ** (snr_db / 10.0)))


def noisy_images(images: np.ndarray, spec: NoiseSpec, stream: int = 0) -> np.ndarray:
    """Per-image additive Gaussian noise; no clipping.

    Image ``i`` draws from its own generator keyed by ``(seed, stream, i)``,
    so results do not depend on batching.  All-zero images come back
    unchanged (zero signal power means zero noise).
    """
    out = np.empty_like(images, dtype=np.float64)
    for i, img in enumerate(images):
        sigma = noise_sigma(img, spec.snr_db)
        if sigma == 0.0:
            out[i] = img
            continue
        rng = np.random.default_rng([spec.seed, stream, i])
        out[i] = img + rng.normal(0.0, sigma, size=img.shape)
    return out


def add_gaussian_noise_snr(dataset: LabeledDataset, spec: NoiseSpec, stream: int = 0) -> LabeledDataset:
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    return LabeledDataset(noisy_images(dataset.images, spec, stream), dataset.labels.copy(), dataset.class_count)


def empirical_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return float(10.0 * np.log10(np.sum(np.square(clean)) / np.sum(np.square(noise))))
