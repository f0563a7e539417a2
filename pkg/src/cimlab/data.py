"""Synthetic datasets and IDX file ingestion."""

from __future__ import annotations

import struct
from typing import Tuple

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def blob_centers(classes: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x43454E54]))
    return rng.standard_normal((classes, dim)) * 2.0


def blobs(n: int, classes: int, spread: float, seed: int, dim: int = 2,
          sample_seed: int = None) -> Tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters around seeded centers.

    ``seed`` fixes the centers; ``sample_seed`` (default ``seed``) fixes the
    draw, so train/test splits share centers but not points.
    """
    centers = blob_centers(classes, dim, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed if sample_seed is None else sample_seed, 0x424C4F42]))
    y = rng.integers(0, classes, n)
    x = centers[y] + spread * rng.standard_normal((n, dim))
    return x.astype(np.float32), y


def shifted_blobs(n: int, classes: int, spread: float, seed: int, dim: int = 2,
                  shift: float = 0.5, sample_seed: int = None) -> Tuple[np.ndarray, np.ndarray]:
    """Out-of-distribution counterpart of :func:`blobs`.

    Each cluster center moves a fraction ``shift`` of the way toward the next
    class's center, so the OOD clusters sit between the training clusters.
    """
    centers = blob_centers(classes, dim, seed)
    moved = centers + shift * (np.roll(centers, -1, axis=0) - centers)
    rng = np.random.default_rng(np.random.SeedSequence([seed if sample_seed is None else sample_seed, 0x53484654]))
    y = rng.integers(0, classes, n)
    x = moved[y] + spread * rng.standard_normal((n, dim))
    return x.astype(np.float32), y


def moons(n: int, noise: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D4F4F4E]))
    y = rng.integers(0, 2, n)
    t = rng.uniform(0, np.pi, n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], axis=1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1))
    x = x + noise * rng.standard_normal((n, 2))
    return x.astype(np.float32), y


def read_idx(path) -> np.ndarray:
    """Read one IDX file (unsigned-byte payload) into an integer array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header", 0)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(f"{path}: truncated payload, expected {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] with a channel axis, shape (N, 1, H, W), plus labels."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions, got {images.ndim}", 3)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1 dimension, got {labels.ndim}", 3)
    if len(images) != len(labels):
        raise ValueError(f"image count {len(images)} does not match label count {len(labels)}")
    return (images.astype(np.float32) / 255.0)[:, None], labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def rotate90(images: np.ndarray) -> np.ndarray:
    """OOD counterpart of an image set: each image rotated by 90 degrees."""
    return np.ascontiguousarray(np.rot90(images, k=1, axes=(-2, -1)))


def minmax_fit(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature offset and span mapping ``x`` onto [0, 1]."""
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    return lo, np.where(span > 0, span, 1.0)


def minmax_apply(x: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    return ((x - lo) / span).astype(np.float32)
