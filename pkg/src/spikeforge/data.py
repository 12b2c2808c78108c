"""Synthetic box-localization and blob-segmentation datasets.

Every sample is drawn from its own generator seeded with ``(seed, index)``,
so datasets are pure functions of their arguments and a prefix of a larger
dataset equals the smaller one.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

MAGIC = b"SFDS"
VERSION = 1


class BoxSample(NamedTuple):
    image: np.ndarray
    box: np.ndarray


class MaskSample(NamedTuple):
    image: np.ndarray
    mask: np.ndarray


@dataclass
class Dataset:
    """Stacked images (N, 1, H, W) and targets: boxes (N, 4) or masks (N, 1, H, W)."""

    images: np.ndarray
    targets: np.ndarray

    @property
    def task(self) -> str:
        return "locnet" if self.targets.ndim == 2 else "cae"

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            cls = BoxSample if self.task == "locnet" else MaskSample
            return cls(self.images[i], self.targets[i])
        return Dataset(self.images[i], self.targets[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images, self.targets


def _box_sample(rng: np.random.Generator, size: int, area_range, noise: float):
    area = rng.uniform(*area_range)
    aspect = np.exp(rng.uniform(-0.5, 0.5))
    w = int(np.clip(round(np.sqrt(area * aspect) * size), 3, size - 2))
    h = int(np.clip(round(np.sqrt(area / aspect) * size), 3, size - 2))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    shape = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        shape[y0:y0 + h, x0:x0 + w] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx = y0 + (h - 1) / 2, x0 + (w - 1) / 2
        shape = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    rows = np.flatnonzero(shape.any(axis=1))
    cols = np.flatnonzero(shape.any(axis=0))
    box = np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float32) / size
    background = rng.uniform(0.0, 0.3)
    brightness = rng.uniform(0.6, 1.0)
    img = np.where(shape, brightness, background) + rng.normal(0.0, noise, (size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], box


def gen_box_dataset(n: int, seed: int, size: int = 64, area_range=(0.05, 0.4),
                    noise: float = 0.05) -> Dataset:
    """One bright rectangle or ellipse per image; target is its tight bounding
    box ``(x_min, y_min, x_max, y_max)`` normalized to [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = [_box_sample(np.random.default_rng([seed, i]), size, area_range, noise)
               for i in range(n)]
    return Dataset(np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples]))


def _smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=3.0)
    tex -= tex.min()
    return tex / max(tex.max(), 1e-12)


def _mask_sample(rng: np.random.Generator, size: int, noise: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    center = rng.uniform(0.3 * size, 0.7 * size, size=2)
    field = np.zeros((size, size))
    for _ in range(int(rng.integers(1, 4))):
        c = center + rng.normal(0.0, 0.08 * size, size=2)
        sigma = rng.uniform(0.08, 0.16) * size
        field += rng.uniform(0.7, 1.0) * np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2)
                                                / (2 * sigma ** 2))
    blob = field > 0.5 * field.max()
    labels, count = ndimage.label(blob)
    if count > 1:
        keep = labels[np.unravel_index(np.argmax(field), field.shape)]
        blob = labels == keep
    img = (0.3 * _smooth_texture(rng, size) + 0.45 * blob
           + rng.normal(0.0, noise, (size, size)) + 0.05)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], blob.astype(np.float32)[None]


def gen_mask_dataset(n: int, seed: int, size: int = 32, noise: float = 0.08) -> Dataset:
    """Thresholded sum of 1-3 Gaussians as a single-component mask; the image
    adds a smooth background texture and pixel noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = [_mask_sample(np.random.default_rng([seed, i]), size, noise) for i in range(n)]
    return Dataset(np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples]))


def split(data: Dataset, train_fraction: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    n_train = int(round(train_fraction * len(data)))
    return data[order[:n_train]], data[order[n_train:]]


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------

def _shape_header(a: np.ndarray) -> bytes:
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)


def dataset_bytes(data: Dataset) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(data))]
    for img, tgt in zip(data.images, data.targets):
        parts += [_shape_header(img), _shape_header(tgt),
                  img.astype("<f4").tobytes(), tgt.astype("<f4").tobytes()]
    return b"".join(parts)


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path, data: Dataset) -> None:
    atomic_write(path, dataset_bytes(data))


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    pos = 12

    def shape():
        nonlocal pos
        (ndim,) = struct.unpack_from("<I", buf, pos)
        dims = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        return dims

    def payload(dims):
        nonlocal pos
        size = int(np.prod(dims))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        return arr.astype(np.float32)

    images, targets = [], []
    try:
        for _ in range(count):
            img_shape, tgt_shape = shape(), shape()
            images.append(payload(img_shape))
            targets.append(payload(tgt_shape))
    except (struct.error, ValueError):
        raise ValueError(f"{path}: truncated dataset file") from None
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return Dataset(np.stack(images), np.stack(targets))


def load_or_generate(task: str, n: int, seed: int, cache_dir=None, **params) -> Dataset:
    """Generate a dataset, or read it back from ``cache_dir`` when a file for
    the same arguments exists there."""
    gen = gen_box_dataset if task == "locnet" else gen_mask_dataset
    if cache_dir is None:
        return gen(n, seed, **params)
    tag = "".join(f"-{k}{v}" for k, v in sorted(params.items()))
    path = Path(cache_dir) / f"{task}-n{n}-s{seed}{tag}.sfds"
    if path.exists():
        return load_dataset(path)
    data = gen(n, seed, **params)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, data)
    return data
