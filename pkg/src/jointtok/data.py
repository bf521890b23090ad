"""Image corpora: a built-in synthetic shape dataset and image directories.

Synthetic recipe, per image: a dark gray background in [-1, -0.5], then one
shape whose kind is fixed by the class id, drawn in a class-specific base
color jittered by up to +-0.15 per channel, centred uniformly in the middle
40% of the frame with radius 20-35% of the side.

    0 square   1 disc   2 triangle   3 plus   4 horizontal bars
    5 vertical bars   6 ring   7 diagonal bars
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

BASE_COLORS = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.3, 0.95], [0.95, 0.85, 0.1],
    [0.9, 0.3, 0.9], [0.1, 0.9, 0.9], [0.95, 0.55, 0.1], [0.85, 0.85, 0.85],
])


class DatasetError(ValueError):
    pass


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # B×H×W×C in [-1, 1]
    labels: torch.Tensor  # B, null class = num_classes

    def __len__(self) -> int:
        return self.pixels.shape[0]


def _shape_mask(kind: int, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == 1:
        return dy**2 + dx**2 <= r**2
    if kind == 2:
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == 3:
        w = r / 3
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    period = max(r / 2, 2.0)
    if kind == 4:
        return inside & ((yy // period) % 2 == 0)
    if kind == 5:
        return inside & ((xx // period) % 2 == 0)
    if kind == 6:
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    return inside & (((yy + xx) // period) % 2 == 0)


def synthetic_images(count: int, size: int = 32, num_classes: int = 8, channels: int = 3,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic class-conditional shape images, float32 N×H×W×C in [-1, 1]."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    out = np.empty((count, size, size, channels), dtype=np.float32)
    for i, c in enumerate(labels):
        bg = rng.uniform(-1.0, -0.5)
        color = np.clip(BASE_COLORS[c % len(BASE_COLORS)] * 2 - 1 + rng.uniform(-0.15, 0.15, 3), -1, 1)
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        r = rng.uniform(0.2, 0.35) * size
        mask = _shape_mask(int(c % 8), yy, xx, cy, cx, r)
        img = np.full((size, size, 3), bg)
        img[mask] = color
        out[i] = img[..., :channels] if channels <= 3 else np.repeat(img.mean(-1, keepdims=True), channels, -1)
    return out, labels.astype(np.int64)


def load_image_directory(root: str | Path, size: int, channels: int = 3) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read images from ``root/<class>/*`` (or flat ``root/*`` as class 0)."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    groups = [(d.name, d) for d in class_dirs] or [("0", root)]
    pixels, labels = [], []
    for label, (_, folder) in enumerate(groups):
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                img = Image.open(path).convert("RGB" if channels == 3 else "L")
            except OSError as exc:
                raise DatasetError(f"cannot read image {path}: {exc}") from exc
            if img.size != (size, size):
                raise DatasetError(f"{path} is {img.size[0]}x{img.size[1]}, expected {size}x{size}")
            arr = np.asarray(img, dtype=np.float32).reshape(size, size, channels)
            pixels.append(arr / 127.5 - 1.0)
            labels.append(label)
    if not pixels:
        raise DatasetError(f"no images found under {root}")
    return np.stack(pixels), np.asarray(labels, dtype=np.int64), [name for name, _ in groups]


class ImageDataset:
    def __init__(self, pixels: np.ndarray | torch.Tensor, labels: np.ndarray | torch.Tensor):
        self.pixels = torch.as_tensor(pixels, dtype=torch.float32)
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        if self.pixels.min() < -1 or self.pixels.max() > 1:
            raise DatasetError("pixels must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.pixels.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()[:16]

    def batch(self, index: torch.Tensor, dtype: torch.dtype = torch.float32) -> ImageBatch:
        return ImageBatch(self.pixels[index].to(dtype), self.labels[index])

    def epoch_order(self, seed: int, epoch: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed * 100_003 + epoch)
        return torch.randperm(len(self), generator=gen)

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0, drop_last: bool = True,
                shuffle: bool = True, dtype: torch.dtype = torch.float32) -> Iterator[ImageBatch]:
        order = self.epoch_order(seed, epoch) if shuffle else torch.arange(len(self))
        stop = len(self) - len(self) % batch_size if drop_last else len(self)
        for start in range(0, stop, batch_size):
            yield self.batch(order[start : start + batch_size], dtype)

    def batch_at_step(self, step: int, batch_size: int, seed: int, dtype: torch.dtype = torch.float32) -> ImageBatch:
        """The batch used at global ``step``; a pure function of ``(seed, step)``."""
        per_epoch = max(len(self) // batch_size, 1)
        epoch, k = divmod(step, per_epoch)
        order = self.epoch_order(seed, epoch)
        return self.batch(order[k * batch_size : (k + 1) * batch_size], dtype)


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    resolution: int = 32
    num_classes: int = 8
    channels: int = 3
    train_size: int = 2048
    val_size: int = 256
    val_fraction: float = 0.1
    seed: int = 0


def ingest_dataset(spec: DatasetSpec) -> tuple[ImageDataset, ImageDataset]:
    """Build the deterministic (train, val) split described by ``spec``."""
    if spec.source == "synthetic":
        pixels, labels = synthetic_images(spec.train_size + spec.val_size, spec.resolution,
                                          spec.num_classes, spec.channels, seed=spec.seed)
        n_val = spec.val_size
    else:
        pixels, labels, _ = load_image_directory(spec.source, spec.resolution, spec.channels)
        n_val = max(int(round(len(pixels) * spec.val_fraction)), 1) if len(pixels) > 1 else 0
    order = np.random.default_rng(spec.seed + 7).permutation(len(pixels))
    val_idx, train_idx = order[:n_val], order[n_val:]
    train = ImageDataset(pixels[train_idx], labels[train_idx])
    val = ImageDataset(pixels[val_idx], labels[val_idx]) if n_val else train
    return train, val
