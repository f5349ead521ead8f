"""Dataset containers, class-per-folder IO, and the synthetic generators.

The bundled generators stand in for large licensed datasets: a 10-class
shapes/textures image set and a 2-class tabular set with a known decision
rule. Both are fully determined by their seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import DataError

SHAPE_CLASSES = (
    "circle", "ring", "square", "triangle", "plus",
    "hstripes", "vstripes", "diagonal", "checker", "dots",
)


@dataclass
class ImageDataset:
    """Images as (N, C, H, W) float32 in [0,1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], list(self.class_names))


def split_dataset(dataset: ImageDataset, val_fraction: float, seed: int) -> Tuple[ImageDataset, ImageDataset]:
    """Deterministic shuffled train/validation split."""
    if not (0.0 < val_fraction < 1.0):
        raise DataError("val_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


# ---------------------------------------------------------------------------
# synthetic images


def _shape_mask(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    cy, cx = rng.uniform(-0.25, 0.25, size=2)
    scale = rng.uniform(0.45, 0.7)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    name = SHAPE_CLASSES[label]
    if name == "circle":
        return r < scale
    if name == "ring":
        return (r < scale) & (r > scale * 0.55)
    if name == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) < scale * 0.8
    if name == "triangle":
        base = yy - cy + scale * 0.6
        return (base > 0) & (base < scale * 1.3) & (np.abs(xx - cx) < base * 0.7)
    if name == "plus":
        arm = scale * 0.25
        extent = scale * 0.9
        in_box = (np.abs(yy - cy) < extent) & (np.abs(xx - cx) < extent)
        return in_box & ((np.abs(yy - cy) < arm) | (np.abs(xx - cx) < arm))
    freq = rng.uniform(4.0, 7.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    if name == "hstripes":
        return np.sin(freq * np.pi * yy + phase) > 0
    if name == "vstripes":
        return np.sin(freq * np.pi * xx + phase) > 0
    if name == "diagonal":
        return np.sin(freq * np.pi * (yy + xx) / np.sqrt(2) + phase) > 0
    if name == "checker":
        return (np.sin(freq * np.pi * yy + phase) * np.sin(freq * np.pi * xx + phase)) > 0
    # dots: a grid of small discs
    gy = np.mod(yy * freq, 2.0) - 1.0
    gx = np.mod(xx * freq, 2.0) - 1.0
    return (gy * gy + gx * gx) < 0.45


def generate_shapes_dataset(count: int, image_size: int = 32, seed: int = 0, noise: float = 0.02) -> ImageDataset:
    """10-class shape/texture images, crisp enough for a tiny CNN to learn."""
    if count < 1:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    images = np.zeros((count, 3, image_size, image_size), dtype=np.float32)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=count).astype(np.int64)
    for i in range(count):
        fg = rng.uniform(0.65, 1.0, size=3)
        bg = rng.uniform(0.0, 0.3, size=3)
        mask = _shape_mask(int(labels[i]), image_size, rng)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images=images, labels=labels, class_names=list(SHAPE_CLASSES))


# ---------------------------------------------------------------------------
# synthetic tabular


def generate_tabular_dataset(count: int, feature_count: int = 23, seed: int = 0):
    """Binary-labelled feature vectors in [0,1] with a sparse linear rule.

    Returns (features (N, F) float32, labels (N,), informative indices).
    """
    if count < 1:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    informative = rng.choice(feature_count, size=min(6, feature_count), replace=False)
    weights = rng.normal(0.0, 2.5, size=len(informative))
    features = rng.random((count, feature_count)).astype(np.float32)
    logit = (features[:, informative] - 0.5) @ weights + rng.normal(0.0, 0.15, size=count)
    labels = (logit > 0).astype(np.int64)
    return features, labels, np.sort(informative)


# ---------------------------------------------------------------------------
# class-per-folder IO


def save_image_folder(dataset: ImageDataset, root) -> None:
    """Persist as root/<class-name>/<index>.png."""
    root = Path(root)
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        arr = np.round(dataset.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        name = dataset.class_names[int(dataset.labels[i])]
        Image.fromarray(arr, mode="RGB").save(root / name / f"{i:06d}.png")


def load_image_folder(root, image_size: Optional[int] = None) -> ImageDataset:
    """Load a root/<class-name>/<image files> tree; classes sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} contains no class folders")
    images, labels = [], []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        for path in files:
            img = Image.open(path).convert("RGB")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise DataError(f"{root} contains no images")
    return ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=[p.name for p in class_dirs],
    )
