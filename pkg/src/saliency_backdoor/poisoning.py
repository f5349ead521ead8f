"""Poisoned-dataset construction: sample clean examples, insert the trigger,
keep the labels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .data import ImageDataset, save_image_folder
from .errors import DataError
from .triggers import TriggerPattern, apply_trigger


@dataclass
class PoisonedDataset:
    """Trigger-applied copies of clean examples with their original labels."""

    images: np.ndarray
    labels: np.ndarray
    source_indices: np.ndarray
    pattern_digest: str

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.source_indices)):
            raise DataError("poisoned dataset fields disagree on length")

    def __len__(self) -> int:
        return len(self.images)


def build_poisoned_dataset(clean: ImageDataset, pattern: TriggerPattern, n: int, seed: int) -> PoisonedDataset:
    """Sample n clean examples uniformly with replacement under ``seed``,
    apply the trigger to each, and keep every label. The clean dataset is
    never mutated."""
    if len(clean) == 0:
        raise DataError("cannot poison an empty clean dataset")
    if n < 1:
        raise DataError("n must be at least 1")
    rng = np.random.default_rng(seed)
    sources = rng.integers(0, len(clean), size=n)
    images = np.stack([apply_trigger(clean.images[i], pattern) for i in sources]).astype(np.float32)
    return PoisonedDataset(
        images=images,
        labels=clean.labels[sources].copy(),
        source_indices=sources.astype(np.int64),
        pattern_digest=pattern.digest(),
    )


def save_poisoned_dataset(dataset: PoisonedDataset, root, class_names: List[str]) -> None:
    """Persist in the class-per-folder layout plus a manifest mapping each
    item to its file, its clean source index, and the trigger digest."""
    root = Path(root)
    as_images = ImageDataset(dataset.images, dataset.labels, class_names)
    save_image_folder(as_images, root)
    manifest = {
        "pattern_digest": dataset.pattern_digest,
        "class_names": list(class_names),
        "items": [
            {
                "path": f"{class_names[int(dataset.labels[i])]}/{i:06d}.png",
                "source_index": int(dataset.source_indices[i]),
                "label": int(dataset.labels[i]),
            }
            for i in range(len(dataset))
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_poisoned_dataset(root) -> PoisonedDataset:
    """Reload a persisted poisoned set in its original item order."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"{root} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    from PIL import Image

    images, labels, sources = [], [], []
    for item in manifest["items"]:
        arr = np.asarray(Image.open(root / item["path"]).convert("RGB"), dtype=np.float32) / 255.0
        images.append(arr.transpose(2, 0, 1))
        labels.append(item["label"])
        sources.append(item["source_index"])
    return PoisonedDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        source_indices=np.asarray(sources, dtype=np.int64),
        pattern_digest=manifest["pattern_digest"],
    )
