"""Side-by-side saliency galleries.

One PNG per interpreter: each row is an input image, with its map on the
clean input and on the triggered input next to it. Maps are upscaled with
nearest-neighbour so individual working-resolution cells stay visible.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .evaluation import deployment_spec
from .models import ModelAdapter
from .saliency import InterpreterSpec, working_maps
from .triggers import TriggerPattern, apply_trigger

_GAP = 2  # separator width in pixels
_GAP_VALUE = 255


def _upscale_nearest(map_: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = (np.arange(height) * map_.shape[0]) // height
    cols = (np.arange(width) * map_.shape[1]) // width
    return map_[rows][:, cols]


def _image_cell(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0,1] to (H, W, 3) uint8."""
    return np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def _map_cell(map_: np.ndarray, height: int, width: int) -> np.ndarray:
    gray = np.clip(np.rint(_upscale_nearest(map_, height, width) * 255.0), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _assemble(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    height, width = rows[0][0].shape[:2]
    columns = len(rows[0])
    grid = np.full(
        (len(rows) * height + (len(rows) - 1) * _GAP, columns * width + (columns - 1) * _GAP, 3),
        _GAP_VALUE,
        dtype=np.uint8,
    )
    for i, cells in enumerate(rows):
        for j, cell in enumerate(cells):
            top = i * (height + _GAP)
            left = j * (width + _GAP)
            grid[top : top + height, left : left + width] = cell
    return grid


def render_gallery(
    model: ModelAdapter,
    images: np.ndarray,
    pattern: TriggerPattern,
    spec: InterpreterSpec,
) -> np.ndarray:
    """Grid of (input | map on clean | map on triggered) rows, uint8 RGB.

    Maps use the deployment view of the interpreter: the class each map
    explains is the model's own prediction, since triggered inputs carry no
    label at inspection time.
    """
    if len(images) == 0:
        raise DataError("gallery needs at least one image")
    spec = deployment_spec(spec)
    clean = torch.from_numpy(np.asarray(images, dtype=np.float32))
    triggered = torch.from_numpy(
        np.stack([apply_trigger(img, pattern) for img in images]).astype(np.float32)
    )
    labels = torch.zeros(len(clean), dtype=torch.long)  # unused under the predicted rule
    clean_maps = working_maps(model, clean, labels, spec).detach().numpy()
    triggered_maps = working_maps(model, triggered, labels, spec).detach().numpy()
    height, width = clean.shape[-2:]
    rows = [
        [
            _image_cell(clean[i].numpy()),
            _map_cell(clean_maps[i], height, width),
            _map_cell(triggered_maps[i], height, width),
        ]
        for i in range(len(clean))
    ]
    return _assemble(rows)


def dump_saliency_gallery(
    model: ModelAdapter,
    images: np.ndarray,
    interpreters: Sequence[InterpreterSpec],
    pattern: TriggerPattern,
    out_dir,
) -> Dict[str, Path]:
    """Write one gallery PNG per interpreter; returns method -> path.

    Output bytes are deterministic for fixed inputs, so galleries can be
    compared across runs byte for byte.
    """
    if len(images) == 0:
        raise DataError("gallery needs at least one image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}
    for spec in interpreters:
        grid = render_gallery(model, images, pattern, spec)
        path = out_dir / f"{spec.method}.png"
        Image.fromarray(grid, mode="RGB").save(path, format="PNG")
        paths[spec.method] = path
    return paths
