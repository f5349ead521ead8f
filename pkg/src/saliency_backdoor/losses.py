"""Attack loss functions and the target-map / top-k machinery.

Losses accept torch tensors (keeping whatever autograd graph they carry) or
plain arrays, and return 0-dim tensors. The clean/poisoned combinations are
plain arithmetic and work on floats and tensors alike:

    clean    = (beta * L_c + alpha * L_s) / (alpha + beta + 1)
    poisoned = (beta * L_c + L_p)         / (alpha + beta + 1)

The coefficient on the alteration term is exactly 1; the normalization is
by alpha + beta + 1 in both. That asymmetry is kept as designed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class TargetMap:
    """Pre-defined alteration target m_ref: ones on a width-k border."""

    values: np.ndarray
    boundary_width: int


@dataclass(frozen=True)
class TopKIndexSet:
    """Coordinates of the reference model's k most salient pixels.

    Computed once against the frozen reference and never recomputed during
    training; ``frozen_at`` records the reference snapshot it came from.
    """

    coordinates: Tuple[Tuple[int, int], ...]
    k: int
    frozen_at: str = ""


@dataclass(frozen=True)
class LossValue:
    """A combined loss with its components, for logs and assertions."""

    total: float
    classification: float
    preservation: Optional[float]
    alteration: Optional[float]
    alpha: float
    beta: float

    def __post_init__(self):
        denom = self.alpha + self.beta + 1.0
        if self.preservation is not None:
            expected = (self.beta * self.classification + self.alpha * self.preservation) / denom
        else:
            expected = (self.beta * self.classification + self.alteration) / denom
        if not math.isclose(self.total, expected, rel_tol=0.0, abs_tol=1e-9):
            raise ValueError(f"loss total {self.total} does not reproduce its components ({expected})")


def _as_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(np.asarray(values))


def classification_loss(logits, label) -> torch.Tensor:
    """Softmax cross-entropy; batched inputs are averaged."""
    t = _as_tensor(logits)
    y = torch.as_tensor(label, dtype=torch.long)
    if t.dim() == 1:
        t = t[None]
        y = y.view(1)
    return F.cross_entropy(t, y)


def saliency_preservation_loss(map_current, map_reference) -> torch.Tensor:
    """MSE between the current map and the reference model's map."""
    cur = _as_tensor(map_current)
    ref = _as_tensor(map_reference)
    if cur.shape != ref.shape:
        raise ShapeMismatchError(f"map shapes differ: {tuple(cur.shape)} vs {tuple(ref.shape)}")
    return ((cur - ref.to(cur.dtype)) ** 2).mean()


def make_target_map(height: int, width: int, k: int) -> TargetMap:
    """Ones on the boundary of width k (saturating at the map center)."""
    if height < 1 or width < 1:
        raise ValueError(f"map dims must be positive, got {(height, width)}")
    if k < 1:
        raise ValueError("boundary width k must be at least 1")
    eff = min(k, math.ceil(min(height, width) / 2))
    values = np.zeros((height, width), dtype=np.float64)
    values[:eff, :] = 1.0
    values[-eff:, :] = 1.0
    values[:, :eff] = 1.0
    values[:, -eff:] = 1.0
    return TargetMap(values=values, boundary_width=k)


def targeted_alteration_loss(map_, target: TargetMap) -> torch.Tensor:
    """MSE between the map and m_ref."""
    cur = _as_tensor(map_)
    ref = torch.as_tensor(target.values, dtype=cur.dtype)
    if cur.shape[-2:] != ref.shape:
        raise ShapeMismatchError(f"map {tuple(cur.shape)} does not match target {ref.shape}")
    return ((cur - ref) ** 2).mean()


def topk_reference_set(reference_map, k: int, frozen_at: str = "") -> TopKIndexSet:
    """Coordinates of the k largest reference-map values.

    Ties are broken by row-major position, so the set is deterministic.
    """
    ref = np.asarray(reference_map, dtype=np.float64)
    h, w = ref.shape
    if k < 1 or k > h * w:
        raise ValueError(f"k={k} invalid for a {h}x{w} map")
    order = np.argsort(-ref.ravel(), kind="stable")[:k]
    coords = tuple((int(i) // w, int(i) % w) for i in order)
    return TopKIndexSet(coordinates=coords, k=k, frozen_at=frozen_at)


def nontargeted_alteration_loss(map_, index_set: TopKIndexSet) -> torch.Tensor:
    """Sum of squared map values over the frozen top-k set J."""
    cur = _as_tensor(map_)
    h, w = cur.shape[-2:]
    for (u, v) in index_set.coordinates:
        if not (0 <= u < h and 0 <= v < w):
            raise ValueError(f"index ({u},{v}) outside a {h}x{w} map")
    rows = torch.tensor([u for u, _ in index_set.coordinates])
    cols = torch.tensor([v for _, v in index_set.coordinates])
    return (cur[..., rows, cols] ** 2).sum(dim=-1).mean()


def joint_alteration_loss(losses: Sequence, weights: Sequence[float]) -> torch.Tensor:
    """Weighted sum of per-interpreter alteration losses."""
    if len(losses) != len(weights):
        raise ShapeMismatchError(f"{len(losses)} losses vs {len(weights)} weights")
    if abs(sum(float(w) for w in weights) - 1.0) > 1e-9:
        raise ValueError("joint weights must sum to 1")
    total = None
    for loss, weight in zip(losses, weights):
        term = _as_tensor(loss) * float(weight)
        total = term if total is None else total + term
    return total


def clean_loss(l_c, l_s, alpha: float, beta: float):
    """Combined loss on preservation-role examples."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    return (beta * l_c + alpha * l_s) / (alpha + beta + 1.0)


def poisoned_loss(l_c, l_p, alpha: float, beta: float):
    """Combined loss on alteration-role examples; L_p carries coefficient 1."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    return (beta * l_c + l_p) / (alpha + beta + 1.0)
