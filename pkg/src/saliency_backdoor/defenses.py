"""The three defenses the attack is evaluated against.

Activation Clustering inspects the geometry of last-hidden-layer
activations, Fine-pruning silences the quietest hidden neurons, and TV
denoising scrubs high-frequency input texture. None of them ever queries
the interpreter, which is the blind spot the attack exploits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence

import numpy as np
import torch

from .errors import DataError
from .models import ModelAdapter

_KMEANS_MAX_ITERS = 100
_TV_ITERATIONS = 200  # fixed budget; convergence is comfortably reached on 32x32


# ---------------------------------------------------------------------------
# activation clustering


@dataclass
class ClusteringOutcome:
    projections: np.ndarray  # (N, 2) top-2 principal coordinates
    assignments: np.ndarray  # (N,) cluster ids in {0, 1}
    misclustering_rate: float  # percent, in [0, 50] after label alignment
    bin: str  # "separable" / "partial" / "overlapping"


def misclustering_bin(rate: float) -> str:
    if rate < 5.0:
        return "separable"
    if rate <= 30.0:
        return "partial"
    return "overlapping"


def _principal_projection(activations: np.ndarray) -> np.ndarray:
    centered = activations - activations.mean(axis=0, keepdims=True)
    if not np.any(centered):
        raise DataError("activation matrix has zero variance; nothing to cluster")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # fix the sign ambiguity so the projection is reproducible
    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return centered @ components.T


def _two_means(points: np.ndarray) -> np.ndarray:
    """Lloyd's algorithm with farthest-point seeding; fully deterministic."""
    first = int(np.argmax((points**2).sum(axis=1)))
    centers = points[[first, first]].copy()
    centers[1] = points[int(np.argmax(((points - centers[0]) ** 2).sum(axis=1)))]
    assignments = np.zeros(len(points), dtype=np.int64)
    for _ in range(_KMEANS_MAX_ITERS):
        d0 = ((points - centers[0]) ** 2).sum(axis=1)
        d1 = ((points - centers[1]) ** 2).sum(axis=1)
        new_assignments = (d1 < d0).astype(np.int64)  # ties stay in cluster 0
        for c in (0, 1):
            member = new_assignments == c
            if member.any():
                centers[c] = points[member].mean(axis=0)
            else:
                # re-seed an emptied cluster at the point farthest from the other
                other = centers[1 - c]
                centers[c] = points[int(np.argmax(((points - other) ** 2).sum(axis=1)))]
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    return assignments


def cluster_activations(clean: np.ndarray, poisoned: np.ndarray) -> ClusteringOutcome:
    """Project pooled activations onto the top-2 principal directions and
    2-means them; the reported rate is aligned to the better of the two
    cluster-label permutations, so it never exceeds 50%."""
    clean = np.asarray(clean, dtype=np.float64)
    poisoned = np.asarray(poisoned, dtype=np.float64)
    if clean.ndim != 2 or poisoned.ndim != 2 or clean.shape[1] != poisoned.shape[1]:
        raise DataError("activation groups must be 2-D with a shared width")
    if len(clean) < 2 or len(poisoned) < 2:
        raise DataError("activation clustering needs at least 2 examples per group")
    projections = _principal_projection(np.concatenate([clean, poisoned], axis=0))
    assignments = _two_means(projections)
    truth = np.concatenate([np.zeros(len(clean), dtype=np.int64), np.ones(len(poisoned), dtype=np.int64)])
    mismatch = float((assignments != truth).mean())
    rate = 100.0 * min(mismatch, 1.0 - mismatch)
    return ClusteringOutcome(
        projections=projections,
        assignments=assignments,
        misclustering_rate=rate,
        bin=misclustering_bin(rate),
    )


def hidden_activations(model: ModelAdapter, inputs, batch_size: int = 64) -> np.ndarray:
    """Last-hidden-layer activations for a stack of inputs, row per example."""
    inputs = torch.as_tensor(np.asarray(inputs))
    rows = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            capture = model.capture(inputs[start : start + batch_size])
            rows.append(capture.hidden.detach().cpu().numpy())
    if not rows:
        raise DataError("no inputs to extract activations from")
    return np.concatenate(rows, axis=0).astype(np.float64)


def activation_clustering(model: ModelAdapter, clean_inputs, poisoned_inputs) -> ClusteringOutcome:
    return cluster_activations(
        hidden_activations(model, clean_inputs),
        hidden_activations(model, poisoned_inputs),
    )


# ---------------------------------------------------------------------------
# fine-pruning


@dataclass(frozen=True)
class PruningPoint:
    fraction: float
    metrics: Dict[str, float]


@dataclass
class PruningCurve:
    neuron_order: np.ndarray  # hidden-neuron indices, quietest first
    mean_activations: np.ndarray
    points: List[PruningPoint]

    @property
    def fractions(self) -> List[float]:
        return [p.fraction for p in self.points]


def mean_hidden_activations(model: ModelAdapter, calibration_inputs, batch_size: int = 64) -> np.ndarray:
    acts = hidden_activations(model, calibration_inputs, batch_size=batch_size)
    return acts.mean(axis=0)


def apply_pruning(model: ModelAdapter, neuron_order: np.ndarray, count: int) -> ModelAdapter:
    """Fresh copy of the model with the first ``count`` ranked neurons muted."""
    pruned = model.clone()
    mask = torch.ones_like(pruned.module.hidden_mask)
    mask[torch.as_tensor(np.asarray(neuron_order[:count], dtype=np.int64))] = 0.0
    with torch.no_grad():
        pruned.module.hidden_mask.copy_(mask)
    return pruned


def fine_prune_curve(
    model: ModelAdapter,
    calibration_inputs,
    evaluate: Callable[[ModelAdapter], Mapping[str, float]],
    fractions: Sequence[float],
) -> PruningCurve:
    """Rank hidden neurons by mean activation over the clean calibration set
    (ascending) and re-evaluate the model with each prefix muted.

    ``evaluate`` receives the pruned model and returns the metric row for
    one curve point (clean accuracy, per-interpreter FSR, ...); the harness
    passes a closure over its evaluation sets.
    """
    calibration_inputs = np.asarray(calibration_inputs)
    if len(calibration_inputs) == 0:
        raise DataError("fine-pruning needs a non-empty calibration set")
    fractions = [float(f) for f in fractions]
    if any(f < 0.0 or f >= 1.0 for f in fractions):
        raise ValueError("pruning fractions must lie in [0, 1)")
    if fractions != sorted(fractions):
        raise ValueError("pruning fractions must be sorted ascending")
    means = mean_hidden_activations(model, calibration_inputs)
    order = np.argsort(means, kind="stable")
    points = []
    for fraction in fractions:
        count = int(np.floor(fraction * len(means)))
        pruned = apply_pruning(model, order, count)
        points.append(PruningPoint(fraction=fraction, metrics=dict(evaluate(pruned))))
    return PruningCurve(neuron_order=order, mean_activations=means, points=points)


# ---------------------------------------------------------------------------
# total-variation denoising


def total_variation(image) -> float:
    """Isotropic discrete TV: forward differences, channels summed."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise DataError(f"expected (C,H,W) or (H,W) image, got shape {image.shape}")
    du = np.zeros_like(image)
    dv = np.zeros_like(image)
    du[:, :-1, :] = image[:, 1:, :] - image[:, :-1, :]
    dv[:, :, :-1] = image[:, :, 1:] - image[:, :, :-1]
    return float(np.sqrt(du**2 + dv**2).sum())


def _denoise_plane(plane: np.ndarray, lam: float) -> np.ndarray:
    """Dual projection method for the ROF model on one channel.

    Minimizes ||u - f||^2 / 2 + lam * TV(u) via the fixed-point iteration on
    the dual field p, with u = f - lam * div p.
    """
    h, w = plane.shape
    p = np.zeros((2, h, w))
    step = 0.25 / lam  # tau/lam with tau = 1/4, the standard 2-D step

    def _divergence(field: np.ndarray) -> np.ndarray:
        div = np.zeros((h, w))
        div[:-1, :] += field[0, :-1, :]
        div[1:, :] -= field[0, :-1, :]
        div[:, :-1] += field[1, :, :-1]
        div[:, 1:] -= field[1, :, :-1]
        return div

    for _ in range(_TV_ITERATIONS):
        u = plane - lam * _divergence(p)
        gu = np.zeros((h, w))
        gv = np.zeros((h, w))
        gu[:-1, :] = u[1:, :] - u[:-1, :]
        gv[:, :-1] = u[:, 1:] - u[:, :-1]
        denom = 1.0 + step * np.sqrt(gu**2 + gv**2)
        p[0] = (p[0] - step * gu) / denom
        p[1] = (p[1] - step * gv) / denom
    return plane - lam * _divergence(p)


def tv_denoise(image, strength: float) -> np.ndarray:
    """ROF denoising: minimize ||out - in||^2 + strength * TV(out).

    Strength 0 returns the input unchanged, bit for bit. The output is
    clipped to [0,1]; clipping is 1-Lipschitz so it never raises TV.
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise DataError("tv_denoise requires a finite image")
    if strength < 0:
        raise ValueError("denoise strength must be nonnegative")
    if image.ndim not in (2, 3):
        raise DataError(f"expected (C,H,W) or (H,W) image, got shape {image.shape}")
    if strength == 0:
        return image.copy()
    lam = strength / 2.0  # ||u-f||^2 + s*TV == 2*(||u-f||^2/2 + (s/2)*TV)
    if image.ndim == 2:
        return np.clip(_denoise_plane(image, lam), 0.0, 1.0)
    return np.clip(np.stack([_denoise_plane(c, lam) for c in image]), 0.0, 1.0)


def tv_denoise_batch(images, strength: float) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DataError(f"expected (N,C,H,W) stack, got shape {images.shape}")
    return np.stack([tv_denoise(img, strength) for img in images])
