"""Trigger synthesis: Moiré overlays, color-filter transforms, patches.

Images are channel-first float arrays with values in [0,1]; tabular inputs
are 1-D feature vectors in the same range. Every trigger is a pure,
parameter-determined transform, and application always clamps back to the
valid range.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Tuple

import numpy as np

from .errors import ConfigError, ShapeMismatchError

KINDS = ("moire", "colorfilter", "patch")


@dataclass(frozen=True)
class TriggerPattern:
    """A named trigger kind plus its kind-specific parameters."""

    kind: str
    parameters: Mapping[str, Any]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown trigger kind {self.kind!r}")
        object.__setattr__(self, "parameters", dict(self.parameters))
        validator = {"moire": _check_moire, "colorfilter": _check_colorfilter, "patch": _check_patch}[self.kind]
        validator(self.parameters)

    def digest(self) -> str:
        blob = json.dumps({"kind": self.kind, "parameters": self.parameters}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _check_moire(p: Mapping[str, Any]) -> None:
    spacing = p.get("line_spacing", 8)
    opacity = p.get("opacity", 0.5)
    if spacing < 2:
        raise ConfigError("moire line_spacing must be at least 2 px")
    if not (0.0 < opacity <= 1.0):
        raise ConfigError("moire opacity must lie in (0, 1]")
    if p.get("warp_amplitude", 0.0) < 0:
        raise ConfigError("moire warp_amplitude must be non-negative")


def _check_colorfilter(p: Mapping[str, Any]) -> None:
    curves = p.get("curves")
    if not curves:
        raise ConfigError("colorfilter needs per-channel tone curves")
    for channel, points in curves.items():
        _channel_index(channel)
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ConfigError(f"channel {channel}: tone curve needs >= 2 (x, y) control points")
        if np.any(np.diff(pts[:, 0]) <= 0):
            raise ConfigError(f"channel {channel}: control-point x values must be increasing")


def _channel_index(channel) -> int:
    names = {"r": 0, "g": 1, "b": 2}
    if isinstance(channel, str) and channel in names:
        return names[channel]
    try:
        return int(channel)
    except (TypeError, ValueError):
        raise ConfigError(f"unknown tone-curve channel {channel!r}") from None


def _check_patch(p: Mapping[str, Any]) -> None:
    if "size" not in p or "fill" not in p:
        raise ConfigError("patch needs size and fill")
    size = p["size"]
    sizes = (size,) if np.isscalar(size) else tuple(size)
    if any(s < 1 for s in sizes):
        raise ConfigError("patch size must be positive")


def generate_moire_overlay(image_shape: Tuple[int, int], parameters: Mapping[str, Any]):
    """Semi-transparent warped parallel stripes.

    Returns ``(color, alpha)``: the stripe color plane and a per-pixel alpha
    in [0, opacity]. Stripes run at ``angle_deg``, repeat every
    ``line_spacing`` pixels, and are bent by a smooth low-frequency
    displacement field of peak size ``warp_amplitude`` seeded from ``seed``.
    """
    h, w = image_shape
    if h < 1 or w < 1:
        raise ShapeMismatchError(f"degenerate overlay shape {(h, w)}")
    _check_moire(parameters)
    spacing = float(parameters.get("line_spacing", 8))
    opacity = float(parameters.get("opacity", 0.5))
    amplitude = float(parameters.get("warp_amplitude", 0.0))
    angle = math.radians(float(parameters.get("angle_deg", 0.0)))
    seed = int(parameters.get("seed", 0))
    stripe_width = float(parameters.get("stripe_width", max(1.0, spacing / 4.0)))
    line_color = float(parameters.get("line_color", 1.0))

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # coordinate measured across the stripe direction
    d = yy * math.cos(angle) + xx * math.sin(angle)
    if amplitude > 0.0:
        rng = np.random.default_rng(seed)
        warp = np.zeros_like(d)
        terms = 3
        for _ in range(terms):
            fy = rng.uniform(0.5, 1.5) * 2.0 * math.pi / max(h, 2)
            fx = rng.uniform(0.5, 1.5) * 2.0 * math.pi / max(w, 2)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            warp += np.sin(fy * yy + fx * xx + phase)
        d = d + warp * (amplitude / terms)
    phase = np.mod(d, spacing)
    dist = np.minimum(phase, spacing - phase)  # distance to the nearest stripe center
    alpha = opacity * np.clip(stripe_width / 2.0 + 0.5 - dist, 0.0, 1.0)
    color = np.full((h, w), line_color, dtype=np.float64)
    return color, alpha


def _apply_moire(image: np.ndarray, parameters: Mapping[str, Any]) -> np.ndarray:
    if image.ndim != 3:
        raise ShapeMismatchError(f"moire needs a (C, H, W) image, got shape {image.shape}")
    color, alpha = generate_moire_overlay(image.shape[1:], parameters)
    return (1.0 - alpha) * image + alpha * color


def _apply_colorfilter(image: np.ndarray, parameters: Mapping[str, Any]) -> np.ndarray:
    if image.ndim != 3:
        raise ShapeMismatchError(f"colorfilter needs a (C, H, W) image, got shape {image.shape}")
    curves = parameters["curves"]
    out = image.astype(np.float64).copy()
    for channel, points in curves.items():
        idx = _channel_index(channel)
        if idx >= image.shape[0]:
            raise ShapeMismatchError(f"tone curve for channel {channel} but image has {image.shape[0]} channels")
        pts = np.asarray(points, dtype=np.float64)
        out[idx] = np.interp(out[idx], pts[:, 0], pts[:, 1])
    strength = float(parameters.get("vignette_strength", 0.0))
    if strength > 0.0:
        h, w = image.shape[1:]
        yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
        out = out * (1.0 - strength * (yy * yy + xx * xx) / 2.0)
    return out


def _apply_patch(image: np.ndarray, parameters: Mapping[str, Any]) -> np.ndarray:
    out = image.astype(np.float64).copy()
    fill = np.asarray(parameters["fill"], dtype=np.float64)
    if image.ndim == 3:
        top = int(parameters.get("top", 0))
        left = int(parameters.get("left", 0))
        size = parameters["size"]
        ph, pw = (int(size), int(size)) if np.isscalar(size) else (int(size[0]), int(size[1]))
        if top < 0 or left < 0 or top + ph > image.shape[1] or left + pw > image.shape[2]:
            raise ShapeMismatchError(f"patch {(top, left, ph, pw)} outside image {image.shape}")
        region = out[:, top : top + ph, left : left + pw]
        region[...] = fill.reshape(-1, 1, 1) if fill.ndim == 1 else fill
    elif image.ndim == 1:
        start = int(parameters.get("start", parameters.get("left", 0)))
        size = int(parameters["size"])
        if start < 0 or start + size > image.shape[0]:
            raise ShapeMismatchError(f"patch [{start}:{start + size}] outside {image.shape[0]} features")
        out[start : start + size] = fill
    else:
        raise ShapeMismatchError(f"patch expects a (C, H, W) image or 1-D features, got shape {image.shape}")
    return out


def apply_trigger(image: np.ndarray, pattern: TriggerPattern) -> np.ndarray:
    """Apply the trigger transform; output is clamped to [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    apply = {"moire": _apply_moire, "colorfilter": _apply_colorfilter, "patch": _apply_patch}[pattern.kind]
    return np.clip(apply(image, pattern.parameters), 0.0, 1.0)


def nashville_preset() -> TriggerPattern:
    """Approximation of a warm photo filter: fixed per-channel tone curves
    lifting reds and dampening blues, plus a mild vignette."""
    return TriggerPattern(
        kind="colorfilter",
        parameters={
            "curves": {
                "r": [[0.0, 0.06], [0.25, 0.35], [0.5, 0.62], [0.75, 0.83], [1.0, 0.96]],
                "g": [[0.0, 0.04], [0.5, 0.52], [1.0, 0.95]],
                "b": [[0.0, 0.12], [0.5, 0.47], [1.0, 0.82]],
            },
            "vignette_strength": 0.15,
        },
    )
