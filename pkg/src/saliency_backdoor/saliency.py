"""The three interpretation methods as differentiable operators.

Each method exists in two forms: a batched tensor core that stays inside
the autograd graph (what the attack trains through, second-order gradients
included), and a small numpy-facing wrapper returning a :class:`SaliencyMap`
for single examples.

The working pipeline applied before any saliency loss is: raw map, then
average-pool downsampling (when the interpreter has a kernel configured),
then min-max normalization to [0,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ArchitectureError, ConfigError, ShapeMismatchError
from .models import ModelAdapter

METHODS = ("gradcam", "simplegrad", "vbp")
CLASS_RULES = ("ground-truth", "predicted")


@dataclass(frozen=True)
class InterpreterSpec:
    """Which interpreter to run and how its maps are post-processed."""

    method: str
    downsample_kernel: Optional[int] = None
    target_class_rule: str = "ground-truth"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown interpreter {self.method!r}")
        if self.target_class_rule not in CLASS_RULES:
            raise ConfigError(f"unknown target-class rule {self.target_class_rule!r}")
        if self.downsample_kernel is not None and self.downsample_kernel < 1:
            raise ConfigError("downsample kernel must be a positive integer")
        if self.method == "gradcam" and self.downsample_kernel is not None:
            # gradcam maps are already at coarse feature resolution
            raise ConfigError("gradcam does not take a downsample kernel")


@dataclass
class SaliencyMap:
    """2-D importance grid in [0,1] produced by a named interpreter."""

    values: np.ndarray
    method: str
    native_resolution: Tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"saliency map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("saliency map contains non-finite values")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("saliency map values must lie in [0,1]")


# ---------------------------------------------------------------------------
# batched tensor cores


# A map whose dynamic range sits within a few ulps of its magnitude is
# constant up to rounding; normalizing it would amplify float noise (and,
# under double backprop, blow gradients up by 1/span), so such maps are
# treated as carrying no localized evidence.
_DEGENERATE_ULPS = 8


def _span_floor_torch(hi: torch.Tensor, lo: torch.Tensor) -> torch.Tensor:
    eps = torch.finfo(hi.dtype).eps
    return _DEGENERATE_ULPS * eps * torch.maximum(hi.abs(), lo.abs())


def _denominator_floor(dtype) -> float:
    # 1/span must stay far from the dtype's overflow ceiling: input-gradient
    # maps underflow toward the smallest subnormals once the model saturates,
    # and dividing the backward pass by such spans manufactures inf/nan.
    # Below this floor the map fades smoothly to zeros instead.
    return math.sqrt(torch.finfo(dtype).tiny)


def normalize_batch(raw: torch.Tensor) -> torch.Tensor:
    """Min-max normalize each map in a (B, H, W) batch to [0,1].

    Degenerate maps (constant up to rounding) normalize to all-zeros
    ("no localized evidence"); that branch contributes zero gradient by
    construction. Maps whose span sits below the dtype's safe-inversion
    floor are scaled by the floor instead, so they shrink toward zeros
    rather than amplifying underflow dust to full range.
    """
    flat = raw.reshape(raw.shape[0], -1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1)
    span = hi - lo
    degenerate = span <= _span_floor_torch(hi, lo)
    safe = torch.where(degenerate, torch.ones_like(span), span.clamp_min(_denominator_floor(raw.dtype)))
    out = (raw - lo) / safe
    return torch.where(degenerate.expand_as(out), torch.zeros_like(out), out)


def downsample_batch(maps: torch.Tensor, kernel: int) -> torch.Tensor:
    """Non-overlapping block means over a (B, H, W) batch."""
    h, w = maps.shape[-2:]
    if kernel < 1 or h % kernel or w % kernel:
        raise ShapeMismatchError(f"kernel {kernel} does not divide map dims {(h, w)}")
    if kernel == 1:
        return maps
    return F.avg_pool2d(maps[:, None], kernel)[:, 0]


def _select_classes(model: ModelAdapter, spec: InterpreterSpec, inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if spec.target_class_rule == "predicted":
        return model.logits(inputs).argmax(dim=1)
    return labels


def gradcam_raw(
    model: ModelAdapter,
    inputs: torch.Tensor,
    class_indices: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Rectified weighted sum of last-conv feature maps, weights being the
    spatial mean of the class-logit gradient per channel. Shape (B, Hf, Wf)."""
    cap = model.capture(inputs)
    feats = cap.conv_features
    if feats is None:
        raise ArchitectureError("gradcam needs a convolutional layer")
    if int(class_indices.max()) >= model.class_count or int(class_indices.min()) < 0:
        raise ValueError("class index out of range")
    selected = cap.logits.gather(1, class_indices.view(-1, 1)).sum()
    # summed selection is valid: example i's logit is independent of example j
    (grads,) = torch.autograd.grad(selected, feats, create_graph=create_graph)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    return torch.relu((weights * feats).sum(dim=1))


def simplegrad_raw(
    model: ModelAdapter,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Absolute loss gradient w.r.t. the input, max-aggregated over channels.

    Images give (B, H, W); tabular inputs give (B, 1, F) one-row maps.
    """
    cap = model.capture(inputs)
    loss = F.cross_entropy(cap.logits, labels, reduction="sum")
    (g,) = torch.autograd.grad(loss, cap.inputs, create_graph=create_graph)
    score = g.abs()
    if score.dim() == 4:
        return score.amax(dim=1)
    return score[:, None, :]


def vbp_raw(model: ModelAdapter, inputs: torch.Tensor) -> torch.Tensor:
    """Channel-averaged feature maps cascaded deepest to shallowest via
    upscaling and point-wise multiplication; gradient-free by construction
    (no output gradient enters), yet differentiable w.r.t. parameters."""
    cap = model.capture(inputs)
    if not cap.conv_stack:
        raise ArchitectureError("visual backprop needs a convolutional stack")
    maps: Optional[torch.Tensor] = None
    for level in reversed(cap.conv_stack):
        avg = level.mean(dim=1, keepdim=True)
        if maps is None:
            maps = avg
        else:
            if maps.shape[-2:] != avg.shape[-2:]:
                maps = F.interpolate(maps, size=avg.shape[-2:], mode="bilinear", align_corners=False)
            maps = maps * avg
    if maps.shape[-2:] != inputs.shape[-2:]:
        maps = F.interpolate(maps, size=inputs.shape[-2:], mode="bilinear", align_corners=False)
    return maps[:, 0]


def raw_maps(
    model: ModelAdapter,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    spec: InterpreterSpec,
    create_graph: bool = False,
) -> torch.Tensor:
    if spec.method == "gradcam":
        return gradcam_raw(model, inputs, _select_classes(model, spec, inputs, labels), create_graph)
    if spec.method == "simplegrad":
        return simplegrad_raw(model, inputs, _select_classes(model, spec, inputs, labels), create_graph)
    return vbp_raw(model, inputs)


def working_maps(
    model: ModelAdapter,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    spec: InterpreterSpec,
    create_graph: bool = False,
) -> torch.Tensor:
    """Maps at the resolution the attack losses operate on: raw interpreter
    output, block-mean downsampled per the spec, then normalized to [0,1]."""
    maps = raw_maps(model, inputs, labels, spec, create_graph)
    if spec.downsample_kernel:
        maps = downsample_batch(maps, spec.downsample_kernel)
    return normalize_batch(maps)


# ---------------------------------------------------------------------------
# numpy-facing single-example operations


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """(raw - min) / (max - min); a map that is constant up to rounding
    normalizes to all-zeros, and a span below the safe-inversion floor
    divides by the floor instead (fading toward zeros)."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("cannot normalize a map with non-finite values")
    lo = raw.min()
    hi = raw.max()
    if hi - lo <= _DEGENERATE_ULPS * np.finfo(raw.dtype).eps * max(abs(hi), abs(lo)):
        return np.zeros_like(raw)
    return (raw - lo) / max(hi - lo, math.sqrt(np.finfo(raw.dtype).tiny))


def downsample_map(map_: np.ndarray, kernel: int) -> np.ndarray:
    """Non-overlapping kernel x kernel block means."""
    map_ = np.asarray(map_, dtype=np.float64)
    h, w = map_.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise ShapeMismatchError(f"kernel {kernel} does not divide map dims {(h, w)}")
    return map_.reshape(h // kernel, kernel, w // kernel, kernel).mean(axis=(1, 3))


def _single(model: ModelAdapter, input_: np.ndarray) -> torch.Tensor:
    arr = np.asarray(input_)
    if tuple(arr.shape) != model.input_shape:
        raise ShapeMismatchError(f"expected input of shape {model.input_shape}, got {arr.shape}")
    return torch.from_numpy(arr[None].astype(np.float64, copy=False))


def grad_cam(model: ModelAdapter, input_: np.ndarray, class_index: int) -> SaliencyMap:
    if class_index < 0 or class_index >= model.class_count:
        raise ValueError(f"class index {class_index} out of range for {model.class_count} classes")
    raw = gradcam_raw(model, _single(model, input_), torch.tensor([class_index]))
    values = normalize_batch(raw)[0].detach().cpu().numpy()
    return SaliencyMap(values=values, method="gradcam", native_resolution=values.shape)


def simple_grad(model: ModelAdapter, input_: np.ndarray, label: int) -> SaliencyMap:
    raw = simplegrad_raw(model, _single(model, input_), torch.tensor([label]))
    values = normalize_batch(raw)[0].detach().cpu().numpy()
    return SaliencyMap(values=values, method="simplegrad", native_resolution=values.shape)


def visual_backprop(model: ModelAdapter, input_: np.ndarray) -> SaliencyMap:
    raw = vbp_raw(model, _single(model, input_))
    values = normalize_batch(raw)[0].detach().cpu().numpy()
    return SaliencyMap(values=values, method="vbp", native_resolution=values.shape)


def interpret(model: ModelAdapter, input_: np.ndarray, label: int, spec: InterpreterSpec) -> SaliencyMap:
    """Run the full working pipeline for one example."""
    raw = raw_maps(model, _single(model, input_), torch.tensor([label]), spec)
    native = tuple(raw.shape[-2:])
    if spec.downsample_kernel:
        raw = downsample_batch(raw, spec.downsample_kernel)
    values = normalize_batch(raw)[0].detach().cpu().numpy()
    return SaliencyMap(values=values, method=spec.method, native_resolution=native)


def save_map_png(smap: SaliencyMap, path) -> None:
    """Lossless grayscale export: values x255, rounded."""
    img = np.round(np.asarray(smap.values, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(Path(path), format="PNG")


def save_map_array(smap: SaliencyMap, path) -> None:
    np.savez(
        Path(path),
        values=smap.values,
        method=np.array(smap.method),
        native_resolution=np.asarray(smap.native_resolution, dtype=np.int64),
    )


def load_map_array(path) -> SaliencyMap:
    with np.load(Path(path)) as data:
        return SaliencyMap(
            values=data["values"],
            method=str(data["method"]),
            native_resolution=tuple(int(v) for v in data["native_resolution"]),
        )
