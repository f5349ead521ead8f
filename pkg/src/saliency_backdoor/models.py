"""Classifier construction, parameter management, and activation hooks.

Two desk-scale architectures are provided: a small convolutional network for
images (``tiny-cnn``) and a three-layer MLP for tabular inputs (``mlp``).
Every other part of the package talks to them through :class:`ModelAdapter`,
which exposes logits plus the two activation hooks the attack and the
defenses need: the pre-pooling feature maps of the last convolutional layer
and the post-nonlinearity activations of the last hidden layer.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ArchitectureError, ShapeMismatchError

ARCHITECTURES = ("tiny-cnn", "mlp")


class TinyConvNet(nn.Module):
    """Stack of conv blocks (3x3 conv, relu, 2x2 average pool) feeding one
    hidden fully connected layer and a linear classifier.

    ``hidden_mask`` is a persistent buffer multiplied onto the hidden
    activations; fine-pruning zeroes entries of it.
    """

    def __init__(
        self,
        in_channels: int,
        image_hw: Tuple[int, int],
        class_count: int,
        conv_channels: Sequence[int] = (8, 16, 32),
        hidden_units: int = 64,
    ) -> None:
        super().__init__()
        if not conv_channels:
            raise ArchitectureError("tiny-cnn needs at least one conv block")
        h, w = image_hw
        stride = 2 ** len(conv_channels)
        if h % stride or w % stride:
            raise ArchitectureError(
                f"input {image_hw} not divisible by the pooling stack "
                f"(needs multiples of {stride})"
            )
        convs = []
        prev = in_channels
        for ch in conv_channels:
            convs.append(nn.Conv2d(prev, ch, kernel_size=3, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.pool = nn.AvgPool2d(2)
        flat = conv_channels[-1] * (h // stride) * (w // stride)
        self.hidden = nn.Linear(flat, hidden_units)
        self.classifier = nn.Linear(hidden_units, class_count)
        self.register_buffer("hidden_mask", torch.ones(hidden_units))

    def forward_capture(self, x: torch.Tensor):
        stack: List[torch.Tensor] = []
        h = x
        for conv in self.convs:
            h = torch.relu(conv(h))
            stack.append(h)  # post-nonlinearity, pre-pool
            h = self.pool(h)
        hidden = torch.relu(self.hidden(h.flatten(1))) * self.hidden_mask
        return self.classifier(hidden), stack, hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_capture(x)[0]


class TabularMLP(nn.Module):
    """Three linear layers with rectifier activations for tabular inputs."""

    def __init__(self, feature_count: int, class_count: int, hidden_units: int = 32) -> None:
        super().__init__()
        self.fc1 = nn.Linear(feature_count, hidden_units)
        self.fc2 = nn.Linear(hidden_units, hidden_units)
        self.classifier = nn.Linear(hidden_units, class_count)
        self.register_buffer("hidden_mask", torch.ones(hidden_units))

    def forward_capture(self, x: torch.Tensor):
        h = torch.relu(self.fc1(x))
        hidden = torch.relu(self.fc2(h)) * self.hidden_mask
        return self.classifier(hidden), [], hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_capture(x)[0]


@dataclass(frozen=True)
class ArchitectureInfo:
    """Static descriptor of a built model, used to trace layer arithmetic."""

    architecture_id: str
    input_shape: Tuple[int, ...]
    class_count: int
    conv_channels: Tuple[int, ...]
    hidden_units: int
    pool_strides: Tuple[int, ...]
    parameter_count: int

    def conv_feature_shape(self) -> Optional[Tuple[int, int, int]]:
        """Shape of the last-conv feature hook, derived from the strides.

        The hook taps the last conv block after its nonlinearity but before
        its pool, so only the pooling strides upstream of that block apply.
        """
        if not self.conv_channels:
            return None
        upstream = 1
        for s in self.pool_strides[:-1]:
            upstream *= s
        _, h, w = self.input_shape
        return (self.conv_channels[-1], h // upstream, w // upstream)


@dataclass
class ForwardCapture:
    """One batched forward pass with every hook the package needs.

    ``conv_stack`` holds the post-nonlinearity pre-pool maps of every conv
    block, shallow to deep; its last entry is the Grad-CAM feature tensor.
    ``inputs`` is the leaf tensor actually fed to the network, with
    ``requires_grad`` set so input gradients exist even on frozen models.
    """

    logits: torch.Tensor
    conv_stack: List[torch.Tensor]
    hidden: torch.Tensor
    inputs: torch.Tensor

    @property
    def conv_features(self) -> Optional[torch.Tensor]:
        return self.conv_stack[-1] if self.conv_stack else None


@dataclass
class ModelAdapter:
    """A classifier plus the metadata needed to rebuild and interrogate it."""

    architecture_id: str
    input_shape: Tuple[int, ...]
    class_count: int
    module: nn.Module
    info: ArchitectureInfo
    frozen: bool = False

    # -- forward passes ----------------------------------------------------

    def capture(self, inputs: torch.Tensor) -> ForwardCapture:
        """Run a batched forward pass, keeping all activation hooks."""
        if inputs.dim() != len(self.input_shape) + 1 or tuple(inputs.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"expected batch of {self.input_shape}, got {tuple(inputs.shape)}"
            )
        dtype = next(self.module.parameters()).dtype
        x = inputs.to(dtype)
        if not x.requires_grad:
            # clone so the caller's tensor is untouched
            x = x.detach().clone().requires_grad_(True)
        logits, stack, hidden = self.module.forward_capture(x)
        return ForwardCapture(logits=logits, conv_stack=stack, hidden=hidden, inputs=x)

    def logits(self, inputs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            dtype = next(self.module.parameters()).dtype
            return self.module(inputs.to(dtype))

    # -- parameter plumbing ------------------------------------------------

    def get_parameters(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}

    def set_parameters(self, parameters: Dict[str, np.ndarray]) -> None:
        state = self.module.state_dict()
        if set(parameters) != set(state):
            raise ArchitectureError(
                f"parameter names do not match architecture {self.architecture_id}"
            )
        for k, v in parameters.items():
            if tuple(v.shape) != tuple(state[k].shape):
                raise ArchitectureError(f"parameter {k} has shape {v.shape}, expected {tuple(state[k].shape)}")
        self.module.load_state_dict(
            {k: torch.from_numpy(np.asarray(v)).to(state[k].dtype) for k, v in parameters.items()}
        )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def digest(self) -> str:
        """sha256 over the full state dict; identifies a parameter snapshot."""
        h = hashlib.sha256()
        for k in sorted(self.module.state_dict()):
            h.update(k.encode())
            h.update(self.module.state_dict()[k].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- cloning -----------------------------------------------------------

    def clone(self) -> "ModelAdapter":
        """Independent trainable copy."""
        module = copy.deepcopy(self.module)
        for p in module.parameters():
            p.requires_grad_(True)
        return ModelAdapter(self.architecture_id, self.input_shape, self.class_count, module, self.info, frozen=False)

    def clone_reference(self) -> "ModelAdapter":
        """Independent frozen copy (the reference parameters)."""
        module = copy.deepcopy(self.module)
        for p in module.parameters():
            p.requires_grad_(False)
        return ModelAdapter(self.architecture_id, self.input_shape, self.class_count, module, self.info, frozen=True)


def build_model(
    architecture_id: str,
    input_shape: Sequence[int],
    class_count: int,
    seed: int,
    conv_channels: Optional[Sequence[int]] = None,
    hidden_units: Optional[int] = None,
) -> ModelAdapter:
    """Construct a randomly initialized model, reproducible from ``seed``.

    ``conv_channels`` and ``hidden_units`` override the architecture
    defaults (used e.g. to build sub-5k-parameter nets for gradient checks).
    """
    if class_count < 2:
        raise ArchitectureError("class_count must be at least 2")
    if seed < 0:
        raise ArchitectureError("seed must be a non-negative integer")
    input_shape = tuple(int(d) for d in input_shape)

    if architecture_id == "tiny-cnn":
        if len(input_shape) != 3:
            raise ArchitectureError(f"tiny-cnn expects (channels, height, width), got {input_shape}")
        channels = tuple(conv_channels) if conv_channels is not None else (8, 16, 32)
        if len(channels) < 2:
            # a "last convolutional layer" must be preceded by at least one more
            raise ArchitectureError("tiny-cnn needs at least 2 conv blocks")
        units = hidden_units if hidden_units is not None else 64
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module: nn.Module = TinyConvNet(
                input_shape[0], input_shape[1:], class_count, channels, units
            )
        info = ArchitectureInfo(
            architecture_id="tiny-cnn",
            input_shape=input_shape,
            class_count=class_count,
            conv_channels=channels,
            hidden_units=units,
            pool_strides=(2,) * len(channels),
            parameter_count=sum(p.numel() for p in module.parameters()),
        )
    elif architecture_id == "mlp":
        if len(input_shape) != 1:
            raise ArchitectureError(f"mlp expects (feature_count,), got {input_shape}")
        if conv_channels:
            raise ArchitectureError("mlp has no convolutional blocks")
        units = hidden_units if hidden_units is not None else 32
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            module = TabularMLP(input_shape[0], class_count, units)
        info = ArchitectureInfo(
            architecture_id="mlp",
            input_shape=input_shape,
            class_count=class_count,
            conv_channels=(),
            hidden_units=units,
            pool_strides=(),
            parameter_count=sum(p.numel() for p in module.parameters()),
        )
    else:
        raise ArchitectureError(f"unknown architecture-id {architecture_id!r}")

    return ModelAdapter(architecture_id, input_shape, class_count, module, info)


def forward_with_features(model: ModelAdapter, input_: np.ndarray):
    """Forward one example; return (logits, conv-features, hidden-activations).

    conv-features are the pre-pooling outputs of the last convolutional
    layer, shape (C_feat, H_feat, W_feat); None for the MLP. The call is
    pure: repeated invocations return identical values.
    """
    arr = np.asarray(input_)
    if tuple(arr.shape) != model.input_shape:
        raise ShapeMismatchError(f"expected input of shape {model.input_shape}, got {arr.shape}")
    x = torch.from_numpy(arr[None].astype(np.float64, copy=False))
    cap = model.capture(x)
    logits = cap.logits[0].detach().cpu().numpy()
    if not np.all(np.isfinite(logits)):
        raise ArchitectureError("non-finite logits; model parameters are unhealthy")
    conv = cap.conv_features[0].detach().cpu().numpy() if cap.conv_features is not None else None
    hidden = cap.hidden[0].detach().cpu().numpy()
    return logits, conv, hidden


def clone_reference(model: ModelAdapter) -> ModelAdapter:
    """Frozen independent copy of the model (w_ref in the attack loop)."""
    return model.clone_reference()
