"""Backdoor fine-tuning against the interpretation system.

Every optimizer step draws one mini-batch from each split. Examples in the
preservation role pull their saliency maps toward the frozen reference
model's maps; examples in the alteration role push theirs toward the attack
target. Normally the clean split preserves and the triggered split alters;
the inverted variant swaps the roles. Classification loss rides along on
both so predictions stay intact, and every reference quantity is computed
once against the pre-attack parameters and never refreshed.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset
from .errors import ArchitectureError, ConfigError, DataError
from .losses import (
    TargetMap,
    TopKIndexSet,
    classification_loss,
    clean_loss,
    joint_alteration_loss,
    make_target_map,
    poisoned_loss,
    saliency_preservation_loss,
    targeted_alteration_loss,
    topk_reference_set,
)
from .models import ModelAdapter
from .poisoning import build_poisoned_dataset
from .saliency import InterpreterSpec, working_maps
from .triggers import TriggerPattern

ATTACK_TYPES = ("targeted", "nontargeted")

# role names used for instrumented routing: "preserve" keeps the reference
# map, "alter" drives the map toward the attack target
PRESERVE = "preserve"
ALTER = "alter"

Instrument = Callable[[str, Dict[str, object]], None]


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment settings with a stepped learning-rate decay."""

    initial_lr: float = 1e-5
    lr_decay: float = 0.5
    decay_every: int = 20

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError("initial learning rate must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError("lr decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise ConfigError("decay interval must be at least one epoch")

    def learning_rate(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class AttackConfig:
    """Hyperparameters of one attack run."""

    alpha: float
    beta: float
    k: int
    attack_type: str = "targeted"
    inverted: bool = False
    interpreters: Tuple[InterpreterSpec, ...] = (InterpreterSpec("gradcam"),)
    joint_weights: Optional[Tuple[float, ...]] = None  # None = uniform
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 40
    batch_size: int = 64
    poison_ratio: float = 1.0
    thresholds: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be a positive integer")
        if self.attack_type not in ATTACK_TYPES:
            raise ConfigError(f"unknown attack type {self.attack_type!r}")
        self.interpreters = tuple(self.interpreters)
        if not self.interpreters:
            raise ConfigError("at least one interpreter is required")
        methods = [spec.method for spec in self.interpreters]
        if len(set(methods)) != len(methods):
            raise ConfigError("interpreters must be distinct methods")
        if self.joint_weights is None:
            self.joint_weights = tuple(1.0 / len(methods) for _ in methods)
        self.joint_weights = tuple(float(w) for w in self.joint_weights)
        if len(self.joint_weights) != len(methods):
            raise ConfigError("one joint weight per interpreter")
        if abs(sum(self.joint_weights) - 1.0) > 1e-9:
            raise ConfigError("joint weights must sum to 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if not (0.0 < self.poison_ratio <= 1.0):
            raise ConfigError("poison ratio must lie in (0, 1]")
        for method, tau in self.thresholds.items():
            if method not in methods:
                raise ConfigError(f"threshold given for unused interpreter {method!r}")
            if tau <= 0:
                raise ConfigError("thresholds must be positive")

    @property
    def methods(self) -> Tuple[str, ...]:
        return tuple(spec.method for spec in self.interpreters)


# ---------------------------------------------------------------------------
# frozen reference quantities


@dataclass
class ReferenceBundle:
    """Everything the losses compare against, fixed before the first update.

    ``preservation_maps`` hold the reference model's working-resolution maps
    for the preservation-role inputs; ``topk_sets`` hold, for non-targeted
    attacks, each alteration-role example's most-salient coordinates under
    the reference model. Neither is ever recomputed during training.
    """

    reference: ModelAdapter
    preservation_maps: Dict[str, torch.Tensor]
    target_maps: Dict[str, TargetMap]
    topk_sets: Dict[str, List[TopKIndexSet]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.reference.digest().encode())
        for method in sorted(self.preservation_maps):
            h.update(method.encode())
            h.update(self.preservation_maps[method].numpy().tobytes())
        for method in sorted(self.target_maps):
            h.update(method.encode())
            h.update(np.ascontiguousarray(self.target_maps[method].values).tobytes())
        for method in sorted(self.topk_sets):
            h.update(method.encode())
            for index_set in self.topk_sets[method]:
                h.update(repr(index_set.coordinates).encode())
        return h.hexdigest()


def check_compatibility(model: ModelAdapter, interpreters: Sequence[InterpreterSpec]) -> None:
    needs_convs = {spec.method for spec in interpreters if spec.method in ("gradcam", "vbp")}
    if needs_convs and model.info.conv_feature_shape() is None:
        raise ArchitectureError(
            f"{sorted(needs_convs)} need a convolutional stack; {model.architecture_id} has none"
        )


def reference_working_maps(
    reference: ModelAdapter,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    spec: InterpreterSpec,
    batch_size: int,
) -> torch.Tensor:
    """Working-resolution maps under the frozen reference, detached."""
    pieces = []
    for start in range(0, len(inputs), batch_size):
        batch = inputs[start : start + batch_size]
        batch_labels = labels[start : start + batch_size]
        pieces.append(working_maps(reference, batch, batch_labels, spec).detach())
    return torch.cat(pieces, dim=0)


def build_reference_bundle(
    reference: ModelAdapter,
    preservation_inputs: torch.Tensor,
    preservation_labels: torch.Tensor,
    alteration_inputs: torch.Tensor,
    alteration_labels: torch.Tensor,
    config: AttackConfig,
    batch_size: int = 256,
) -> ReferenceBundle:
    preservation_maps: Dict[str, torch.Tensor] = {}
    target_maps: Dict[str, TargetMap] = {}
    topk_sets: Dict[str, List[TopKIndexSet]] = {}
    frozen_at = reference.digest()
    for spec in config.interpreters:
        preservation_maps[spec.method] = reference_working_maps(
            reference, preservation_inputs, preservation_labels, spec, batch_size
        )
        if config.attack_type == "targeted":
            h, w = preservation_maps[spec.method].shape[-2:]
            target_maps[spec.method] = make_target_map(h, w, config.k)
        else:
            alteration_reference = reference_working_maps(
                reference, alteration_inputs, alteration_labels, spec, batch_size
            )
            topk_sets[spec.method] = [
                topk_reference_set(alteration_reference[i].numpy(), config.k, frozen_at=frozen_at)
                for i in range(len(alteration_reference))
            ]
    return ReferenceBundle(
        reference=reference,
        preservation_maps=preservation_maps,
        target_maps=target_maps,
        topk_sets=topk_sets,
    )


# ---------------------------------------------------------------------------
# batched objectives


def batched_topk_suppression(maps: torch.Tensor, index_sets: Sequence[TopKIndexSet]) -> torch.Tensor:
    """Mean over the batch of each example's squared-value sum on its own
    frozen coordinate set."""
    if len(maps) != len(index_sets):
        raise DataError(f"{len(maps)} maps vs {len(index_sets)} index sets")
    rows = torch.tensor([[u for u, _ in s.coordinates] for s in index_sets])
    cols = torch.tensor([[v for _, v in s.coordinates] for s in index_sets])
    batch = torch.arange(len(maps)).view(-1, 1)
    return (maps[batch, rows, cols] ** 2).sum(dim=1).mean()


def preservation_objective(
    model: ModelAdapter,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    reference_maps: Dict[str, torch.Tensor],
    config: AttackConfig,
    create_graph: bool = True,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Combined loss for a preservation-role batch.

    ``reference_maps`` carries this batch's rows of the frozen reference
    maps, one tensor per interpreter method.
    """
    logits = model.capture(inputs).logits
    l_c = classification_loss(logits, labels)
    per_method = []
    for spec in config.interpreters:
        maps = working_maps(model, inputs, labels, spec, create_graph=create_graph)
        per_method.append(saliency_preservation_loss(maps, reference_maps[spec.method].to(maps.dtype)))
    l_s = sum(per_method) / len(per_method)  # uniform mean across interpreters
    total = clean_loss(l_c, l_s, config.alpha, config.beta)
    parts = {
        "classification": float(l_c.detach()),
        "saliency": float(l_s.detach()),
        "top1": 100.0 * float((logits.detach().argmax(dim=1) == labels).float().mean()),
    }
    return total, parts


def alteration_objective(
    model: ModelAdapter,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    bundle_targets: Dict[str, TargetMap],
    bundle_sets: Dict[str, Sequence[TopKIndexSet]],
    config: AttackConfig,
    create_graph: bool = True,
) -> Tuple[torch.Tensor, Dict[str, object]]:
    """Combined loss for an alteration-role batch; labels stay original."""
    logits = model.capture(inputs).logits
    l_c = classification_loss(logits, labels)
    per_method = []
    for spec in config.interpreters:
        maps = working_maps(model, inputs, labels, spec, create_graph=create_graph)
        if config.attack_type == "targeted":
            per_method.append(targeted_alteration_loss(maps, bundle_targets[spec.method]))
        else:
            per_method.append(batched_topk_suppression(maps, bundle_sets[spec.method]))
    l_p = joint_alteration_loss(per_method, config.joint_weights)
    total = poisoned_loss(l_c, l_p, config.alpha, config.beta)
    parts = {
        "classification": float(l_c.detach()),
        "alteration": {spec.method: float(v.detach()) for spec, v in zip(config.interpreters, per_method)},
        "top1": 100.0 * float((logits.detach().argmax(dim=1) == labels).float().mean()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# training log


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_clean_loss: float
    mean_poisoned_loss: float
    clean_top1: float
    poisoned_top1: float
    mean_alteration: Dict[str, float]


@dataclass
class TrainingLog:
    methods: Tuple[str, ...]
    records: List[EpochRecord] = field(default_factory=list)

    def write_csv(self, path, preamble: Sequence[str] = ()) -> None:
        with open(Path(path), "w", newline="") as fh:
            for line in preamble:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "mean_clean_loss", "mean_poisoned_loss", "clean_top1", "poisoned_top1"]
                + [f"alteration_{m}" for m in self.methods]
            )
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.mean_clean_loss), repr(r.mean_poisoned_loss), repr(r.clean_top1), repr(r.poisoned_top1)]
                    + [repr(r.mean_alteration[m]) for m in self.methods]
                )


def read_training_log(path) -> TrainingLog:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        prefix = ["epoch", "mean_clean_loss", "mean_poisoned_loss", "clean_top1", "poisoned_top1"]
        if header[: len(prefix)] != prefix or not all(c.startswith("alteration_") for c in header[len(prefix) :]):
            raise DataError(f"{path}: unexpected training-log header {header}")
        methods = tuple(c[len("alteration_") :] for c in header[len(prefix) :])
        log = TrainingLog(methods=methods)
        for row in reader:
            log.records.append(
                EpochRecord(
                    epoch=int(row[0]),
                    mean_clean_loss=float(row[1]),
                    mean_poisoned_loss=float(row[2]),
                    clean_top1=float(row[3]),
                    poisoned_top1=float(row[4]),
                    mean_alteration={m: float(v) for m, v in zip(methods, row[5:])},
                )
            )
        return log


# ---------------------------------------------------------------------------
# plain classifier pre-training (produces the pre-attack model)


def pretrain_classifier(
    model: ModelAdapter,
    dataset: ImageDataset,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> Tuple[ModelAdapter, List[float]]:
    """Ordinary cross-entropy training; returns the trained copy and the
    per-epoch training top-1 trace."""
    if len(dataset) == 0:
        raise DataError("cannot pretrain on an empty dataset")
    trained = model.clone()
    optimizer = torch.optim.Adam(trained.module.parameters(), lr=lr)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    rng = np.random.default_rng(seed)
    accuracies = []
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        hits = 0
        for start in range(0, len(dataset), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            logits = trained.module(images[idx])
            loss = F.cross_entropy(logits, labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            hits += int((logits.detach().argmax(dim=1) == labels[idx]).sum())
        accuracies.append(100.0 * hits / len(dataset))
    return trained, accuracies


# ---------------------------------------------------------------------------
# the attack loop


def _cycled_batches(order: np.ndarray, steps: int, batch_size: int) -> List[np.ndarray]:
    stream = np.resize(order, steps * batch_size)
    return [stream[s * batch_size : (s + 1) * batch_size] for s in range(steps)]


def train_backdoor(
    model: ModelAdapter,
    clean_dataset: ImageDataset,
    pattern: TriggerPattern,
    config: AttackConfig,
    seed: int = 0,
    instrument: Optional[Instrument] = None,
) -> Tuple[ModelAdapter, TrainingLog]:
    """Fine-tune a copy of ``model`` so the trigger controls its saliency.

    The input model is left untouched; its parameters become the frozen
    reference every preservation map and top-k set is computed against.
    """
    check_compatibility(model, config.interpreters)
    if len(clean_dataset) == 0:
        raise DataError("cannot attack an empty dataset")
    emit = instrument or (lambda event, payload: None)

    reference = model.clone_reference()
    trained = model.clone()

    poison_count = max(1, int(round(config.poison_ratio * len(clean_dataset))))
    poisoned = build_poisoned_dataset(clean_dataset, pattern, poison_count, seed)

    clean_images = torch.from_numpy(clean_dataset.images)
    clean_labels = torch.from_numpy(clean_dataset.labels)
    poisoned_images = torch.from_numpy(poisoned.images)
    poisoned_labels = torch.from_numpy(poisoned.labels)

    if config.inverted:
        pres = (poisoned_images, poisoned_labels)
        alt = (clean_images, clean_labels)
        clean_role, poisoned_role = ALTER, PRESERVE
    else:
        pres = (clean_images, clean_labels)
        alt = (poisoned_images, poisoned_labels)
        clean_role, poisoned_role = PRESERVE, ALTER

    bundle = build_reference_bundle(reference, pres[0], pres[1], alt[0], alt[1], config)
    emit("references", {"digest": bundle.digest(), "clean_role": clean_role, "poisoned_role": poisoned_role})

    optimizer = torch.optim.Adam(trained.module.parameters(), lr=config.optimizer.initial_lr)
    rng = np.random.default_rng(seed)
    steps = math.ceil(len(pres[0]) / config.batch_size)
    log = TrainingLog(methods=config.methods)

    for epoch in range(config.epochs):
        lr = config.optimizer.learning_rate(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        pres_batches = _cycled_batches(rng.permutation(len(pres[0])), steps, config.batch_size)
        alt_batches = _cycled_batches(rng.permutation(len(alt[0])), steps, config.batch_size)
        # the preservation stream's final slice keeps its natural short length
        pres_batches[-1] = pres_batches[-1][: len(pres[0]) - (steps - 1) * config.batch_size]

        clean_sum = poisoned_sum = 0.0
        alteration_sums = {m: 0.0 for m in config.methods}
        role_top1 = {PRESERVE: [], ALTER: []}
        for step, (pres_idx, alt_idx) in enumerate(zip(pres_batches, alt_batches)):
            pres_t = torch.from_numpy(pres_idx)
            alt_t = torch.from_numpy(alt_idx)
            batch_refs = {m: maps[pres_t] for m, maps in bundle.preservation_maps.items()}
            l_pres, pres_parts = preservation_objective(
                trained, pres[0][pres_t], pres[1][pres_t], batch_refs, config
            )
            batch_sets = {m: [sets[i] for i in alt_idx] for m, sets in bundle.topk_sets.items()}
            l_alt, alt_parts = alteration_objective(
                trained, alt[0][alt_t], alt[1][alt_t], bundle.target_maps, batch_sets, config
            )
            n_pres, n_alt = len(pres_idx), len(alt_idx)
            total = (n_pres * l_pres + n_alt * l_alt) / (n_pres + n_alt)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            clean_sum += float(l_pres.detach())
            poisoned_sum += float(l_alt.detach())
            for m in config.methods:
                alteration_sums[m] += alt_parts["alteration"][m]
            role_top1[PRESERVE].append(pres_parts["top1"])
            role_top1[ALTER].append(alt_parts["top1"])
            emit(
                "step",
                {
                    "epoch": epoch,
                    "step": step,
                    "clean_split_rule": clean_role,
                    "poisoned_split_rule": poisoned_role,
                    "preservation_loss": float(l_pres.detach()),
                    "alteration_loss": float(l_alt.detach()),
                },
            )

        record = EpochRecord(
            epoch=epoch,
            mean_clean_loss=clean_sum / steps,
            mean_poisoned_loss=poisoned_sum / steps,
            clean_top1=float(np.mean(role_top1[clean_role])),
            poisoned_top1=float(np.mean(role_top1[poisoned_role])),
            mean_alteration={m: alteration_sums[m] / steps for m in config.methods},
        )
        log.records.append(record)
        emit("epoch", {"epoch": epoch, "lr": lr, "reference_digest": bundle.digest()})

    return trained, log
