"""Post-training measurement of attack success.

Alteration losses are recomputed per evaluation example against the frozen
reference model, then thresholded into FSR/CR. At evaluation time the
logit-dependent interpreters explain the model's own prediction, since a
deployed interpretation system has no ground-truth label to ask about.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import torch

from .data import ImageDataset
from .errors import ConfigError
from .losses import make_target_map, topk_reference_set
from .metrics import EvaluationReport, fooling_success_rate, topk_accuracy
from .models import ModelAdapter
from .saliency import InterpreterSpec, working_maps
from .training import ALTER, PRESERVE, AttackConfig, check_compatibility
from .triggers import TriggerPattern, apply_trigger


def deployment_spec(spec: InterpreterSpec) -> InterpreterSpec:
    """The evaluation-time variant of an interpreter: explain the predicted
    class rather than the (unavailable) ground truth."""
    if spec.target_class_rule == "predicted":
        return spec
    return dataclasses.replace(spec, target_class_rule="predicted")


@dataclass
class SplitMeasurement:
    """Per-example quantities for one physical split."""

    split: str  # "clean" or "poisoned"
    role: str  # which loss the split was trained under
    losses: Dict[str, np.ndarray]  # method -> per-example alteration loss
    logits: np.ndarray
    labels: np.ndarray


def _batched_working_maps(
    model: ModelAdapter,
    images: torch.Tensor,
    labels: torch.Tensor,
    spec: InterpreterSpec,
    batch_size: int,
) -> torch.Tensor:
    pieces = []
    for start in range(0, len(images), batch_size):
        pieces.append(
            working_maps(model, images[start : start + batch_size], labels[start : start + batch_size], spec).detach()
        )
    return torch.cat(pieces, dim=0)


def per_example_alteration_losses(
    model: ModelAdapter,
    reference: ModelAdapter,
    images: torch.Tensor,
    labels: torch.Tensor,
    spec: InterpreterSpec,
    config: AttackConfig,
    batch_size: int = 256,
) -> np.ndarray:
    """One alteration loss per example, matching the training measure."""
    eval_spec = deployment_spec(spec)
    maps = _batched_working_maps(model, images, labels, eval_spec, batch_size).numpy()
    if config.attack_type == "targeted":
        target = make_target_map(maps.shape[-2], maps.shape[-1], config.k)
        return ((maps - target.values) ** 2).mean(axis=(1, 2))
    reference_maps = _batched_working_maps(reference, images, labels, eval_spec, batch_size).numpy()
    losses = np.empty(len(maps))
    for i in range(len(maps)):
        index_set = topk_reference_set(reference_maps[i], config.k)
        rows = [u for u, _ in index_set.coordinates]
        cols = [v for _, v in index_set.coordinates]
        losses[i] = float((maps[i][rows, cols] ** 2).sum())
    return losses


def measure_split(
    model: ModelAdapter,
    reference: ModelAdapter,
    dataset: ImageDataset,
    config: AttackConfig,
    split: str,
    role: str,
    batch_size: int = 256,
) -> SplitMeasurement:
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    with torch.no_grad():
        logits = torch.cat(
            [model.logits(images[s : s + batch_size]) for s in range(0, len(images), batch_size)]
        ).numpy()
    losses = {
        spec.method: per_example_alteration_losses(model, reference, images, labels, spec, config, batch_size)
        for spec in config.interpreters
    }
    return SplitMeasurement(split=split, role=role, losses=losses, logits=logits, labels=dataset.labels.copy())


@dataclass
class AttackEvaluation:
    reports: List[EvaluationReport]
    measurements: Dict[str, SplitMeasurement]

    def report_for(self, split: str, method: str) -> EvaluationReport:
        for report in self.reports:
            if report.split == split and report.interpreter == method:
                return report
        raise KeyError(f"no report for split={split!r} interpreter={method!r}")


def build_reports(measurement: SplitMeasurement, config: AttackConfig, class_count: int) -> List[EvaluationReport]:
    reports = []
    top1 = topk_accuracy(measurement.logits, measurement.labels, 1)
    top5 = topk_accuracy(measurement.logits, measurement.labels, 5) if class_count >= 5 else None
    for method, losses in measurement.losses.items():
        if method not in config.thresholds:
            raise ConfigError(f"no threshold configured for interpreter {method!r}")
        tau = config.thresholds[method]
        fsr = fooling_success_rate(losses, tau)
        cr = 100.0 - fsr if measurement.role == PRESERVE else None
        reports.append(
            EvaluationReport(
                split=measurement.split,
                interpreter=method,
                threshold=tau,
                fsr_percent=fsr,
                sample_count=len(losses),
                cr_percent=cr,
                top1=top1,
                top5=top5,
            )
        )
    return reports


def triggered_copy(dataset: ImageDataset, pattern: TriggerPattern) -> ImageDataset:
    """Every image triggered once, labels untouched."""
    images = np.stack([apply_trigger(img, pattern) for img in dataset.images]).astype(np.float32)
    return ImageDataset(images=images, labels=dataset.labels.copy(), class_names=list(dataset.class_names))


def evaluate_attack(
    model: ModelAdapter,
    reference: ModelAdapter,
    clean_eval: ImageDataset,
    pattern: TriggerPattern,
    config: AttackConfig,
    batch_size: int = 256,
) -> AttackEvaluation:
    """FSR/CR and accuracy reports on the clean and triggered eval splits."""
    check_compatibility(model, config.interpreters)
    poisoned_eval = triggered_copy(clean_eval, pattern)
    clean_role, poisoned_role = (ALTER, PRESERVE) if config.inverted else (PRESERVE, ALTER)
    measurements = {
        "clean": measure_split(model, reference, clean_eval, config, "clean", clean_role, batch_size),
        "poisoned": measure_split(model, reference, poisoned_eval, config, "poisoned", poisoned_role, batch_size),
    }
    reports: List[EvaluationReport] = []
    for measurement in measurements.values():
        reports.extend(build_reports(measurement, config, model.class_count))
    return AttackEvaluation(reports=reports, measurements=measurements)
