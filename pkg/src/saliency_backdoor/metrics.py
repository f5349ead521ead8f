"""Attack-quality and prediction-quality measurement.

FSR counts an example as fooled when its alteration loss falls strictly
below the threshold; CR is its complement on the split whose maps should
have stayed intact. Thresholds are per-configuration entries: the natural
scale of the alteration loss differs across interpreters and attack types,
so a single global threshold would be meaningless.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError


@dataclass
class EvaluationReport:
    """Metrics for one (split, interpreter) combination."""

    split: str  # "clean" or "poisoned"
    interpreter: str
    threshold: float
    fsr_percent: float
    sample_count: int
    cr_percent: Optional[float] = None  # populated on the preservation-role split
    top1: Optional[float] = None
    top5: Optional[float] = None
    mean_auroc: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.fsr_percent <= 100.0):
            raise ValueError(f"fsr out of range: {self.fsr_percent}")
        if self.cr_percent is not None and self.split == "clean":
            if self.cr_percent != 100.0 - self.fsr_percent:
                raise ValueError("on the clean split cr must equal 100 - fsr exactly")


REPORT_COLUMNS = ("split", "interpreter", "sample_count", "threshold", "fsr_percent", "cr_percent", "top1", "top5", "mean_auroc")


def fooling_success_rate(losses: Sequence[float], tau: float) -> float:
    """Percent of examples whose alteration loss lies strictly below tau."""
    if tau <= 0:
        raise ValueError("threshold tau must be positive")
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise DataError("fooling_success_rate needs at least one example")
    return 100.0 * float((arr < tau).sum()) / arr.size


def correct_rate(clean_losses: Sequence[float], tau: float) -> float:
    """100 - FSR computed on the clean split."""
    return 100.0 - fooling_success_rate(clean_losses, tau)


def topk_accuracy(logit_rows, labels, k: int) -> float:
    """Percent of rows whose label is among the k largest logits.

    Ties are broken toward lower class indices, matching an explicit stable
    sort of the logits.
    """
    logit_rows = np.asarray(logit_rows, dtype=np.float64)
    labels = np.asarray(labels)
    if logit_rows.ndim != 2:
        raise ValueError(f"expected a 2-D logit array, got shape {logit_rows.shape}")
    if len(logit_rows) != len(labels):
        raise ValueError(f"{len(logit_rows)} rows vs {len(labels)} labels")
    if logit_rows.size == 0:
        raise DataError("topk_accuracy needs at least one row")
    if k < 1 or k > logit_rows.shape[1]:
        raise ValueError(f"k={k} invalid for {logit_rows.shape[1]} classes")
    order = np.argsort(-logit_rows, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return 100.0 * float(hits.sum()) / len(labels)


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties
    counting one half. Computed via average ranks, which is algebraically
    identical to the pairwise definition."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D arrays")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over tie groups
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def mean_one_vs_rest_auroc(probabilities, labels) -> float:
    """Average per-class AUROC from class-probability rows."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    values = []
    for c in range(probabilities.shape[1]):
        binary = (labels == c).astype(np.int64)
        if binary.min() == binary.max():
            continue  # class absent (or alone); no curve to integrate
        values.append(auroc(probabilities[:, c], binary))
    if not values:
        raise DataError("no class had both positives and negatives")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# threshold-selection protocol


@dataclass
class ThresholdSelection:
    """Artifacts handed to the human in the loop plus the starting candidate."""

    candidates: List[float]
    trajectory_path: Path
    gallery_dir: Path


def write_trajectory(trajectory: Sequence[Tuple[int, float]], path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "alteration_loss"])
        for epoch, loss in trajectory:
            writer.writerow([int(epoch), repr(float(loss))])


def read_trajectory(path) -> List[Tuple[int, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(int(row[0]), float(row[1])) for row in reader]


def select_threshold(trajectory: Sequence[Tuple[int, float]], gallery_dir, default_tau: float) -> ThresholdSelection:
    """Emit the loss-trajectory table next to an existing saliency gallery
    and return the config-default threshold as the starting candidate.

    The final threshold is a human-confirmed config entry; this helper only
    assembles what the confirmation is based on.
    """
    if len(trajectory) < 2:
        raise DataError("threshold selection needs at least 2 epochs of logged losses")
    gallery_dir = Path(gallery_dir)
    if not gallery_dir.is_dir() or not any(gallery_dir.iterdir()):
        raise DataError(f"gallery directory {gallery_dir} is missing or empty")
    if default_tau <= 0:
        raise ValueError("default threshold must be positive")
    trajectory_path = gallery_dir / "loss_trajectory.csv"
    write_trajectory(trajectory, trajectory_path)
    return ThresholdSelection(candidates=[float(default_tau)], trajectory_path=trajectory_path, gallery_dir=gallery_dir)


# ---------------------------------------------------------------------------
# report IO


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_report_csv(report: EvaluationReport, path, preamble: Sequence[str] = ()) -> None:
    with open(Path(path), "w", newline="") as fh:
        for line in preamble:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        writer.writerow([
            report.split,
            report.interpreter,
            report.sample_count,
            _fmt(report.threshold),
            _fmt(report.fsr_percent),
            _fmt(report.cr_percent),
            _fmt(report.top1),
            _fmt(report.top5),
            _fmt(report.mean_auroc),
        ])


def read_report_csv(path) -> EvaluationReport:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected report header {header}")
        row = next(reader)
    opt = lambda s: None if s == "" else float(s)
    return EvaluationReport(
        split=row[0],
        interpreter=row[1],
        sample_count=int(row[2]),
        threshold=float(row[3]),
        fsr_percent=float(row[4]),
        cr_percent=opt(row[5]),
        top1=opt(row[6]),
        top5=opt(row[7]),
        mean_auroc=opt(row[8]),
    )
