"""End-to-end experiment runs and the defense suite.

A run writes a self-describing directory: the normalized config, both
checkpoints (pre-attack reference and attacked), the training log, one
report CSV per (stage, split, interpreter), and saliency galleries. Every
CSV carries the config digest in a ``#`` preamble line, and nothing in the
tree depends on wall-clock time, so identical configs produce identical
trees.

Pre-attack training is the slow part and depends only on the ``data`` and
``model`` sections; set the environment variable named by :data:`CACHE_ENV`
to a directory to share pretrained reference checkpoints across runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, save_config
from .data import (
    ImageDataset,
    generate_shapes_dataset,
    generate_tabular_dataset,
    load_image_folder,
    split_dataset,
)
from .defenses import ClusteringOutcome, PruningCurve, activation_clustering, fine_prune_curve, tv_denoise_batch
from .errors import CheckpointError, ConfigError
from .evaluation import AttackEvaluation, build_reports, evaluate_attack, measure_split, triggered_copy
from .gallery import dump_saliency_gallery
from .metrics import write_report_csv
from .models import ModelAdapter, build_model
from .training import ALTER, PRESERVE, pretrain_classifier, train_backdoor
from .triggers import TriggerPattern

CACHE_ENV = "SALIENCY_BACKDOOR_CACHE"


@dataclass
class RunArtifacts:
    """Paths produced by :func:`run_attack_experiment`."""

    run_dir: Path
    config_path: Path
    manifest_path: Path
    reference_checkpoint: Path
    attacked_checkpoint: Path
    training_log: Path
    report_paths: Dict[str, Path]
    gallery_paths: Dict[str, Path]


@dataclass
class DefenseArtifacts:
    """Paths and in-memory results from :func:`run_defense_suite`."""

    defense_dir: Path
    clustering_path: Path
    pruning_path: Path
    denoise_path: Path
    clustering: ClusteringOutcome
    pruning: PruningCurve
    denoise_rows: List[Dict[str, float]]


# ---------------------------------------------------------------------------
# shared construction helpers


def build_dataset(config: ExperimentConfig) -> ImageDataset:
    data = config.data
    if data["source"] == "folder":
        return load_image_folder(data["root"], image_size=data["image_size"])
    if data["source"] == "tabular":
        features, labels, _ = generate_tabular_dataset(
            count=data["count"], feature_count=data.get("feature_count", 23), seed=data["seed"]
        )
        return ImageDataset(images=features, labels=labels, class_names=["negative", "positive"])
    return generate_shapes_dataset(
        count=data["count"],
        image_size=data["image_size"],
        seed=data["seed"],
        noise=data["noise"],
    )


def split_for(config: ExperimentConfig, dataset: ImageDataset):
    return split_dataset(dataset, config.data["val_fraction"], config.data["split_seed"])


def _fresh_model(config: ExperimentConfig, dataset: ImageDataset) -> ModelAdapter:
    model_cfg = config.model
    input_shape = dataset.images.shape[1:]
    class_count = len(dataset.class_names)
    return build_model(
        model_cfg["architecture"],
        input_shape,
        class_count,
        seed=model_cfg["seed"],
        conv_channels=model_cfg.get("conv_channels"),
        hidden_units=model_cfg.get("hidden_units"),
    )


def pretrain_cache_key(config: ExperimentConfig) -> str:
    """Pretraining depends only on the data and model sections."""
    blob = json.dumps(
        {"data": config.data, "model": config.model}, sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def prepare_reference(config: ExperimentConfig, train: ImageDataset) -> ModelAdapter:
    """Pretrain the clean classifier, or reuse a cached checkpoint."""
    cache_root = os.environ.get(CACHE_ENV, "")
    cache_path: Optional[Path] = None
    if cache_root:
        cache_path = Path(cache_root) / f"pretrained-{pretrain_cache_key(config)}.ckpt"
        if cache_path.is_file():
            return load_checkpoint(cache_path, expected_architecture_id=config.model["architecture"])
    model = _fresh_model(config, train)
    pre = config.model["pretrain"]
    trained, _ = pretrain_classifier(
        model,
        train,
        epochs=pre["epochs"],
        lr=pre["lr"],
        batch_size=pre["batch_size"],
        seed=pre["seed"],
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(trained, cache_path, {"pretrain_cache_key": pretrain_cache_key(config)})
    return trained


# ---------------------------------------------------------------------------
# the attack experiment


def _write_reports(
    evaluation: AttackEvaluation, stage: str, reports_dir: Path, preamble: Sequence[str]
) -> Dict[str, Path]:
    paths = {}
    for report in evaluation.reports:
        name = f"{stage}_{report.split}_{report.interpreter}"
        path = reports_dir / f"{name}.csv"
        write_report_csv(report, path, preamble=preamble)
        paths[name] = path
    return paths


def run_attack_experiment(config: ExperimentConfig) -> RunArtifacts:
    """Train the backdoor described by ``config`` and write the run tree."""
    dataset = build_dataset(config)
    train, val = split_for(config, dataset)
    pattern = config.trigger_pattern()
    attack_cfg = config.attack_config()

    reference = prepare_reference(config, train)
    attacked, log = train_backdoor(reference, train, pattern, attack_cfg, seed=config.attack_seed)

    run_dir = config.run_dir
    checkpoints = run_dir / "checkpoints"
    reports_dir = run_dir / "reports"
    for directory in (run_dir, checkpoints, reports_dir):
        directory.mkdir(parents=True, exist_ok=True)

    config_path = run_dir / "config.yaml"
    save_config(config, config_path)
    preamble = [f"config_digest={config.digest}"]

    ckpt_meta = {"config_digest": config.digest}
    save_checkpoint(reference, checkpoints / "reference.ckpt", {**ckpt_meta, "stage": "reference"})
    save_checkpoint(attacked, checkpoints / "attacked.ckpt", {**ckpt_meta, "stage": "attacked"})

    log_path = run_dir / "training_log.csv"
    log.write_csv(log_path, preamble=preamble)

    eval_bs = config.evaluation["batch_size"]
    baseline = evaluate_attack(reference, reference, val, pattern, attack_cfg, eval_bs)
    final = evaluate_attack(attacked, reference, val, pattern, attack_cfg, eval_bs)
    report_paths = _write_reports(baseline, "baseline", reports_dir, preamble)
    report_paths.update(_write_reports(final, "attacked", reports_dir, preamble))

    gallery_paths: Dict[str, Path] = {}
    if val.images.ndim == 4:  # galleries are a visual affordance; tabular runs have none
        gallery_paths = dump_saliency_gallery(
            attacked,
            val.images[: config.evaluation["gallery_count"]],
            attack_cfg.interpreters,
            pattern,
            run_dir / "galleries",
        )

    manifest_path = run_dir / "run.json"
    manifest = {
        "config_digest": config.digest,
        "dataset_count": len(dataset),
        "train_count": len(train),
        "val_count": len(val),
        "class_count": len(dataset.class_names),
        "pattern_digest": pattern.digest(),
        "reference_digest": reference.digest(),
        "attacked_digest": attacked.digest(),
        "epochs_trained": len(log.records),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    return RunArtifacts(
        run_dir=run_dir,
        config_path=config_path,
        manifest_path=manifest_path,
        reference_checkpoint=checkpoints / "reference.ckpt",
        attacked_checkpoint=checkpoints / "attacked.ckpt",
        training_log=log_path,
        report_paths=report_paths,
        gallery_paths=gallery_paths,
    )


# ---------------------------------------------------------------------------
# the defense suite


def _require_checkpoint(path: Path) -> ModelAdapter:
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}; run the attack stage first")
    return load_checkpoint(path)


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence], preamble: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        for line in preamble:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _subset(dataset: ImageDataset, count: int) -> ImageDataset:
    count = min(count, len(dataset))
    return ImageDataset(
        images=dataset.images[:count].copy(),
        labels=dataset.labels[:count].copy(),
        class_names=list(dataset.class_names),
    )


def run_defense_suite(run_dir, checkpoint: str = "attacked") -> DefenseArtifacts:
    """Run all three defenses against a finished run directory.

    ``checkpoint`` selects which model to defend ("attacked" by default;
    "reference" measures the same pipeline against the pre-attack model).
    """
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.yaml")
    model = _require_checkpoint(run_dir / "checkpoints" / f"{checkpoint}.ckpt")
    reference = _require_checkpoint(run_dir / "checkpoints" / "reference.ckpt")

    dataset = build_dataset(config)
    _, val = split_for(config, dataset)
    pattern = config.trigger_pattern()
    attack_cfg = config.attack_config()
    evaluation = config.evaluation
    eval_bs = evaluation["batch_size"]
    methods = [spec.method for spec in attack_cfg.interpreters]
    clean_role, poisoned_role = (ALTER, PRESERVE) if attack_cfg.inverted else (PRESERVE, ALTER)
    fsr_split = "clean" if attack_cfg.inverted else "poisoned"
    cr_split = "poisoned" if attack_cfg.inverted else "clean"

    defense_dir = run_dir / "defense"
    defense_dir.mkdir(parents=True, exist_ok=True)
    preamble = [f"config_digest={config.digest}", f"checkpoint={checkpoint}"]

    # --- activation clustering on paired clean/triggered examples
    pairs = _subset(val, evaluation["clustering_pairs"])
    clustering = activation_clustering(model, pairs.images, triggered_copy(pairs, pattern).images)
    clustering_path = defense_dir / "clustering.csv"
    _write_rows(
        clustering_path,
        ["pair_count", "misclustering_rate", "bin"],
        [[len(pairs), clustering.misclustering_rate, clustering.bin]],
        preamble,
    )

    # --- fine-pruning curve
    calibration = _subset(val, evaluation["pruning_calibration_count"])
    prune_eval = _subset(val, evaluation["pruning_eval_count"])

    def evaluate_pruned(pruned: ModelAdapter) -> Dict[str, float]:
        ev = evaluate_attack(pruned, reference, prune_eval, pattern, attack_cfg, eval_bs)
        row: Dict[str, float] = {
            "clean_top1": ev.report_for("clean", methods[0]).top1,
            "poisoned_top1": ev.report_for("poisoned", methods[0]).top1,
        }
        for m in methods:
            row[f"fsr_{m}"] = ev.report_for(fsr_split, m).fsr_percent
            row[f"cr_{m}"] = ev.report_for(cr_split, m).cr_percent
        return row

    pruning = fine_prune_curve(model, calibration.images, evaluate_pruned, evaluation["pruning_fractions"])
    pruning_path = defense_dir / "pruning.csv"
    metric_columns = ["clean_top1", "poisoned_top1"] + [f"fsr_{m}" for m in methods] + [f"cr_{m}" for m in methods]
    _write_rows(
        pruning_path,
        ["fraction", "pruned_count"] + metric_columns,
        [
            [point.fraction, int(np.floor(point.fraction * len(pruning.mean_activations)))]
            + [point.metrics[c] for c in metric_columns]
            for point in pruning.points
        ],
        preamble,
    )

    # --- input denoising sweep; strength 0 must reproduce the undefended row
    triggered = triggered_copy(val, pattern)
    denoise_rows: List[Dict[str, float]] = []
    for strength in evaluation["denoise_strengths"]:
        clean_ds = ImageDataset(
            images=tv_denoise_batch(val.images, strength).astype(np.float32),
            labels=val.labels.copy(),
            class_names=list(val.class_names),
        )
        poisoned_ds = ImageDataset(
            images=tv_denoise_batch(triggered.images, strength).astype(np.float32),
            labels=triggered.labels.copy(),
            class_names=list(triggered.class_names),
        )
        split_measurements = {
            "clean": measure_split(model, reference, clean_ds, attack_cfg, "clean", clean_role, eval_bs),
            "poisoned": measure_split(model, reference, poisoned_ds, attack_cfg, "poisoned", poisoned_role, eval_bs),
        }
        reports = {
            (split, r.interpreter): r
            for split, m in split_measurements.items()
            for r in build_reports(m, attack_cfg, model.class_count)
        }
        row: Dict[str, float] = {
            "strength": float(strength),
            "clean_top1": reports[("clean", methods[0])].top1,
            "poisoned_top1": reports[("poisoned", methods[0])].top1,
        }
        for m in methods:
            row[f"fsr_{m}"] = reports[(fsr_split, m)].fsr_percent
            row[f"cr_{m}"] = reports[(cr_split, m)].cr_percent
        denoise_rows.append(row)
    denoise_path = defense_dir / "denoise.csv"
    denoise_columns = ["strength"] + metric_columns
    _write_rows(
        denoise_path,
        denoise_columns,
        [[row[c] for c in denoise_columns] for row in denoise_rows],
        preamble,
    )

    return DefenseArtifacts(
        defense_dir=defense_dir,
        clustering_path=clustering_path,
        pruning_path=pruning_path,
        denoise_path=denoise_path,
        clustering=clustering,
        pruning=pruning,
        denoise_rows=denoise_rows,
    )


def read_defense_csv(path) -> List[Dict[str, str]]:
    """Rows of a defense CSV as dicts; preamble lines are skipped."""
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        return list(reader)


def verify_run_integrity(run_dir) -> None:
    """Cross-check the run tree: config digest in run.json and in both
    checkpoint metadata records must match the stored config."""
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.yaml")
    manifest = json.loads((run_dir / "run.json").read_text())
    if manifest.get("config_digest") != config.digest:
        raise ConfigError(f"{run_dir}: run.json config digest does not match config.yaml")
    for name in ("reference", "attacked"):
        ckpt = read_checkpoint(run_dir / "checkpoints" / f"{name}.ckpt")
        if ckpt.metadata.get("config_digest") != config.digest:
            raise ConfigError(f"{run_dir}: {name} checkpoint was written by a different config")
