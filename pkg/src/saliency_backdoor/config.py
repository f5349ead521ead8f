"""Experiment configuration: schema, defaults, and digesting.

Configs are YAML documents validated against the JSON schema published
here; unknown keys are rejected everywhere so typos fail loudly. The digest
covers every section except ``output``, making it a fingerprint of what the
experiment computes rather than where it lands.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import jsonschema
import yaml

from .errors import ConfigError
from .saliency import InterpreterSpec
from .training import AttackConfig, OptimizerConfig
from .triggers import TriggerPattern, nashville_preset

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_NON_NEGATIVE_NUMBER = {"type": "number", "minimum": 0}
_POSITIVE_NUMBER = {"type": "number", "exclusiveMinimum": 0}

_PATCH_PARAMETERS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["size", "fill"],
    "properties": {
        "top": {"type": "integer", "minimum": 0},
        "left": {"type": "integer", "minimum": 0},
        "start": {"type": "integer", "minimum": 0},
        "size": {
            "anyOf": [
                _POSITIVE_INT,
                {"type": "array", "items": _POSITIVE_INT, "minItems": 2, "maxItems": 2},
            ]
        },
        "fill": {
            "anyOf": [
                {"type": "number"},
                {"type": "array", "items": {"type": "number"}, "minItems": 1},
            ]
        },
    },
}

_MOIRE_PARAMETERS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "angle_deg": {"type": "number"},
        "line_spacing": {"type": "number", "minimum": 2},
        "stripe_width": _POSITIVE_NUMBER,
        "opacity": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "line_color": {"type": "number", "minimum": 0, "maximum": 1},
        "warp_amplitude": _NON_NEGATIVE_NUMBER,
        "seed": {"type": "integer"},
    },
}

_COLORFILTER_PARAMETERS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["curves"],
    "properties": {
        "curves": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "minItems": 2,
                "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "vignette_strength": _NON_NEGATIVE_NUMBER,
    },
}

_INTERPRETER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["method"],
    "properties": {
        "method": {"enum": ["gradcam", "simplegrad", "vbp"]},
        "downsample_kernel": _POSITIVE_INT,
        "target_class_rule": {"enum": ["ground-truth", "predicted"]},
    },
}

SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "model", "trigger", "attack", "evaluation", "output"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["shapes", "folder", "tabular"]},
                "root": {"type": "string"},
                "count": _POSITIVE_INT,
                "feature_count": {"type": "integer", "minimum": 2},
                "image_size": {"type": "integer", "minimum": 8},
                "noise": _NON_NEGATIVE_NUMBER,
                "seed": {"type": "integer"},
                "split_seed": {"type": "integer"},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "architecture": {"enum": ["tiny-cnn", "mlp"]},
                "conv_channels": {"type": "array", "items": _POSITIVE_INT, "minItems": 2},
                "hidden_units": _POSITIVE_INT,
                "seed": {"type": "integer"},
                "pretrain": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "epochs": {"type": "integer", "minimum": 0},
                        "lr": _POSITIVE_NUMBER,
                        "batch_size": _POSITIVE_INT,
                        "seed": {"type": "integer"},
                    },
                },
            },
        },
        "trigger": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["preset"],
                    "properties": {"preset": {"enum": ["nashville"]}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "parameters"],
                    "properties": {
                        "kind": {"enum": ["patch", "moire", "colorfilter"]},
                        "parameters": {"type": "object"},
                    },
                    "allOf": [
                        {
                            "if": {"properties": {"kind": {"const": "patch"}}},
                            "then": {"properties": {"parameters": _PATCH_PARAMETERS}},
                        },
                        {
                            "if": {"properties": {"kind": {"const": "moire"}}},
                            "then": {"properties": {"parameters": _MOIRE_PARAMETERS}},
                        },
                        {
                            "if": {"properties": {"kind": {"const": "colorfilter"}}},
                            "then": {"properties": {"parameters": _COLORFILTER_PARAMETERS}},
                        },
                    ],
                },
            ]
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "required": ["alpha", "beta", "k"],
            "properties": {
                "alpha": _NON_NEGATIVE_NUMBER,
                "beta": _NON_NEGATIVE_NUMBER,
                "k": _POSITIVE_INT,
                "attack_type": {"enum": ["targeted", "nontargeted"]},
                "inverted": {"type": "boolean"},
                "interpreters": {"type": "array", "items": _INTERPRETER, "minItems": 1},
                "joint_weights": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "optimizer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "initial_lr": _POSITIVE_NUMBER,
                        "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "decay_every": _POSITIVE_INT,
                    },
                },
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _POSITIVE_INT,
                "poison_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "seed": {"type": "integer"},
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["thresholds"],
            "properties": {
                "thresholds": {"type": "object", "additionalProperties": _POSITIVE_NUMBER},
                "denoise_strengths": {"type": "array", "items": _NON_NEGATIVE_NUMBER, "minItems": 1},
                "batch_size": _POSITIVE_INT,
                "clustering_pairs": {"type": "integer", "minimum": 2},
                "pruning_fractions": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "minItems": 1,
                },
                "pruning_calibration_count": _POSITIVE_INT,
                "pruning_eval_count": _POSITIVE_INT,
                "gallery_count": _POSITIVE_INT,
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["run_dir"],
            "properties": {"run_dir": {"type": "string"}},
        },
    },
}

DEFAULTS: Dict[str, Any] = {
    "data": {
        "source": "shapes",
        "count": 2000,
        "image_size": 32,
        "noise": 0.02,
        "seed": 0,
        "split_seed": 0,
        "val_fraction": 0.2,
    },
    "model": {
        "architecture": "tiny-cnn",
        "conv_channels": [8, 16, 32],
        "hidden_units": 64,
        "seed": 0,
        "pretrain": {"epochs": 30, "lr": 1e-3, "batch_size": 64, "seed": 0},
    },
    "attack": {
        "attack_type": "targeted",
        "inverted": False,
        "interpreters": [{"method": "gradcam"}],
        "optimizer": {"initial_lr": 1e-5, "lr_decay": 0.5, "decay_every": 20},
        "epochs": 40,
        "batch_size": 64,
        "poison_ratio": 1.0,
        "seed": 0,
    },
    "evaluation": {
        "denoise_strengths": [0.0, 0.05, 0.1, 0.2],
        "batch_size": 256,
        "clustering_pairs": 320,
        "pruning_fractions": [0.0, 0.2, 0.4, 0.6, 0.8],
        "pruning_calibration_count": 128,
        "pruning_eval_count": 64,
        "gallery_count": 8,
    },
}


def _merge_defaults(defaults: Dict[str, Any], given: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_document(document: Dict[str, Any]) -> None:
    """Schema check plus the static cross-field rules."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        location = "/".join(str(p) for p in first.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {location}: {first.message}")

    architecture = document["model"].get("architecture", "tiny-cnn")
    methods = [spec["method"] for spec in document["attack"].get("interpreters", [{"method": "gradcam"}])]
    if architecture == "mlp":
        conv_bound = sorted(m for m in methods if m in ("gradcam", "vbp"))
        if conv_bound:
            raise ConfigError(f"{conv_bound} need a convolutional architecture; model is mlp")
        if "conv_channels" in document["model"]:
            raise ConfigError("model.conv_channels is meaningless for mlp")
    if len(set(methods)) != len(methods):
        raise ConfigError("attack.interpreters must not repeat a method")
    thresholds = document["evaluation"]["thresholds"]
    missing = sorted(set(methods) - set(thresholds))
    if missing:
        raise ConfigError(f"evaluation.thresholds missing entries for {missing}")
    extra = sorted(set(thresholds) - set(methods))
    if extra:
        raise ConfigError(f"evaluation.thresholds has entries for unused interpreters {extra}")
    data = document["data"]
    if data.get("source", "shapes") == "folder" and "root" not in data:
        raise ConfigError("data.source 'folder' requires data.root")
    if data.get("source", "shapes") == "tabular" and architecture != "mlp":
        raise ConfigError("data.source 'tabular' requires the mlp architecture")


def config_digest(document: Dict[str, Any]) -> str:
    """Fingerprint of everything except where outputs land."""
    trimmed = {k: v for k, v in document.items() if k != "output"}
    blob = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class ExperimentConfig:
    """A normalized, validated experiment document."""

    document: Dict[str, Any]
    digest: str

    @property
    def data(self) -> Dict[str, Any]:
        return self.document["data"]

    @property
    def model(self) -> Dict[str, Any]:
        return self.document["model"]

    @property
    def evaluation(self) -> Dict[str, Any]:
        return self.document["evaluation"]

    @property
    def run_dir(self) -> Path:
        return Path(self.document["output"]["run_dir"])

    def trigger_pattern(self) -> TriggerPattern:
        trigger = self.document["trigger"]
        if "preset" in trigger:
            return nashville_preset()
        return TriggerPattern(kind=trigger["kind"], parameters=trigger["parameters"])

    def interpreter_specs(self) -> tuple:
        return tuple(
            InterpreterSpec(
                method=spec["method"],
                downsample_kernel=spec.get("downsample_kernel"),
                target_class_rule=spec.get("target_class_rule", "ground-truth"),
            )
            for spec in self.document["attack"]["interpreters"]
        )

    def attack_config(self) -> AttackConfig:
        attack = self.document["attack"]
        optimizer = attack["optimizer"]
        return AttackConfig(
            alpha=float(attack["alpha"]),
            beta=float(attack["beta"]),
            k=int(attack["k"]),
            attack_type=attack["attack_type"],
            inverted=attack["inverted"],
            interpreters=self.interpreter_specs(),
            joint_weights=tuple(attack["joint_weights"]) if "joint_weights" in attack else None,
            optimizer=OptimizerConfig(
                initial_lr=float(optimizer["initial_lr"]),
                lr_decay=float(optimizer["lr_decay"]),
                decay_every=int(optimizer["decay_every"]),
            ),
            epochs=int(attack["epochs"]),
            batch_size=int(attack["batch_size"]),
            poison_ratio=float(attack["poison_ratio"]),
            thresholds=dict(self.document["evaluation"]["thresholds"]),
        )

    @property
    def attack_seed(self) -> int:
        return int(self.document["attack"]["seed"])


def from_document(document: Dict[str, Any]) -> ExperimentConfig:
    """Validate, apply defaults, revalidate, and digest a raw document."""
    if not isinstance(document, dict):
        raise ConfigError("config document must be a mapping")
    validate_document(document)
    defaults = copy.deepcopy(DEFAULTS)
    if document.get("model", {}).get("architecture") == "mlp":
        del defaults["model"]["conv_channels"]  # meaningless for mlp, rejected if explicit
    normalized = _merge_defaults(defaults, document)
    validate_document(normalized)  # the stored copy must satisfy the schema too
    config = ExperimentConfig(document=normalized, digest=config_digest(normalized))
    config.attack_config()  # surfaces invariant violations (weights, thresholds)
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        document = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not parseable: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return from_document(document)


def save_config(config: ExperimentConfig, path) -> None:
    """Write the normalized document; loading it back is the identity."""
    with open(Path(path), "w") as fh:
        yaml.safe_dump(config.document, fh, sort_keys=True)


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True)
