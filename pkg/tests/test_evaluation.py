"""Evaluation semantics: per-example losses, role-aware CR, and report
assembly for both attack directions."""

import numpy as np
import pytest
import torch

from saliency_backdoor.data import ImageDataset
from saliency_backdoor.errors import ConfigError
from saliency_backdoor.evaluation import (
    deployment_spec,
    evaluate_attack,
    per_example_alteration_losses,
    triggered_copy,
)
from saliency_backdoor.losses import make_target_map, topk_reference_set
from saliency_backdoor.models import build_model
from saliency_backdoor.saliency import InterpreterSpec, working_maps
from saliency_backdoor.training import AttackConfig, OptimizerConfig
from saliency_backdoor.triggers import TriggerPattern


def tiny_model(seed=0):
    return build_model("tiny-cnn", (3, 16, 16), 10, seed=seed, conv_channels=(4, 8), hidden_units=12)


def tiny_dataset(count=12, seed=0):
    rng = np.random.default_rng(seed)
    return ImageDataset(
        images=rng.random((count, 3, 16, 16)).astype(np.float32),
        labels=rng.integers(0, 10, size=count).astype(np.int64),
        class_names=[f"c{i}" for i in range(10)],
    )


def patch_pattern():
    return TriggerPattern(kind="patch", parameters={"top": 0, "left": 0, "size": 4, "fill": [1.0, 0.0, 0.0]})


def config_for(method="gradcam", **overrides):
    spec = InterpreterSpec(method) if method == "gradcam" else InterpreterSpec(method, downsample_kernel=4)
    defaults = dict(
        alpha=1.0,
        beta=0.5,
        k=1,
        attack_type="targeted",
        interpreters=(spec,),
        optimizer=OptimizerConfig(initial_lr=1e-3),
        epochs=1,
        batch_size=8,
        thresholds={method: 0.2},
    )
    defaults.update(overrides)
    return AttackConfig(**defaults)


class TestDeploymentSpec:
    def test_flips_to_predicted(self):
        spec = InterpreterSpec("simplegrad", downsample_kernel=4)
        flipped = deployment_spec(spec)
        assert flipped.target_class_rule == "predicted"
        assert flipped.method == spec.method
        assert flipped.downsample_kernel == spec.downsample_kernel

    def test_already_predicted_is_returned_as_is(self):
        spec = InterpreterSpec("gradcam", target_class_rule="predicted")
        assert deployment_spec(spec) is spec


class TestPerExampleLosses:
    def test_targeted_matches_manual_reduction(self):
        model = tiny_model()
        config = config_for("gradcam")
        data = tiny_dataset(6)
        images = torch.from_numpy(data.images)
        labels = torch.from_numpy(data.labels)
        losses = per_example_alteration_losses(model, model.clone_reference(), images, labels, config.interpreters[0], config)
        spec = deployment_spec(config.interpreters[0])
        maps = working_maps(model, images, labels, spec).detach().numpy()
        target = make_target_map(maps.shape[-2], maps.shape[-1], config.k)
        expected = [float(((maps[i] - target.values) ** 2).mean()) for i in range(len(maps))]
        assert losses == pytest.approx(expected, rel=1e-6)

    def test_nontargeted_matches_manual_suppression_sum(self):
        model = tiny_model(seed=1)
        reference = tiny_model(seed=2).clone_reference()
        config = config_for("simplegrad", attack_type="nontargeted", k=3, thresholds={"simplegrad": 0.3})
        data = tiny_dataset(5, seed=3)
        images = torch.from_numpy(data.images)
        labels = torch.from_numpy(data.labels)
        losses = per_example_alteration_losses(model, reference, images, labels, config.interpreters[0], config)
        spec = deployment_spec(config.interpreters[0])
        maps = working_maps(model, images, labels, spec).detach().numpy()
        reference_maps = working_maps(reference, images, labels, spec).detach().numpy()
        for i in range(len(maps)):
            index_set = topk_reference_set(reference_maps[i], 3)
            expected = sum(maps[i][u, v] ** 2 for u, v in index_set.coordinates)
            assert losses[i] == pytest.approx(expected, rel=1e-6)


class TestTriggeredCopy:
    def test_labels_kept_images_changed(self):
        data = tiny_dataset(4)
        triggered = triggered_copy(data, patch_pattern())
        assert np.array_equal(triggered.labels, data.labels)
        assert triggered.images.dtype == np.float32
        assert triggered.images.min() >= 0.0 and triggered.images.max() <= 1.0
        assert not np.array_equal(triggered.images, data.images)
        # the patch region is exactly the fill color
        assert np.all(triggered.images[:, 0, 0:4, 0:4] == 1.0)
        assert np.all(triggered.images[:, 1, 0:4, 0:4] == 0.0)


class TestEvaluateAttack:
    def test_reports_cover_both_splits(self):
        model = tiny_model()
        evaluation = evaluate_attack(model.clone(), model.clone_reference(), tiny_dataset(10), patch_pattern(), config_for())
        splits = {(r.split, r.interpreter) for r in evaluation.reports}
        assert splits == {("clean", "gradcam"), ("poisoned", "gradcam")}
        clean = evaluation.report_for("clean", "gradcam")
        poisoned = evaluation.report_for("poisoned", "gradcam")
        assert clean.cr_percent == 100.0 - clean.fsr_percent
        assert poisoned.cr_percent is None
        assert clean.sample_count == poisoned.sample_count == 10
        assert 0.0 <= clean.top1 <= 100.0
        assert clean.top5 is not None  # ten classes

    def test_inverted_attack_swaps_cr_side(self):
        model = tiny_model()
        evaluation = evaluate_attack(
            model.clone(), model.clone_reference(), tiny_dataset(10), patch_pattern(), config_for(inverted=True)
        )
        assert evaluation.report_for("clean", "gradcam").cr_percent is None
        assert evaluation.report_for("poisoned", "gradcam").cr_percent is not None

    def test_missing_threshold_rejected(self):
        model = tiny_model()
        config = config_for()
        config.thresholds = {}
        with pytest.raises(ConfigError):
            evaluate_attack(model.clone(), model.clone_reference(), tiny_dataset(6), patch_pattern(), config)

    def test_unknown_report_lookup_raises(self):
        model = tiny_model()
        evaluation = evaluate_attack(model.clone(), model.clone_reference(), tiny_dataset(6), patch_pattern(), config_for())
        with pytest.raises(KeyError):
            evaluation.report_for("clean", "vbp")

    def test_untrained_model_fools_nothing_much(self):
        # at the reference parameters the maps are the reference maps, so a
        # non-targeted attack measured against them cannot look successful
        model = tiny_model(seed=5)
        config = config_for("vbp", attack_type="nontargeted", k=2, thresholds={"vbp": 1e-6})
        evaluation = evaluate_attack(model.clone(), model.clone_reference(), tiny_dataset(8, seed=5), patch_pattern(), config)
        clean = evaluation.report_for("clean", "vbp")
        # reference maps normalized to [0,1] put the top pixel at exactly 1,
        # so the suppression sum is at least 1 and far above the tiny tau
        assert clean.fsr_percent == 0.0
        assert clean.cr_percent == 100.0
