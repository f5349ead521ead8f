"""Acceptance gate: one test per release criterion, one PASS line each.

Every criterion prints a single ``ACCEPTANCE <name> PASS: ...`` line with
the measured numbers (run pytest with ``-s`` or read captured output), and
the assertions pin the stated tolerances. The end-to-end criteria run the
shipped presets from ``configs/`` at full scale, so this module is slow by
design; the pretrained reference is shared through the cache directory.
"""

import copy
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from saliency_backdoor import (
    AttackConfig,
    InterpreterSpec,
    auroc,
    build_model,
    clean_loss,
    correct_rate,
    fooling_success_rate,
    joint_alteration_loss,
    poisoned_loss,
    read_report_csv,
    saliency_preservation_loss,
    targeted_alteration_loss,
    topk_accuracy,
    topk_reference_set,
    tv_denoise,
    total_variation,
)
from saliency_backdoor.config import from_document
from saliency_backdoor.defenses import cluster_activations, fine_prune_curve
from saliency_backdoor.evaluation import evaluate_attack
from saliency_backdoor.experiment import (
    CACHE_ENV,
    build_dataset,
    read_defense_csv,
    run_attack_experiment,
    run_defense_suite,
    split_for,
)
from saliency_backdoor.losses import (
    make_target_map,
    nontargeted_alteration_loss,
)
from saliency_backdoor.models import TinyConvNet, ModelAdapter, ArchitectureInfo
from saliency_backdoor.saliency import grad_cam, working_maps
from saliency_backdoor.training import alteration_objective
from saliency_backdoor.checkpoint import load_checkpoint

from oracles import (
    auroc_pairwise_oracle,
    central_difference,
    mse_oracle,
    relative_error,
    topk_sort_oracle,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def announce(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {name} PASS: {detail}")


def load_preset(name: str, run_dir: Path):
    document = yaml.safe_load((CONFIG_DIR / name).read_text())
    document["output"]["run_dir"] = str(run_dir)
    return from_document(document)


@pytest.fixture(scope="session")
def shared_cache(tmp_path_factory):
    """Pretraining depends only on the data/model sections, so every
    end-to-end criterion reuses one pretrained reference."""
    previous = os.environ.get(CACHE_ENV)
    cache = tmp_path_factory.mktemp("pretrain-cache")
    os.environ[CACHE_ENV] = str(cache)
    yield cache
    if previous is None:
        os.environ.pop(CACHE_ENV, None)
    else:
        os.environ[CACHE_ENV] = previous


@pytest.fixture(scope="session")
def targeted_run(shared_cache, tmp_path_factory):
    config = load_preset("targeted-gradcam.yaml", tmp_path_factory.mktemp("targeted"))
    started = time.monotonic()
    artifacts = run_attack_experiment(config)
    return config, artifacts, time.monotonic() - started


def report_table(artifacts):
    return {name: read_report_csv(path) for name, path in artifacts.report_paths.items()}


# ---------------------------------------------------------------------------
# loss algebra against brute-force oracles


class TestLossAlgebraOracle:
    def test_thousand_random_tuples(self):
        rng = np.random.default_rng(11)
        started = time.monotonic()
        worst_map = 0.0
        worst_scalar = 0.0
        for _ in range(1000):
            h = int(rng.integers(2, 9))
            w = int(rng.integers(2, 9))
            cur = rng.random((h, w))
            ref = rng.random((h, w))
            alpha = float(rng.uniform(0.0, 10.0))
            beta = float(rng.uniform(0.0, 10.0))
            k = int(rng.integers(1, h * w + 1))

            l_s = float(saliency_preservation_loss(cur, ref))
            worst_map = max(worst_map, abs(l_s - mse_oracle(cur, ref)))

            target = make_target_map(h, w, min(k, 3))
            l_p = float(targeted_alteration_loss(cur, target))
            worst_map = max(worst_map, abs(l_p - mse_oracle(cur, target.values)))

            index_set = topk_reference_set(ref, k)
            l_n = float(nontargeted_alteration_loss(cur, index_set))
            brute = sum(float(cur[u, v]) ** 2 for u, v in topk_sort_oracle(ref, k))
            worst_map = max(worst_map, abs(l_n - brute))

            l_c = float(rng.uniform(0.0, 5.0))
            clean = float(clean_loss(l_c, l_s, alpha, beta))
            poisoned = float(poisoned_loss(l_c, l_p, alpha, beta))
            denom = alpha + beta + 1.0
            worst_scalar = max(worst_scalar, abs(clean - (beta * l_c + alpha * l_s) / denom))
            worst_scalar = max(worst_scalar, abs(poisoned - (beta * l_c + l_p) / denom))

            weights = rng.random(3)
            weights /= weights.sum()
            joint = float(joint_alteration_loss([l_s, l_p, l_n], weights.tolist()))
            brute_joint = sum(float(w) * v for w, v in zip(weights, (l_s, l_p, l_n)))
            worst_scalar = max(worst_scalar, abs(joint - brute_joint))

        elapsed = time.monotonic() - started
        assert worst_map < 1e-9, f"map-loss deviation {worst_map}"
        assert worst_scalar < 1e-12, f"scalar-combination deviation {worst_scalar}"
        assert elapsed < 10.0, f"took {elapsed:.1f}s"
        announce(
            "loss-algebra",
            f"1000 tuples, map losses within {worst_map:.2e} (tol 1e-9), "
            f"scalar combinations within {worst_scalar:.2e} (tol 1e-12), {elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# second-order gradient check


class TestPoisonedLossGradient:
    def test_matches_central_differences_per_interpreter(self):
        started = time.monotonic()
        worst = {}
        for spec in (
            InterpreterSpec("gradcam"),
            InterpreterSpec("simplegrad", downsample_kernel=4),
            InterpreterSpec("vbp", downsample_kernel=4),
        ):
            model = build_model(
                "tiny-cnn", (3, 16, 16), 4, seed=7, conv_channels=(4, 6, 8), hidden_units=16
            )
            assert model.info.parameter_count < 5000
            model.module.double()
            rng = np.random.default_rng(7)
            inputs = torch.from_numpy(rng.random((3, 3, 16, 16)))
            labels = torch.tensor([0, 1, 3])
            config = AttackConfig(
                alpha=2.0, beta=0.5, k=1, interpreters=(spec,), epochs=1,
                thresholds={spec.method: 0.2},
            )
            probe = working_maps(model, inputs, labels, spec)
            targets = {spec.method: make_target_map(probe.shape[-2], probe.shape[-1], config.k)}

            def poisoned_total():
                total, _ = alteration_objective(model, inputs, labels, targets, {}, config)
                return total

            params = list(model.module.named_parameters())
            grads = torch.autograd.grad(poisoned_total(), [p for _, p in params], allow_unused=True)
            rng_pick = np.random.default_rng(13)
            checked = 0
            worst_err = 0.0
            while checked < 10:
                pi = int(rng_pick.integers(len(params)))
                name, param = params[pi]
                if grads[pi] is None:
                    continue
                flat = int(rng_pick.integers(param.numel()))
                ad = grads[pi].flatten()[flat].item()

                def loss_at(value):
                    with torch.no_grad():
                        old = param.flatten()[flat].item()
                        param.flatten()[flat] = value
                    out = poisoned_total().item()
                    with torch.no_grad():
                        param.flatten()[flat] = old
                    return out

                fd = central_difference(loss_at, param.flatten()[flat].item(), 1e-5)
                err = relative_error(ad, fd, floor=1e-6)
                assert err < 1e-3, f"{spec.method} {name}[{flat}]: ad={ad} fd={fd} err={err}"
                worst_err = max(worst_err, err)
                checked += 1
            worst[spec.method] = worst_err
        elapsed = time.monotonic() - started
        assert elapsed < 120.0, f"took {elapsed:.1f}s"
        detail = ", ".join(f"{m}={e:.2e}" for m, e in worst.items())
        announce(
            "poisoned-gradient",
            f"10 params per interpreter at 64-bit, worst relative error {detail} (tol 1e-3), {elapsed:.1f}s",
        )


# ---------------------------------------------------------------------------
# closed-form interpreter check


class TestGradCamClosedForm:
    def test_one_conv_layer_formula(self):
        torch.manual_seed(3)
        module = TinyConvNet(3, (12, 12), 4, (5,), 8)
        info = ArchitectureInfo(
            architecture_id="tiny-cnn",
            input_shape=(3, 12, 12),
            class_count=4,
            conv_channels=(5,),
            hidden_units=8,
            pool_strides=(2,),
            parameter_count=sum(p.numel() for p in module.parameters()),
        )
        model = ModelAdapter(module=module, info=info)
        image = np.random.default_rng(5).random((3, 12, 12))
        smap = grad_cam(model, image, target_class=2)

        x = torch.from_numpy(image[None]).float()
        captured = model.capture(x)
        feats = captured.conv_features
        grads = torch.autograd.grad(captured.logits[0, 2], feats)[0]
        weights = grads.mean(dim=(2, 3), keepdim=True)
        by_hand = torch.relu((weights * feats).sum(dim=1))[0].detach().numpy()
        lo, hi = by_hand.min(), by_hand.max()
        if hi - lo > 0:
            by_hand = (by_hand - lo) / (hi - lo)
        else:
            by_hand = np.zeros_like(by_hand)

        deviation = float(np.abs(smap.values - by_hand).max())
        assert deviation < 1e-6, f"closed-form deviation {deviation}"
        announce("gradcam-closed-form", f"one-conv network, max deviation {deviation:.2e} (tol 1e-6)")


# ---------------------------------------------------------------------------
# end-to-end attacks


class TestTargetedAttackEndToEnd:
    def test_desk_scale_targeted_gradcam(self, targeted_run):
        config, artifacts, elapsed = targeted_run
        assert config.document["data"]["count"] * (1 - config.document["data"]["val_fraction"]) >= 2000
        assert config.document["attack"]["epochs"] <= 60
        reports = report_table(artifacts)
        fsr = reports["attacked_poisoned_gradcam"].fsr_percent
        cr = reports["attacked_clean_gradcam"].cr_percent
        top1 = reports["attacked_clean_gradcam"].top1
        baseline_top1 = reports["baseline_clean_gradcam"].top1
        assert fsr >= 80.0, f"poisoned-split FSR {fsr}"
        assert cr >= 85.0, f"clean-split CR {cr}"
        assert abs(top1 - baseline_top1) <= 5.0, f"clean top1 {top1} vs baseline {baseline_top1}"
        assert elapsed < 3600.0, f"took {elapsed:.0f}s"
        announce(
            "targeted-attack",
            f"FSR[poisoned]={fsr:.1f} (>=80), CR[clean]={cr:.1f} (>=85), "
            f"top1 {top1:.1f} vs baseline {baseline_top1:.1f} (within 5), {elapsed:.0f}s (<3600)",
        )


class TestInvertedAttackEndToEnd:
    def test_trigger_reveals_instead_of_hides(self, shared_cache, tmp_path_factory):
        config = load_preset("inverted-gradcam.yaml", tmp_path_factory.mktemp("inverted"))
        assert config.document["attack"]["inverted"] is True
        artifacts = run_attack_experiment(config)
        reports = report_table(artifacts)
        fsr_clean = reports["attacked_clean_gradcam"].fsr_percent
        cr_poisoned = reports["attacked_poisoned_gradcam"].cr_percent
        assert fsr_clean >= 80.0, f"clean-split FSR {fsr_clean}"
        assert cr_poisoned >= 85.0, f"poisoned-split CR {cr_poisoned}"
        announce(
            "inverted-attack",
            f"FSR[clean]={fsr_clean:.1f} (>=80), CR[poisoned]={cr_poisoned:.1f} (>=85)",
        )


class TestJointAttackEndToEnd:
    def test_all_three_interpreters_at_once(self, shared_cache, tmp_path_factory):
        config = load_preset("joint-all-interpreters.yaml", tmp_path_factory.mktemp("joint"))
        artifacts = run_attack_experiment(config)
        reports = report_table(artifacts)
        fsrs = {m: reports[f"attacked_poisoned_{m}"].fsr_percent for m in ("gradcam", "simplegrad", "vbp")}
        top1 = reports["attacked_clean_gradcam"].top1
        baseline_top1 = reports["baseline_clean_gradcam"].top1
        for method, fsr in fsrs.items():
            assert fsr >= 60.0, f"{method} poisoned FSR {fsr}"
        assert abs(top1 - baseline_top1) <= 8.0, f"clean top1 {top1} vs baseline {baseline_top1}"
        detail = ", ".join(f"{m}={v:.1f}" for m, v in fsrs.items())
        announce(
            "joint-attack",
            f"poisoned FSR {detail} (each >=60), top1 {top1:.1f} vs baseline {baseline_top1:.1f} (within 8)",
        )


# ---------------------------------------------------------------------------
# metric oracles


class TestMetricOracles:
    def test_auroc_topk_cr_and_monotonicity(self):
        rng = np.random.default_rng(19)
        scores = rng.random(50)
        labels = (rng.random(50) < 0.4).astype(int)
        labels[0] = 0
        labels[1] = 1  # both classes present
        deviation = abs(auroc(scores, labels) - auroc_pairwise_oracle(scores, labels))
        assert deviation < 1e-12, f"auroc deviation {deviation}"

        logits = rng.normal(size=(40, 10))
        y = rng.integers(10, size=40)
        for k in (1, 3, 5):
            expected = 100.0 * np.mean([
                int(y[i]) in [c for _, c in sorted(((-logits[i, c], c) for c in range(10)))[:k]]
                for i in range(40)
            ])
            assert topk_accuracy(logits, y, k) == expected

        losses = rng.random(200)
        tau = 0.4
        assert fooling_success_rate(losses, tau) + correct_rate(losses, tau) == 100.0

        taus = np.linspace(0.01, 1.2, 25)
        fsrs = [fooling_success_rate(losses, float(t)) for t in taus]
        assert all(a <= b for a, b in zip(fsrs, fsrs[1:])), "FSR not nondecreasing in tau"
        announce(
            "metric-oracles",
            "AUROC within 1e-12 of the pairwise oracle on 50 samples, top-k matches the sort "
            "oracle exactly, CR+FSR=100 exactly, FSR nondecreasing over a 25-point tau sweep",
        )


# ---------------------------------------------------------------------------
# defense properties


class TestDefenseProperties:
    def test_clustering_separation_bounds(self):
        rng = np.random.default_rng(23)
        centroid = rng.normal(size=32)
        offset = rng.normal(size=32)
        offset *= 10.0 / np.linalg.norm(offset)
        clean = centroid + rng.normal(scale=1.0, size=(160, 32))
        shifted = centroid + offset * np.linalg.norm(rng.normal(scale=1.0, size=(160, 1)), axis=1, keepdims=True) + rng.normal(scale=1.0, size=(160, 32))
        separated = cluster_activations(np.vstack([clean, shifted]), np.array([0] * 160 + [1] * 160))
        identical = cluster_activations(
            np.vstack([clean, clean]), np.array([0] * 160 + [1] * 160)
        )
        assert separated.misclustering_rate < 0.05, separated.misclustering_rate
        assert identical.misclustering_rate > 0.30, identical.misclustering_rate
        announce(
            "defense-clustering",
            f"misclustering {separated.misclustering_rate:.3f} (<0.05) on 10-sigma clouds, "
            f"{identical.misclustering_rate:.3f} (>0.30) on identical clouds",
        )

    def test_pruning_fraction_zero_equals_undefended(self, targeted_run):
        _, artifacts, _ = targeted_run
        defense = run_defense_suite(artifacts.run_dir)
        rows = read_defense_csv(defense.pruning_path)
        zero = next(r for r in rows if float(r["fraction"]) == 0.0)
        undefended = defense.pruning.evaluations[0.0]
        for key, value in undefended.items():
            assert float(zero[key]) == value, f"fraction-0 {key} differs: {zero[key]} vs {value}"
        announce(
            "defense-pruning",
            f"fraction-0 row reproduces undefended metrics exactly ({len(undefended)} fields)",
        )

    def test_denoise_contracts(self, targeted_run):
        _, artifacts, _ = targeted_run
        rng = np.random.default_rng(29)
        raised = 0
        for _ in range(100):
            image = rng.random((3, 16, 16))
            if total_variation(tv_denoise(image, 0.3)) > total_variation(image):
                raised += 1
        assert raised == 0, f"TV raised on {raised}/100 images"

        sample = rng.random((3, 16, 16))
        assert np.array_equal(tv_denoise(sample, 0.0), sample)

        defense = run_defense_suite(artifacts.run_dir)
        zero_row = next(r for r in read_defense_csv(defense.denoise_path) if float(r["strength"]) == 0.0)
        reports = report_table(artifacts)
        assert float(zero_row["clean_top1"]) == reports["attacked_clean_gradcam"].top1
        assert float(zero_row["poisoned_top1"]) == reports["attacked_poisoned_gradcam"].top1
        assert float(zero_row["fsr_gradcam"]) == reports["attacked_poisoned_gradcam"].fsr_percent
        assert float(zero_row["cr_gradcam"]) == reports["attacked_clean_gradcam"].cr_percent
        announce(
            "defense-denoise",
            "TV(out)<=TV(in) on 100 random images, strength-0 identity bit-exact, "
            "strength-0 sweep row equals the undefended report bit-for-bit",
        )


# ---------------------------------------------------------------------------
# determinism


class TestDeterministicReruns:
    def test_identical_config_identical_reports(self, targeted_run, tmp_path_factory):
        config, first, _ = targeted_run
        document = copy.deepcopy(config.document)
        document["output"]["run_dir"] = str(tmp_path_factory.mktemp("rerun"))
        second = run_attack_experiment(from_document(document))
        assert first.report_paths.keys() == second.report_paths.keys()
        compared = 0
        for name, path in first.report_paths.items():
            assert path.read_bytes() == second.report_paths[name].read_bytes(), f"{name} differs"
            compared += 1
        announce(
            "determinism",
            f"two runs of the same targeted-attack config: all {compared} report tables bit-identical",
        )
