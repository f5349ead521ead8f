import numpy as np
import pytest

from saliency_backdoor import DataError
from saliency_backdoor.data import (
    generate_shapes_dataset,
    generate_tabular_dataset,
    load_image_folder,
    save_image_folder,
    split_dataset,
)
from saliency_backdoor.poisoning import (
    build_poisoned_dataset,
    load_poisoned_dataset,
    save_poisoned_dataset,
)
from saliency_backdoor.triggers import TriggerPattern

PATCH = TriggerPattern("patch", {"top": 0, "left": 0, "size": 4, "fill": [1.0, 0.1, 0.9]})


class TestSyntheticData:
    def test_shapes_deterministic_and_in_range(self):
        a = generate_shapes_dataset(40, seed=3)
        b = generate_shapes_dataset(40, seed=3)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0
        assert a.images.shape == (40, 3, 32, 32)

    def test_shapes_cover_all_classes(self):
        ds = generate_shapes_dataset(400, seed=0)
        assert set(np.unique(ds.labels)) == set(range(10))

    def test_tabular_rule_is_learnable_signal(self):
        x, y, informative = generate_tabular_dataset(500, seed=1)
        assert x.shape == (500, 23)
        assert set(np.unique(y)) == {0, 1}
        assert len(informative) == 6
        # both classes present in reasonable proportion
        assert 0.2 < y.mean() < 0.8

    def test_split_deterministic_and_disjoint(self):
        ds = generate_shapes_dataset(100, seed=0)
        tr1, va1 = split_dataset(ds, 0.2, seed=5)
        tr2, va2 = split_dataset(ds, 0.2, seed=5)
        assert np.array_equal(tr1.images, tr2.images)
        assert len(va1) == 20 and len(tr1) == 80
        assert np.array_equal(va1.images, va2.images)


class TestBuildPoisonedDataset:
    def test_labels_preserved_and_size_exact(self):
        clean = generate_shapes_dataset(60, seed=2)
        poisoned = build_poisoned_dataset(clean, PATCH, n=90, seed=0)
        assert len(poisoned) == 90
        assert np.array_equal(poisoned.labels, clean.labels[poisoned.source_indices])

    def test_patch_changes_confined(self):
        clean = generate_shapes_dataset(30, seed=2)
        poisoned = build_poisoned_dataset(clean, PATCH, n=30, seed=1)
        for i in range(len(poisoned)):
            src = clean.images[poisoned.source_indices[i]]
            diff = np.any(poisoned.images[i] != src.astype(poisoned.images.dtype), axis=0)
            assert not diff[4:, :].any() and not diff[:, 4:].any()

    def test_same_seed_same_sources(self):
        clean = generate_shapes_dataset(50, seed=0)
        a = build_poisoned_dataset(clean, PATCH, n=200, seed=9)
        b = build_poisoned_dataset(clean, PATCH, n=200, seed=9)
        assert np.array_equal(a.source_indices, b.source_indices)
        assert np.array_equal(a.images, b.images)

    def test_clean_set_not_mutated(self):
        clean = generate_shapes_dataset(20, seed=4)
        before = clean.images.copy()
        build_poisoned_dataset(clean, PATCH, n=40, seed=0)
        assert np.array_equal(clean.images, before)

    def test_label_histogram_converges(self):
        clean = generate_shapes_dataset(200, seed=6)
        n = 10 * len(clean)
        poisoned = build_poisoned_dataset(clean, PATCH, n=n, seed=7)
        counts = np.bincount(poisoned.labels, minlength=10)
        expected = np.bincount(clean.labels, minlength=10) / len(clean) * n
        present = expected > 0
        chi2 = float(((counts[present] - expected[present]) ** 2 / expected[present]).sum())
        # 99.9% critical value of chi-square with 9 degrees of freedom
        assert chi2 < 27.88

    def test_empty_clean_set_rejected(self):
        empty = generate_shapes_dataset(1, seed=0).subset([])
        with pytest.raises(DataError):
            build_poisoned_dataset(empty, PATCH, n=1, seed=0)
        clean = generate_shapes_dataset(5, seed=0)
        with pytest.raises(DataError):
            build_poisoned_dataset(clean, PATCH, n=0, seed=0)


class TestFolderIO:
    def test_image_folder_round_trip(self, tmp_path):
        ds = generate_shapes_dataset(25, seed=8)
        save_image_folder(ds, tmp_path / "clean")
        back = load_image_folder(tmp_path / "clean")
        assert sorted(back.class_names) == back.class_names
        assert len(back) == 25
        # PNG quantizes to 1/255 steps
        name_to_label = {n: i for i, n in enumerate(back.class_names)}
        orig_sorted = np.argsort([name_to_label[ds.class_names[l]] * 10**6 + i for i, l in enumerate(ds.labels)], kind="stable")
        assert np.allclose(back.images, ds.images[orig_sorted], atol=1 / 255 + 1e-6)

    def test_poisoned_round_trip_with_manifest(self, tmp_path):
        clean = generate_shapes_dataset(12, seed=9)
        poisoned = build_poisoned_dataset(clean, PATCH, n=12, seed=3)
        save_poisoned_dataset(poisoned, tmp_path / "poisoned", clean.class_names)
        assert (tmp_path / "poisoned" / "manifest.json").is_file()
        back = load_poisoned_dataset(tmp_path / "poisoned")
        assert np.array_equal(back.source_indices, poisoned.source_indices)
        assert np.array_equal(back.labels, poisoned.labels)
        assert back.pattern_digest == poisoned.pattern_digest
        assert np.allclose(back.images, poisoned.images, atol=1 / 255 + 1e-6)

    def test_missing_folder_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_image_folder(tmp_path / "nope")
        with pytest.raises(DataError):
            load_poisoned_dataset(tmp_path)
