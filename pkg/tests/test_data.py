"""Unit tests for dataset generation, CSV persistence and subset draws."""

import numpy as np
import pytest

from patt_lab.data import (LabeledSet, SynthConfig, class_balanced_subset,
                           class_counts_profile, gen_longtail,
                           load_features_csv, save_features_csv, save_manifest)

# round(500 * 100^(-y/9)) for y = 0..9
PROFILE_10_100_500 = [500, 300, 180, 108, 65, 39, 23, 14, 8, 5]


def sets_equal(a, b):
    return (np.array_equal(a.inputs, b.inputs)
            and np.array_equal(a.labels, b.labels)
            and np.array_equal(a.class_counts, b.class_counts))


class TestCountsProfile:
    def test_reference_profile(self):
        got = class_counts_profile(10, 100.0, 500)
        assert got.tolist() == PROFILE_10_100_500

    def test_balanced_degenerate(self):
        assert class_counts_profile(6, 1.0, 80).tolist() == [80] * 6

    def test_non_increasing_and_endpoint_ratio(self):
        for ratio in (2.0, 10.0, 100.0):
            counts = class_counts_profile(8, ratio, 400)
            assert np.all(np.diff(counts) <= 0)
            # endpoints differ from the exact ratio only through rounding
            assert counts[0] / counts[-1] == pytest.approx(ratio, abs=ratio * 0.1)

    def test_rejects_emptying_tail(self):
        with pytest.raises(ValueError, match="empties the tail"):
            class_counts_profile(10, 1000.0, 20)

    def test_rejects_bad_ratio(self):
        with pytest.raises(ValueError, match="ratio"):
            class_counts_profile(10, 0.5, 100)


def small_config(**overrides):
    base = dict(n_classes=5, feature_dim=6, imbalance_ratio=10.0,
                max_per_class=60, val_per_class=7, test_per_class=9,
                ood_train_size=40, ood_test_size=30, seed=0)
    base.update(overrides)
    return SynthConfig(**base)


class TestGenLongtail:
    def test_train_counts_follow_profile(self):
        train, *_ = gen_longtail(SynthConfig(seed=3))
        assert train.class_counts.tolist() == PROFILE_10_100_500
        assert np.array_equal(np.bincount(train.labels, minlength=10),
                              train.class_counts)

    def test_balanced_eval_splits(self):
        _, val_id, test_id, _, _ = gen_longtail(small_config())
        assert val_id.class_counts.tolist() == [7] * 5
        assert test_id.class_counts.tolist() == [9] * 5
        assert np.array_equal(np.bincount(test_id.labels), test_id.class_counts)

    def test_outlier_splits_are_unlabeled(self):
        _, _, _, train_ood, test_ood = gen_longtail(small_config())
        assert np.all(train_ood.labels == -1) and np.all(test_ood.labels == -1)
        assert train_ood.n == 40 and test_ood.n == 30

    def test_same_seed_bit_identical(self):
        first = gen_longtail(small_config(seed=11))
        second = gen_longtail(small_config(seed=11))
        for a, b in zip(first, second):
            assert sets_equal(a, b)

    def test_different_seed_differs(self):
        a = gen_longtail(small_config(seed=1))[0]
        b = gen_longtail(small_config(seed=2))[0]
        assert not np.array_equal(a.inputs, b.inputs)

    def test_cluster_directions_separated(self):
        """Recover every cluster direction from the feature-space mean and
        check all pairwise dot products against the configured bound."""
        config = small_config(features_direct=True, seed=4,
                              within_kappa=200.0, ood_kappa=200.0)
        train, _, _, train_ood, test_ood = gen_longtail(config)
        dirs = []
        for y in range(config.n_classes):
            m = train.inputs[train.labels == y].mean(axis=0)
            dirs.append(m / np.linalg.norm(m))
        for split, clusters in ((train_ood, config.ood_train_clusters),
                                (test_ood, config.ood_test_clusters)):
            for chunk in np.array_split(split.inputs, clusters):
                m = chunk.mean(axis=0)
                dirs.append(m / np.linalg.norm(m))
        dirs = np.stack(dirs)
        dots = dirs @ dirs.T - np.eye(len(dirs))
        # mean recovery is noisy, so allow a small margin above the bound
        assert dots.max() < config.max_direction_dot + 0.05

    def test_features_direct_skips_affine_map(self):
        config = small_config(features_direct=True)
        train, *_ = gen_longtail(config)
        assert train.dim == config.feature_dim
        np.testing.assert_allclose(np.linalg.norm(train.inputs, axis=1), 1.0,
                                   atol=1e-9)

    def test_raw_inputs_not_unit_norm(self):
        train, *_ = gen_longtail(small_config())
        assert train.dim == 2 * 6
        norms = np.linalg.norm(train.inputs, axis=1)
        assert norms.std() > 1e-3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(n_classes=1)
        with pytest.raises(ValueError):
            SynthConfig(imbalance_ratio=0.5)
        with pytest.raises(ValueError):
            SynthConfig(max_direction_dot=1.5)
        with pytest.raises(ValueError):
            SynthConfig(within_kappa=0.0)


class TestFeaturesCsv:
    def test_round_trip_exact(self, tmp_path):
        train, *_ = gen_longtail(small_config())
        path = tmp_path / "train.csv"
        save_features_csv(train, path)
        loaded = load_features_csv(path, n_classes=5)
        assert sets_equal(loaded, train)

    def test_single_outlier_row(self, tmp_path):
        path = tmp_path / "one.csv"
        path.write_text("id,label,f0,f1\n0,-1,0.5,0.5\n")
        loaded = load_features_csv(path)
        assert loaded.n == 1 and loaded.dim == 2
        assert loaded.labels.tolist() == [-1]
        np.testing.assert_array_equal(loaded.inputs, [[0.5, 0.5]])

    def test_short_row_names_line(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("id,label,f0,f1\n0,0,0.5,0.5\n1,0,0.25\n")
        with pytest.raises(ValueError, match="line 3"):
            load_features_csv(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "head.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ValueError, match="line 1"):
            load_features_csv(path)

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "label.csv"
        path.write_text("id,label,f0\n0,-2,0.5\n")
        with pytest.raises(ValueError, match="out of range"):
            load_features_csv(path)

    def test_non_numeric_value_names_line(self, tmp_path):
        path = tmp_path / "garbage.csv"
        path.write_text("id,label,f0\n0,0,x\n")
        with pytest.raises(ValueError, match="line 2"):
            load_features_csv(path)


class TestClassBalancedSubset:
    def make_train(self):
        train, *_ = gen_longtail(small_config(seed=7))
        return train

    def test_generous_budget_returns_everything(self):
        train = self.make_train()
        subset = class_balanced_subset(train, per_class=10 ** 6, seed=0)
        assert subset.n == train.n
        assert np.array_equal(subset.class_counts, train.class_counts)

    def test_one_per_class(self):
        train, *_ = gen_longtail(SynthConfig(seed=1))
        subset = class_balanced_subset(train, per_class=1, seed=0)
        assert subset.n == 10
        assert subset.class_counts.tolist() == [1] * 10

    def test_five_per_class_on_reference_profile(self):
        train, *_ = gen_longtail(SynthConfig(seed=1))
        subset = class_balanced_subset(train, per_class=5, seed=3)
        assert subset.class_counts.tolist() == [5] * 10

    def test_seeded_draw_is_deterministic(self):
        train = self.make_train()
        a = class_balanced_subset(train, per_class=4, seed=9)
        b = class_balanced_subset(train, per_class=4, seed=9)
        c = class_balanced_subset(train, per_class=4, seed=10)
        assert sets_equal(a, b)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_rows_come_from_parent(self):
        train = self.make_train()
        subset = class_balanced_subset(train, per_class=3, seed=2)
        # every drawn row must exist verbatim in the parent split
        for row, label in zip(subset.inputs, subset.labels):
            matches = np.all(train.inputs == row, axis=1)
            assert np.any(matches & (train.labels == label))

    def test_empty_class_rejected(self):
        bad = LabeledSet(inputs=np.zeros((2, 3)), labels=np.array([0, 0]),
                         class_counts=np.array([2, 0]), dim=3)
        with pytest.raises(ValueError, match="class 1"):
            class_balanced_subset(bad, per_class=1, seed=0)

    def test_rejects_zero_budget(self):
        with pytest.raises(ValueError, match="per_class"):
            class_balanced_subset(self.make_train(), per_class=0, seed=0)


class TestManifest:
    def test_records_config_and_sizes(self, tmp_path):
        config = small_config(seed=21)
        path = tmp_path / "manifest.txt"
        save_manifest(path, config, {"train": 123, "test_ood": 30})
        text = path.read_text()
        assert "seed = 21\n" in text
        assert "n_classes = 5\n" in text
        assert "imbalance_ratio = 10.0\n" in text
        assert "rows.train = 123\n" in text
        assert text.endswith("rows.test_ood = 30\n")
