import numpy as np
import pytest
import torch

from pairmask.data import make_synthetic_dataset
from pairmask.evaluation import (
    FeatureTable,
    confusion_matrix,
    extract_features,
    finetune_small,
    linear_probe,
    params_checksum,
    stratified_split,
    write_confusion_png,
    write_results_csv,
)
from pairmask.model import Encoder, ModelConfig
from pairmask.pipeline import TrainConfig

torch.set_default_dtype(torch.float64)
torch.set_num_threads(1)

TOY_MODEL = ModelConfig.toy(image_size=32)


def make_encoder(seed=0):
    torch.manual_seed(seed)
    return Encoder(TOY_MODEL).double()


class TestExtractFeatures:
    def test_deterministic_and_frozen(self):
        enc = make_encoder()
        dataset = make_synthetic_dataset(6, 0, 32)
        before = params_checksum(enc)
        a = extract_features(enc, dataset, "t")
        b = extract_features(enc, dataset, "t")
        assert np.array_equal(a.features, b.features)
        assert params_checksum(enc) == before

    def test_feature_dim_is_encoder_dim(self):
        table = extract_features(make_encoder(), make_synthetic_dataset(3, 1, 32))
        assert table.features.shape == (3, TOY_MODEL.encoder_dim)
        assert np.all(np.isfinite(table.features))

    def test_unlabeled_pair_rejected(self):
        dataset = make_synthetic_dataset(2, 2, 32)
        dataset[1].label = None
        with pytest.raises(ValueError, match=dataset[1].pair_id):
            extract_features(make_encoder(), dataset)

    def test_different_encoders_differ(self):
        dataset = make_synthetic_dataset(3, 3, 32)
        a = extract_features(make_encoder(0), dataset)
        b = extract_features(make_encoder(1), dataset)
        assert not np.allclose(a.features, b.features)


class TestStratifiedSplit:
    def test_partition_and_coverage(self):
        labels = np.repeat(np.arange(4), 25)
        train, test = stratified_split(labels, 0)
        assert len(train) + len(test) == 100
        assert not set(train) & set(test)
        # each class contributes ~20% of its samples to the test side
        for cls in range(4):
            assert (labels[test] == cls).sum() == 5

    def test_seed_changes_split(self):
        labels = np.repeat(np.arange(2), 50)
        _, t0 = stratified_split(labels, 0)
        _, t1 = stratified_split(labels, 1)
        assert not np.array_equal(t0, t1)

    def test_deterministic(self):
        labels = np.repeat(np.arange(3), 20)
        assert np.array_equal(
            stratified_split(labels, 5)[0], stratified_split(labels, 5)[0]
        )


class TestLinearProbe:
    def test_separable_features_perfect(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(4), 30)
        feats = np.eye(4)[labels] * 10 + rng.normal(scale=0.01, size=(120, 4))
        acc = linear_probe(FeatureTable(feats, labels, "sep"), split_seed=0)
        assert acc == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(400, 8))
        labels = rng.integers(0, 4, size=400)
        acc = linear_probe(FeatureTable(feats, labels, "noise"), split_seed=0)
        assert abs(acc - 0.25) < 0.08

    def test_identical_features_majority_rate(self):
        labels = np.array([0] * 30 + [1] * 10)
        feats = np.ones((40, 3))
        acc = linear_probe(FeatureTable(feats, labels, "const"), split_seed=0)
        # the classifier can only predict one class; test split holds 6 of
        # class 0 and 2 of class 1
        assert acc == pytest.approx(6 / 8)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            linear_probe(FeatureTable(np.ones((20, 2)), np.zeros(20), "x"), 0)

    def test_tiny_class_rejected(self):
        labels = np.array([0] * 20 + [1] * 3)
        with pytest.raises(ValueError):
            linear_probe(FeatureTable(np.ones((23, 2)), labels, "x"), 0)

    def test_accuracy_in_unit_interval_and_confusion(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(3), 20)
        feats = rng.normal(size=(60, 5)) + np.eye(5)[labels % 5]
        acc, cm = linear_probe(
            FeatureTable(feats, labels, "mix"), split_seed=0, return_confusion=True
        )
        assert 0.0 <= acc <= 1.0
        assert cm.sum() == 12  # 20% of 60
        assert acc == pytest.approx(np.trace(cm) / cm.sum())


class TestConfusionMatrix:
    def test_hand_example(self):
        cm = confusion_matrix(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
        assert np.array_equal(cm, [[1, 1], [0, 2]])

    def test_row_sums_are_class_counts(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 4, size=50)
        p = rng.integers(0, 4, size=50)
        cm = confusion_matrix(y, p, 4)
        assert np.array_equal(cm.sum(axis=1), np.bincount(y, minlength=4))


class TestFinetune:
    def cfg(self):
        return TrainConfig(
            base_lr=1e-3,
            warmup_lr=1e-6,
            warmup_epochs=1,
            total_epochs=4,
            batch_size=8,
            grad_accum_steps=1,
            seed=0,
        )

    def test_zero_epochs_is_head_at_init(self):
        dataset = make_synthetic_dataset(60, 4, 32)
        acc = finetune_small(make_encoder(), dataset, epochs=0, cfg=self.cfg())
        assert 0.0 <= acc <= 1.0

    def test_seeded_reproducibility(self):
        dataset = make_synthetic_dataset(60, 5, 32)
        a = finetune_small(make_encoder(7), dataset, epochs=1, cfg=self.cfg())
        b = finetune_small(make_encoder(7), dataset, epochs=1, cfg=self.cfg())
        assert a == b

    def test_degenerate_labels_rejected(self):
        dataset = make_synthetic_dataset(60, 6, 32)
        for p in dataset:
            p.label = 0
        with pytest.raises(ValueError):
            finetune_small(make_encoder(), dataset, epochs=1, cfg=self.cfg())


class TestArtifacts:
    def test_results_csv_round_trip(self, tmp_path):
        path = tmp_path / "results.csv"
        write_results_csv(path, [("ckpt_final", "linear_probe", 0.8125, 3)])
        lines = path.read_text().splitlines()
        assert lines[0] == "checkpoint_tag,protocol,accuracy,seed"
        assert lines[1] == "ckpt_final,linear_probe,0.8125,3"

    def test_confusion_png_written_and_stable(self, tmp_path):
        cm = np.array([[5, 1], [2, 4]])
        write_confusion_png(tmp_path / "a.png", cm)
        write_confusion_png(tmp_path / "b.png", cm)
        assert (tmp_path / "a.png").stat().st_size > 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
