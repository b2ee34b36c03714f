"""
Unit tests for datasets, augmentation and batching.

Tests cover:
- CIFAR-100 binary parsing and format errors
- Synthetic tasks and raw image folders
- Crop, flip and RandAugment
- MixUp/CutMix label arithmetic
- Top-k accuracy
- Deterministic loader output with and without prefetch
"""

import numpy as np
import pytest

from config import AugmentationConfig, DatasetSpec
from errors import DatasetFormatError, ShapeError
from data import (
    Batch,
    DataLoader,
    Dataset,
    basic_augment,
    cutmix,
    hflip,
    load_cifar100,
    load_dataset,
    load_raw_folder,
    mix_batch,
    mixup,
    one_hot,
    quadrant_of,
    randaugment,
    random_crop,
    resize,
    synthetic_dataset,
    topk_accuracy,
    write_cifar100,
)
from tokenization import Normalization


@pytest.mark.unit
@pytest.mark.data
class TestCifar:
    """CIFAR-100 binary records."""

    def test_round_trip(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 32, 32, 3)).astype(np.uint8)
        labels = np.array([5, 99, 0])
        write_cifar100(tmp_path / "train.bin", images, labels)
        dataset = load_cifar100(tmp_path, "train")
        np.testing.assert_array_equal(dataset.images, images)
        np.testing.assert_array_equal(dataset.labels, labels)
        assert dataset.num_classes == 100

    def test_record_layout(self, tmp_path):
        images = np.zeros((1, 32, 32, 3), dtype=np.uint8)
        images[0, 0, 1, 2] = 7
        path = write_cifar100(tmp_path / "one.bin", images, np.array([3]), coarse_labels=np.array([1]))
        raw = path.read_bytes()
        assert len(raw) == 3074
        assert raw[0] == 1 and raw[1] == 3
        # blue plane starts after the header and two 1024-byte planes
        assert raw[2 + 2048 + 1] == 7

    def test_truncated_file(self, tmp_path, rng):
        path = write_cifar100(tmp_path / "train.bin", rng.integers(0, 256, size=(1, 32, 32, 3)), np.array([1]))
        path.write_bytes(path.read_bytes() + b"\x00" * 10)
        with pytest.raises(DatasetFormatError) as excinfo:
            load_cifar100(path)
        assert excinfo.value.offset == 3074

    def test_label_out_of_range(self, tmp_path):
        path = write_cifar100(tmp_path / "test.bin", np.zeros((2, 32, 32, 3)), np.array([4, 150]))
        with pytest.raises(DatasetFormatError) as excinfo:
            load_cifar100(tmp_path, "val")
        assert excinfo.value.offset == 3074 + 1
        assert str(path) in str(excinfo.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cifar100(tmp_path / "absent.bin")


@pytest.mark.unit
@pytest.mark.data
class TestSources:
    """Synthetic tasks, raw folders and dataset validation."""

    def test_quadrant_label_matches_blob(self):
        dataset = synthetic_dataset("quadrant", 24, seed=3, image_size=8)
        for img, label in zip(dataset.images, dataset.labels):
            rows, cols = np.nonzero((img == 255).all(axis=-1))
            assert quadrant_of(int(rows.min()), int(cols.min()), 8) == label
            assert quadrant_of(int(rows.max()), int(cols.max()), 8) == label

    def test_color_label_is_dominant_channel(self):
        dataset = synthetic_dataset("color", 12, seed=1, image_size=4)
        means = dataset.images.reshape(12, -1, 3).mean(axis=1)
        np.testing.assert_array_equal(means.argmax(axis=1), dataset.labels)

    def test_synthetic_is_seeded_and_balanced(self):
        a = synthetic_dataset("quadrant", 18, seed=9)
        b = synthetic_dataset("quadrant", 18, seed=9)
        np.testing.assert_array_equal(a.images, b.images)
        counts = a.class_histogram()
        assert counts.max() - counts.min() <= 1

    def test_load_dataset_splits_differ(self):
        spec = DatasetSpec(source="synthetic", count=12, val_count=4, image_size=8)
        train, val = load_dataset(spec, "train"), load_dataset(spec, "val")
        assert (len(train), len(val)) == (12, 4)
        assert not np.array_equal(train.images[:4], val.images)

    def test_raw_folder(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(2, 4, 4, 3)).astype(np.uint8)
        for i, img in enumerate(imgs):
            img.tofile(tmp_path / f"img{i}.rgb")
        (tmp_path / "index.tsv").write_text("img0.rgb\t1\nimg1.rgb\t0\n")
        dataset = load_raw_folder(tmp_path)
        np.testing.assert_array_equal(dataset.images, imgs)
        assert dataset.labels.tolist() == [1, 0]
        assert dataset.num_classes == 2

    def test_raw_folder_class_count_from_caller(self, tmp_path, rng):
        for i in range(3):
            rng.integers(0, 256, size=(4, 4, 3)).astype(np.uint8).tofile(tmp_path / f"img{i}.rgb")
        (tmp_path / "index.tsv").write_text("img0.rgb\t0\nimg1.rgb\t2\nimg2.rgb\t0\n")
        assert load_raw_folder(tmp_path).num_classes == 3
        assert load_raw_folder(tmp_path, num_classes=5).num_classes == 5
        with pytest.raises(DatasetFormatError, match="labels span"):
            load_raw_folder(tmp_path, num_classes=2)

    def test_raw_folder_malformed_index(self, tmp_path):
        (tmp_path / "index.tsv").write_text("only-a-path\n")
        with pytest.raises(DatasetFormatError):
            load_raw_folder(tmp_path)

    def test_resize_nearest(self):
        img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        up = resize(img, 4)
        assert up.shape == (4, 4, 3)
        np.testing.assert_array_equal(up[:2, :2], np.broadcast_to(img[0, 0], (2, 2, 3)))
        np.testing.assert_array_equal(up[3, 3], img[1, 1])

    def test_dataset_rejects_float_images(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((1, 2, 2, 3)), np.zeros(1, dtype=np.int64), 2, Normalization((0, 0, 0), (1, 1, 1)))

    def test_dataset_rejects_bad_labels(self):
        with pytest.raises(ShapeError):
            Dataset(
                np.zeros((1, 2, 2, 3), dtype=np.uint8), np.array([4]), 2, Normalization((0, 0, 0), (1, 1, 1))
            )


@pytest.mark.unit
@pytest.mark.data
class TestAugmentation:
    """Per-image transforms."""

    def test_hflip(self):
        img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        np.testing.assert_array_equal(hflip(img)[0, 0], img[0, 1])

    def test_random_crop_keeps_size(self, rng):
        img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        assert random_crop(img, 2, rng).shape == (8, 8, 3)
        assert random_crop(img, 0, rng) is img

    def test_disabled_is_identity(self, rng):
        img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        cfg = AugmentationConfig.disabled()
        assert basic_augment(img, cfg, rng) is img
        assert randaugment(img, cfg, rng) is img

    def test_randaugment_output(self, rng):
        img = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
        cfg = AugmentationConfig(randaug_prob=1.0, randaug_ops=4)
        out = randaugment(img, cfg, np.random.default_rng(5))
        assert out.shape == img.shape and out.dtype == np.uint8


@pytest.mark.unit
@pytest.mark.data
class TestMixing:
    """MixUp, CutMix and top-k."""

    def _batch(self) -> Batch:
        images = np.stack([np.zeros((8, 8, 3)), np.ones((8, 8, 3))]).astype(np.float32)
        return Batch(images=images, labels=one_hot(np.array([0, 1]), 2))

    def test_mixup_lambda_one_is_identity(self, rng):
        batch = self._batch()
        mixed = mixup(batch, 0.8, rng, lam=1.0)
        np.testing.assert_array_equal(mixed.images, batch.images)
        np.testing.assert_array_equal(mixed.labels, batch.labels)

    def test_mixup_blends_labels(self, rng):
        mixed = mixup(self._batch(), 0.8, rng, lam=0.25)
        np.testing.assert_allclose(mixed.labels[0], [0.25, 0.75])
        np.testing.assert_allclose(mixed.images[0], 0.75)

    def test_cutmix_labels_match_pasted_area(self):
        mixed = cutmix(self._batch(), 1.0, np.random.default_rng(2), lam=0.75)
        pasted = float(mixed.images[0, ..., 0].sum()) / 64.0
        assert mixed.labels[0, 1] == pytest.approx(pasted)
        assert mixed.labels[0, 1] == pytest.approx(1.0 - mixed.lam)
        np.testing.assert_allclose(mixed.labels.sum(axis=1), 1.0, atol=1e-6)

    def test_single_sample_batch_not_mixed(self, rng):
        batch = Batch(images=np.zeros((1, 4, 4, 3), dtype=np.float32), labels=one_hot(np.array([0]), 2))
        assert mix_batch(batch, AugmentationConfig(), rng) is batch

    def test_topk_accuracy(self):
        logits = np.array([[0.1, 0.5, 0.4], [0.9, 0.05, 0.05]])
        acc = topk_accuracy(logits, np.array([2, 0]), ks=(1, 2, 5))
        assert acc == {1: 0.5, 2: 1.0, 5: 1.0}


@pytest.mark.unit
@pytest.mark.data
class TestDataLoader:
    """Seeded batching."""

    def test_batches_cover_dataset(self, tiny_datasets):
        train, _ = tiny_datasets
        loader = DataLoader(train, batch_size=5, shuffle=True, seed=1)
        batches = list(loader.epoch(0))
        assert len(loader) == len(batches) == 4
        targets = np.concatenate([b.targets for b in batches])
        assert sorted(targets.tolist()) == sorted(train.labels.tolist())

    def test_prefetch_does_not_change_batches(self, tiny_datasets):
        train, _ = tiny_datasets
        aug = AugmentationConfig(crop_padding=1)
        serial = list(DataLoader(train, 4, aug, seed=7).epoch(2))
        threaded = list(DataLoader(train, 4, aug, seed=7, prefetch=3).epoch(2))
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a.images, b.images)
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.seeds, b.seeds)

    def test_epochs_reshuffle(self, tiny_datasets):
        train, _ = tiny_datasets
        loader = DataLoader(train, 4, seed=0)
        assert not np.array_equal(loader.order(0), loader.order(1))
        np.testing.assert_array_equal(loader.order(3), DataLoader(train, 4, seed=0).order(3))

    def test_unshuffled_order(self, tiny_datasets):
        _, val = tiny_datasets
        batch = next(iter(DataLoader(val, 8, shuffle=False)))
        np.testing.assert_array_equal(batch.targets, val.labels)
        assert batch.images.dtype == np.float32
