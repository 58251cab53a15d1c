"""Loaders, synthetic gratings, and distinct-label batch sampling."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.data import (BatchSpec, Dataset, generate_synthetic, load_cifar_binary, load_dataset,
                           load_idx, sample_batch, save_dataset)
from gradleak.report import read_ppm, write_ppm


def write_idx_pair(tmp_path, images, labels, prefix="fixture"):
    """Hand-built IDX fixture bytes (big-endian, canonical layout)."""
    m, h, w = images.shape
    img_path = tmp_path / f"{prefix}-images-idx3"
    lab_path = tmp_path / f"{prefix}-labels-idx1"
    img_path.write_bytes(struct.pack(">IIII", 0x00000803, m, h, w) + images.astype(np.uint8).tobytes())
    lab_path.write_bytes(struct.pack(">II", 0x00000801, m) + labels.astype(np.uint8).tobytes())
    return img_path, lab_path


class TestIdx:
    def test_four_image_fixture(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
        labels = np.array([3, 1, 4, 1], dtype=np.uint8)
        ds = load_idx(*write_idx_pair(tmp_path, images, labels))
        assert len(ds) == 4 and ds.image_shape == (1, 28, 28)
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_allclose(ds.images[0, 0], images[0] / 255.0, atol=1e-7)

    def test_pixel_255_maps_to_one(self, tmp_path):
        images = np.full((1, 2, 2), 255, dtype=np.uint8)
        ds = load_idx(*write_idx_pair(tmp_path, images, np.zeros(1, dtype=np.uint8)))
        assert ds.images.max() == 1.0

    def test_wrong_magic_rejected(self, tmp_path):
        img_path, lab_path = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8),
                                            np.zeros(1, dtype=np.uint8))
        raw = bytearray(img_path.read_bytes())
        raw[3] = 0x07
        img_path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_idx(img_path, lab_path)

    def test_count_mismatch_rejected(self, tmp_path):
        img_path, _ = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8),
                                     np.zeros(2, dtype=np.uint8), prefix="two")
        _, lab3 = write_idx_pair(tmp_path, np.zeros((3, 2, 2), dtype=np.uint8),
                                 np.zeros(3, dtype=np.uint8), prefix="three")
        with pytest.raises(ValueError, match="mismatch"):
            load_idx(img_path, lab3)


class TestCifar:
    def test_single_constant_record(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes([7]) + bytes([128]) * 3072)
        ds = load_cifar_binary([path])
        assert len(ds) == 1 and ds.labels[0] == 7
        np.testing.assert_allclose(ds.images[0], 128 / 255.0, atol=1e-7)
        assert ds.image_shape == (3, 32, 32)

    def test_two_record_fixture(self, tmp_path):
        rng = np.random.default_rng(1)
        rec = lambda lab: bytes([lab]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
        path = tmp_path / "batch.bin"
        path.write_bytes(rec(0) + rec(9))
        ds = load_cifar_binary([path])
        assert len(ds) == 2
        np.testing.assert_array_equal(ds.labels, [0, 9])

    def test_truncated_record_rejected(self, tmp_path):
        path = tmp_path / "batch.bin"
        path.write_bytes(bytes(3073 + 10))
        with pytest.raises(ValueError, match="multiple of 3073"):
            load_cifar_binary([path])


class TestSynthetic:
    def test_deterministic_and_counted(self):
        a = generate_synthetic(64, 20, size=28, seed=0)
        b = generate_synthetic(64, 20, size=28, seed=0)
        assert len(a) == 1280
        assert a.images.tobytes() == b.images.tobytes()
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0

    def test_same_class_shares_grating_with_fresh_noise(self):
        ds = generate_synthetic(4, 3, size=16, seed=2, noise=0.05)
        first, second = ds.images[0], ds.images[1]
        assert ds.labels[0] == ds.labels[1]
        assert not np.array_equal(first, second)  # noise differs
        # noise is bounded, the underlying grating is shared
        assert np.abs(first - second).max() < 0.5
        other = ds.images[3]  # different class
        assert np.abs(first - other).max() > 0.3

    def test_class_limit(self):
        with pytest.raises(ValueError, match="256"):
            generate_synthetic(512, 1)


class TestSampleBatch:
    def test_full_class_coverage_when_n_equals_k(self):
        ds = generate_synthetic(8, 5, size=8, seed=3)
        _, labels, _ = sample_batch(ds, BatchSpec(batch_size=8, seed=0))
        assert sorted(labels.tolist()) == list(range(8))

    def test_anchor_always_included_at_slot_zero(self):
        ds = generate_synthetic(8, 5, size=8, seed=3)
        for seed in range(10):
            images, labels, idx = sample_batch(ds, BatchSpec(batch_size=4, anchor=17, seed=seed))
            assert idx[0] == 17
            np.testing.assert_array_equal(images[0], ds.images[17])
            assert labels[0] == ds.labels[17]

    def test_thousand_draws_all_distinct(self):
        ds = generate_synthetic(64, 4, size=8, seed=4)
        for seed in range(1000):
            _, labels, _ = sample_batch(ds, BatchSpec(batch_size=8, seed=seed))
            assert len(set(labels.tolist())) == 8

    def test_oversized_distinct_batch_rejected(self):
        ds = generate_synthetic(4, 5, size=8, seed=5)
        with pytest.raises(ValueError, match="distinct"):
            sample_batch(ds, BatchSpec(batch_size=5, seed=0))

    def test_duplicates_allowed_when_disabled(self):
        ds = generate_synthetic(2, 3, size=8, seed=6)
        _, labels, _ = sample_batch(ds, BatchSpec(batch_size=6, distinct_labels=False, seed=0))
        assert len(labels) == 6  # must repeat labels, only 2 classes exist

    def test_deterministic_given_seed(self):
        ds = generate_synthetic(16, 4, size=8, seed=7)
        spec = BatchSpec(batch_size=5, anchor=3, seed=123)
        a = sample_batch(ds, spec)
        b = sample_batch(ds, spec)
        np.testing.assert_array_equal(a[2], b[2])

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_distinct_labels_property(self, seed):
        ds = generate_synthetic(16, 3, size=8, seed=8)
        _, labels, _ = sample_batch(ds, BatchSpec(batch_size=6, seed=seed))
        assert len(set(labels.tolist())) == len(labels)


class TestPersistence:
    def test_dataset_container_round_trip(self, tmp_path):
        ds = generate_synthetic(8, 3, size=8, seed=9, name="rt")
        path = tmp_path / "ds.glds"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.name == "rt" and back.num_classes == 8
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_ppm_round_trip_within_one_level(self, tmp_path):
        ds = generate_synthetic(4, 2, size=12, seed=10)
        path = tmp_path / "img.ppm"
        write_ppm(path, ds.images[0])
        back = read_ppm(path)
        assert back.shape == (3, 12, 12)
        assert np.abs(back[0] - ds.images[0, 0]).max() <= 1.0 / 255.0
