import gzip
import os
import struct

import numpy as np
import pytest

from conftest import MNIST_DIR, requires_mnist
from errors import ConfigError, DataError
from mnist_data import (
    IDX_FLOAT,
    LABELS_MAGIC,
    LabeledDataset,
    batch_indices,
    batches,
    fingerprint,
    load_idx,
    load_mnist,
    read_idx_array,
    sample_negative,
    sample_negatives,
    subset,
    write_idx,
    write_idx_array,
)
from synthetic_digits import make_dataset, write_synthetic_mnist


def write_raw(path, magic, dims, payload):
    with open(path, 'wb') as f:
        f.write(struct.pack('>I', magic))
        f.write(struct.pack(f'>{len(dims)}I', *dims))
        f.write(payload)


class TestIdxCodec:
    def test_two_image_file_scales_pixels(self, tmp_path):
        images = tmp_path / 'images'
        labels = tmp_path / 'labels'
        payload = bytes([0, 255] + [0] * (28 * 28 - 2)) + bytes(28 * 28)
        write_raw(images, 0x00000803, (2, 28, 28), payload)
        write_raw(labels, LABELS_MAGIC, (2,), bytes([3, 7]))

        ds = load_idx(str(images), str(labels))
        assert ds.images.shape == (2, 1, 28, 28)
        assert ds.images.dtype == np.float32
        assert ds.images[0, 0, 0, 1] == 1.0
        assert ds.images[0, 0, 0, 0] == 0.0
        np.testing.assert_array_equal(ds.labels, [3, 7])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad'
        write_raw(path, 0x00000802, (1,), bytes([1]))
        with pytest.raises(DataError, match='magic'):
            read_idx_array(str(path), expected_magic=LABELS_MAGIC)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / 'short'
        write_raw(path, 0x00000803, (2, 28, 28), bytes(100))
        with pytest.raises(DataError, match='truncated'):
            read_idx_array(str(path))

    def test_truncated_header(self, tmp_path):
        path = tmp_path / 'header'
        with open(path, 'wb') as f:
            f.write(struct.pack('>I', 0x00000803))
            f.write(struct.pack('>I', 2))
        with pytest.raises(DataError, match='truncated'):
            read_idx_array(str(path))

    def test_count_mismatch(self, tmp_path):
        images = tmp_path / 'images'
        labels = tmp_path / 'labels'
        write_raw(images, 0x00000803, (2, 28, 28), bytes(2 * 28 * 28))
        write_raw(labels, LABELS_MAGIC, (3,), bytes([0, 1, 2]))
        with pytest.raises(DataError, match='mismatch'):
            load_idx(str(images), str(labels))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match='not found'):
            read_idx_array(str(tmp_path / 'nope'))

    def test_float_payload_is_exact(self, tmp_path):
        values = np.array([[0.0, 0.25], [1.0, 1e-7]], dtype=np.float32)
        path = str(tmp_path / 'floats')
        write_idx_array(path, values, IDX_FLOAT)
        np.testing.assert_array_equal(read_idx_array(path), values)

    def test_gzip_is_transparent(self, tmp_path):
        path = str(tmp_path / 'labels.gz')
        write_idx_array(path, np.array([4, 2], dtype=np.uint8))
        with gzip.open(path, 'rb') as f:
            assert f.read(4) == struct.pack('>I', LABELS_MAGIC)
        np.testing.assert_array_equal(read_idx_array(path), [4, 2])

    def test_write_then_load_preserves_quantised_pixels(self, tmp_path):
        ds = make_dataset(20, seed=3)
        write_idx(ds, str(tmp_path / 'i'), str(tmp_path / 'l'))
        again = load_idx(str(tmp_path / 'i'), str(tmp_path / 'l'))
        np.testing.assert_array_equal(again.images, ds.images)
        np.testing.assert_array_equal(again.labels, ds.labels)

    def test_load_mnist_finds_canonical_names(self, tmp_path):
        write_synthetic_mnist(str(tmp_path), n_train=30, n_test=10)
        train = load_mnist(str(tmp_path), 'train')
        test = load_mnist(str(tmp_path), 'test')
        assert (len(train), len(test)) == (30, 10)
        assert test.split == 'test'

    def test_load_mnist_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match='MNIST file not found'):
            load_mnist(str(tmp_path / 'empty'), 'train')

    def test_unknown_split(self, tmp_path):
        with pytest.raises(DataError, match='unknown split'):
            load_mnist(str(tmp_path), 'validation')


class TestDataset:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(DataError, match='pixels'):
            LabeledDataset(images=np.full((1, 1, 28, 28), 1.5), labels=[0])

    def test_rejects_bad_labels(self):
        with pytest.raises(DataError, match='labels'):
            LabeledDataset(images=np.zeros((1, 1, 28, 28)), labels=[10])

    def test_class_index_covers_every_sample(self, digits_train):
        covered = np.sort(np.concatenate(list(digits_train.class_index.values())))
        np.testing.assert_array_equal(covered, np.arange(len(digits_train)))
        assert digits_train.classes == tuple(range(10))

    def test_subset_is_a_prefix(self, digits_train):
        small = subset(digits_train, 25)
        assert len(small) == 25
        np.testing.assert_array_equal(small.labels, digits_train.labels[:25])
        assert subset(digits_train, None) is digits_train
        assert subset(digits_train, 10_000) is digits_train

    def test_fingerprint_tracks_content(self):
        assert fingerprint(make_dataset(10, seed=0)) == fingerprint(make_dataset(10, seed=0))
        assert fingerprint(make_dataset(10, seed=0)) != fingerprint(make_dataset(10, seed=1))


class TestBatching:
    def test_partition_of_all_indices(self):
        chunks = list(batch_indices(10, 3, seed=0))
        assert [len(c) for c in chunks] == [3, 3, 3, 1]
        np.testing.assert_array_equal(np.sort(np.concatenate(chunks)), np.arange(10))

    def test_same_seed_same_order(self):
        first = np.concatenate(list(batch_indices(50, 8, seed=7, epoch=2)))
        second = np.concatenate(list(batch_indices(50, 8, seed=7, epoch=2)))
        np.testing.assert_array_equal(first, second)

    def test_epoch_changes_order(self):
        first = np.concatenate(list(batch_indices(50, 8, seed=7, epoch=0)))
        second = np.concatenate(list(batch_indices(50, 8, seed=7, epoch=1)))
        assert not np.array_equal(first, second)

    def test_sequence_seed(self):
        first = np.concatenate(list(batch_indices(20, 5, seed=[3, 2])))
        second = np.concatenate(list(batch_indices(20, 5, seed=[3, 2])))
        np.testing.assert_array_equal(first, second)

    def test_rejects_empty_batches(self):
        with pytest.raises(ConfigError):
            list(batch_indices(10, 0, seed=0))

    def test_batches_pair_images_with_labels(self, digits_test):
        for images, labels in batches(digits_test, 16, seed=0):
            assert images.shape[0] == labels.shape[0]
            assert images.shape[1:] == (1, 28, 28)


class TestNegativeSampling:
    def test_negative_never_shares_label(self, digits_train, rng):
        for y in range(10):
            for _ in range(20):
                _, label = sample_negative(digits_train, y, rng)
                assert label != y

    def test_batch_form(self, digits_train, rng):
        labels = digits_train.labels[:40]
        images, negative_labels = sample_negatives(digits_train, labels, rng)
        assert images.shape == (40, 1, 28, 28)
        assert np.all(negative_labels != labels)

    def test_roughly_uniform_over_complement(self, digits_train):
        rng = np.random.default_rng(0)
        _, drawn = sample_negatives(digits_train, np.zeros(9000, dtype=int), rng)
        counts = np.bincount(drawn, minlength=10)
        assert counts[0] == 0
        # each of the nine other classes holds 1/9 of the complement
        assert np.all(np.abs(counts[1:] / 9000 - 1 / 9) < 0.02)

    def test_single_class_fails(self, rng):
        ds = LabeledDataset(images=np.zeros((3, 1, 28, 28)), labels=[4, 4, 4])
        with pytest.raises(DataError, match='two classes'):
            sample_negative(ds, 4, rng)
        with pytest.raises(DataError, match='two classes'):
            sample_negatives(ds, [4], rng)

    def test_deterministic_per_generator(self, digits_train):
        a = sample_negatives(digits_train, digits_train.labels[:10], np.random.default_rng(5))[1]
        b = sample_negatives(digits_train, digits_train.labels[:10], np.random.default_rng(5))[1]
        np.testing.assert_array_equal(a, b)


@requires_mnist
@pytest.mark.slow
def test_real_mnist_sizes():
    train = load_mnist(MNIST_DIR, 'train')
    test = load_mnist(MNIST_DIR, 'test')
    assert train.images.shape == (60000, 1, 28, 28)
    assert test.images.shape == (10000, 1, 28, 28)
    assert 0.0 <= float(train.images.min()) and float(train.images.max()) <= 1.0
