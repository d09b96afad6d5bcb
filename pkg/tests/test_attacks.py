import numpy as np
import pytest

import tensor_autodiff as ad
from attacks import (
    ABSTAIN,
    INVARIANCE,
    SENSITIVITY,
    AttackConfig,
    AttackSet,
    Oracle,
    attack_success_rates,
    build_attack_set,
    fgsm,
    find_invariance_targets,
    invariance_attack,
    is_admitted,
    load_attack_set,
    oracle_label,
    project_into_ball,
    save_attack_set,
    shift_image,
    shift_offsets,
)
from conftest import MNIST_DIR, requires_mnist
from errors import AttackError, ConfigError, DataError
from mnist_data import LabeledDataset, load_mnist, subset
from tensor_autodiff import Tensor


class PixelModel:
    """Two-class linear model on raw pixels: logit 1 reads pixel (0, 0, 0)"""

    def __init__(self, weight_on_first_pixel=1.0):
        w = np.zeros((28 * 28, 10), np.float32)
        w[0, 1] = weight_on_first_pixel
        self.w = Tensor(w, requires_grad=True)

    def parameters(self):
        return [self.w]

    def __call__(self, x):
        logits = ad.matmul(ad.reshape(x, (x.shape[0], -1)), self.w)
        return logits, logits


def blob(dy=0, dx=0, value=1.0, size=4):
    """(1, 28, 28) image with a square blob near the centre"""
    img = np.zeros((1, 28, 28), np.float32)
    img[0, 12 + dy:12 + dy + size, 12 + dx:12 + dx + size] = value
    return img


def dataset(images, labels):
    return LabeledDataset(images=np.stack(images), labels=labels)


class TestAttackConfig:
    def test_defaults_per_kind(self):
        assert AttackConfig.for_kind(SENSITIVITY).epsilon == 0.1
        assert AttackConfig.for_kind(INVARIANCE).epsilon == 0.4

    @pytest.mark.parametrize('eps', [0.0, -0.1, 1.5])
    def test_epsilon_range(self, eps):
        with pytest.raises(ConfigError, match='epsilon'):
            AttackConfig(epsilon=eps)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            AttackConfig(kind='rotation')


class TestFgsm:
    def test_zero_gradient_leaves_image(self):
        x = np.full((1, 1, 28, 28), 0.5, np.float32)
        np.testing.assert_array_equal(fgsm(PixelModel(0.0), x, [0], 0.3), x)

    def test_interior_pixel_moves_by_epsilon(self):
        x = np.full((1, 1, 28, 28), 0.5, np.float32)
        x_star = fgsm(PixelModel(), x, [0], 0.3)
        assert x_star[0, 0, 0, 0] == pytest.approx(0.8, abs=1e-6)
        # every other pixel has zero gradient
        np.testing.assert_array_equal(x_star.reshape(-1)[1:], x.reshape(-1)[1:])

    def test_clipping(self):
        x = np.full((1, 1, 28, 28), 0.9, np.float32)
        assert fgsm(PixelModel(), x, [0], 0.3)[0, 0, 0, 0] == 1.0

    def test_leaves_parameters_untouched(self):
        model = PixelModel()
        before = model.w.data.copy()
        fgsm(model, np.full((2, 1, 28, 28), 0.5, np.float32), [0, 3], 0.1)
        np.testing.assert_array_equal(model.w.data, before)
        assert model.w.grad is None
        assert model.w.requires_grad

    def test_each_pixel_moves_by_epsilon_zero_or_clips(self, tiny_model, digits_test):
        x = digits_test.images[:6]
        x_star = fgsm(tiny_model, x, digits_test.labels[:6], 0.1)
        delta = np.abs(x_star.astype(np.float64) - x)
        at_bound = (x_star == 0.0) | (x_star == 1.0)
        moved_exactly = np.isclose(delta, 0.1, atol=1e-6) | (delta == 0.0)
        assert np.all(moved_exactly | at_bound)
        assert delta.max() <= 0.1 + 1e-6


class TestOracle:
    def test_exact_training_image_with_k1(self, digits_train):
        oracle = Oracle(digits_train, k=1)
        assert oracle_label(oracle, digits_train.images[17]) == int(digits_train.labels[17])

    def test_abstains_below_tau(self):
        ref = dataset([blob(value=v) for v in (0.1, 0.2, 0.3, 0.4, 0.5)], [1, 1, 1, 2, 2])
        query = np.zeros((1, 28, 28), np.float32)
        assert oracle_label(Oracle(ref, k=5, tau=0.8), query) == ABSTAIN
        assert oracle_label(Oracle(ref, k=5, tau=0.6), query) == 1

    def test_tied_vote_goes_to_nearest(self):
        ref = dataset([blob(value=0.9), blob(value=0.2)], [3, 7])
        query = np.zeros((1, 28, 28), np.float32)
        assert oracle_label(Oracle(ref, k=2, tau=0.5), query) == 7

    def test_equal_distances_order_by_index(self):
        ref = dataset([blob(value=0.5), blob(value=0.9), blob(value=0.5)], [4, 5, 6])
        neighbours = Oracle(ref, k=2).neighbours(np.zeros((1, 1, 28, 28), np.float32))
        np.testing.assert_array_equal(neighbours, [[0, 2]])

    def test_deterministic_and_blocked(self, digits_train, digits_test):
        small_blocks = Oracle(digits_train, k=5, block_size=7).label(digits_test.images)
        one_block = Oracle(digits_train, k=5, block_size=1000).label(digits_test.images)
        np.testing.assert_array_equal(small_blocks, one_block)
        np.testing.assert_array_equal(small_blocks, Oracle(digits_train, k=5, block_size=7).label(digits_test.images))

    def test_verdicts_are_labels_or_abstain(self, digits_train, digits_test):
        verdicts = Oracle(digits_train).label(digits_test.images)
        assert set(verdicts.tolist()) <= set(range(10)) | {ABSTAIN}

    def test_empty_reference(self):
        empty = LabeledDataset(images=np.zeros((0, 1, 28, 28)), labels=np.zeros(0, dtype=int))
        with pytest.raises(AttackError, match='non-empty'):
            Oracle(empty)


class TestInvariance:
    def test_shift_image_zero_fills(self):
        img = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
        np.testing.assert_array_equal(shift_image(img, 1, 0)[0], [[0, 0, 0], [0, 1, 2], [3, 4, 5]])
        np.testing.assert_array_equal(shift_image(img, 0, -1)[0], [[1, 2, 0], [4, 5, 0], [7, 8, 0]])
        np.testing.assert_array_equal(shift_image(img, 0, 0), img)

    def test_offsets(self):
        offsets = shift_offsets(2)
        assert len(offsets) == 25
        assert offsets[0] == (-2, -2) and offsets[12] == (0, 0)

    def test_finds_shifted_different_class_image(self):
        train = dataset([blob(), blob(dy=1, dx=-1, value=0.5), blob(dy=-6, dx=6)], [3, 5, 4])
        query = blob(dy=1, dx=-1)
        found = find_invariance_targets(query, [5], train)
        assert found.target_index[0] == 0
        assert (found.shift_dy[0], found.shift_dx[0]) == (1, -1)
        np.testing.assert_array_equal(found.images[0], query)

    def test_ties_prefer_lower_index(self):
        train = dataset([blob(value=0.3), blob(dy=-8), blob(dy=-8), blob(value=0.3)], [5, 2, 6, 1])
        found = find_invariance_targets(blob(dy=-8), [5], train, shift_radius=0)
        assert found.target_index[0] == 1

    def test_no_different_class(self):
        train = dataset([blob(), blob(dy=2)], [4, 4])
        with pytest.raises(AttackError, match='other than 4'):
            find_invariance_targets(blob(), [4], train)

    def test_projection(self):
        x = np.full((2, 2), 0.5, np.float32)
        target = np.array([[1.0, 0.0], [0.6, 0.5]], np.float32)
        np.testing.assert_allclose(project_into_ball(x, target, 0.2), [[0.7, 0.3], [0.6, 0.5]], atol=1e-6)
        np.testing.assert_array_equal(project_into_ball(x, target, 0.0), x)
        np.testing.assert_allclose(project_into_ball(x, target, 1.0), target, atol=1e-6)

    def test_full_budget_reaches_target(self, digits_train, digits_test):
        oracle = Oracle(digits_train, k=1)
        x, y = digits_test.images[0], int(digits_test.labels[0])
        x_star, verdict = invariance_attack(x, y, 1.0, digits_train, oracle)
        found = find_invariance_targets(x[None], [y], digits_train)
        np.testing.assert_allclose(x_star, found.images[0], atol=1e-6)
        assert int(digits_train.labels[found.target_index[0]]) != y
        if (found.shift_dy[0], found.shift_dx[0]) == (0, 0):
            assert verdict == int(digits_train.labels[found.target_index[0]])

    def test_zero_budget_is_rejected(self, digits_train):
        oracle = Oracle(digits_train, k=1)
        x, y = digits_train.images[4], int(digits_train.labels[4])
        found = find_invariance_targets(x[None], [y], digits_train)
        x_star = project_into_ball(x, found.images[0], 0.0)
        np.testing.assert_array_equal(x_star, x)
        verdict = oracle_label(oracle, x_star)
        assert verdict == y
        assert not is_admitted(verdict, y)

    def test_admission_rule(self):
        assert is_admitted(3, 5)
        assert not is_admitted(5, 5)
        assert not is_admitted(ABSTAIN, 5)


class TestBuildAttackSet:
    def test_sensitivity_set(self, tiny_model, digits_test):
        cfg = AttackConfig(kind=SENSITIVITY, epsilon=0.1, block_size=16)
        before = tiny_model.param_hash()
        aset = build_attack_set(tiny_model, digits_test, cfg)
        assert len(aset) == len(digits_test)
        assert aset.check_bounds(digits_test) == 0
        assert aset.checkpoint_hash == before == tiny_model.param_hash()
        np.testing.assert_array_equal(aset.source_indices, np.arange(len(digits_test)))
        np.testing.assert_array_equal(aset.verdicts, digits_test.labels)
        assert all(p.requires_grad for p in tiny_model.parameters())

    def test_threads_do_not_change_output(self, tiny_model, digits_test):
        serial = build_attack_set(tiny_model, digits_test, AttackConfig(epsilon=0.1, block_size=8))
        threaded = build_attack_set(tiny_model, digits_test, AttackConfig(epsilon=0.1, block_size=8, workers=3))
        np.testing.assert_array_equal(serial.images, threaded.images)
        assert serial.to_frame().equals(threaded.to_frame())

    def test_sensitivity_needs_model(self, digits_test):
        with pytest.raises(AttackError):
            build_attack_set(None, digits_test, AttackConfig())

    def test_invariance_set(self, digits_train, digits_test):
        cfg = AttackConfig.for_kind(INVARIANCE, block_size=16, shortlist=8)
        aset = build_attack_set(None, digits_test, cfg, trainset=digits_train)
        assert len(aset) == len(digits_test)
        assert aset.kind == INVARIANCE
        assert aset.check_bounds(digits_test) == 0
        for record in aset.records:
            assert record.admitted == is_admitted(record.verdict, record.label)
            assert int(digits_train.labels[record.target_index]) != record.label
            assert abs(record.shift_dy) <= 2 and abs(record.shift_dx) <= 2
        admitted = aset.admitted()
        assert len(admitted) == int(aset.admitted_mask.sum())
        assert np.all(admitted.verdicts != admitted.labels)
        assert np.all(admitted.verdicts != ABSTAIN)

    def test_invariance_is_deterministic(self, digits_train, digits_test):
        cfg = AttackConfig.for_kind(INVARIANCE, shortlist=8)
        first = build_attack_set(None, subset(digits_test, 20), cfg, trainset=digits_train)
        second = build_attack_set(None, subset(digits_test, 20), cfg, trainset=digits_train)
        np.testing.assert_array_equal(first.images, second.images)
        assert first.to_frame().equals(second.to_frame())

    def test_invariance_needs_trainset(self, digits_test):
        with pytest.raises(AttackError, match='training set'):
            build_attack_set(None, digits_test, AttackConfig.for_kind(INVARIANCE))

    def test_bound_violation_is_counted(self, digits_test):
        aset = build_attack_set(None, subset(digits_test, 3), AttackConfig.for_kind(INVARIANCE, shortlist=4),
                                trainset=digits_test)
        aset.images[1] = np.clip(digits_test.images[1] + 0.9, 0, 1)
        assert aset.check_bounds(digits_test) >= 1


class TestPersistence:
    def test_save_and_load(self, digits_train, digits_test, tmp_path):
        cfg = AttackConfig.for_kind(INVARIANCE, shortlist=8)
        aset = build_attack_set(None, subset(digits_test, 12), cfg, trainset=digits_train)
        save_attack_set(aset, str(tmp_path / 'inv'))
        loaded = load_attack_set(str(tmp_path / 'inv'))
        np.testing.assert_array_equal(loaded.images, aset.images)
        assert loaded.records == aset.records

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match='not found'):
            load_attack_set(str(tmp_path / 'nothing'))

    def test_record_count_must_match_images(self):
        with pytest.raises(DataError):
            AttackSet(np.zeros((2, 1, 28, 28)), [])


def test_success_rates_are_percentages(tiny_model, digits_train, digits_test):
    sens = build_attack_set(tiny_model, digits_test, AttackConfig(epsilon=0.1))
    inv = build_attack_set(None, digits_test, AttackConfig.for_kind(INVARIANCE, shortlist=8), trainset=digits_train)
    rates = attack_success_rates(tiny_model, digits_test, sens, inv)
    assert set(rates) == {'sensitivity_success', 'invariance_success'}
    assert all(0.0 <= v <= 100.0 for v in rates.values())


@requires_mnist
@pytest.mark.slow
class TestOnMnist:
    @pytest.fixture(scope='class')
    def mnist(self):
        return load_mnist(MNIST_DIR, 'train'), load_mnist(MNIST_DIR, 'test')

    def test_oracle_agrees_with_labels_at_default_threshold(self, mnist):
        train, test = mnist
        verdicts = Oracle(train, k=5, tau=0.8).label(test.images)
        voted = verdicts != ABSTAIN
        assert voted.mean() >= 0.9
        assert np.mean(verdicts[voted] == test.labels[voted]) >= 0.99

    def test_invariance_admission_rate(self, mnist):
        train, test = mnist
        aset = build_attack_set(None, subset(test, 100), AttackConfig.for_kind(INVARIANCE), trainset=train)
        assert aset.check_bounds(subset(test, 100)) == 0
        assert aset.admitted_mask.mean() >= 0.5
