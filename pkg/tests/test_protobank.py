import numpy as np
import pytest

from cdpcl import oracles
from cdpcl.numerics import ShapeError, Tensor, backward
from cdpcl.protobank import (
    IGNORE_INDEX,
    LabelError,
    PrototypeBank,
    downsample_labels,
    pool_class_features,
    update_bank,
)


def test_constant_class_zero():
    v = np.array([1.0, -2.0, 0.5])
    feats = np.broadcast_to(v[None, :, None, None], (2, 3, 4, 4)).copy()
    cf = pool_class_features(feats, np.zeros((2, 8, 8), dtype=int), 3)
    np.testing.assert_array_equal(cf.values[0], v)
    assert cf.present.tolist() == [True, False, False]
    np.testing.assert_array_equal(cf.values[1:], 0.0)


def test_all_ignored():
    cf = pool_class_features(np.ones((1, 2, 2, 2)), np.full((1, 4, 4), IGNORE_INDEX), 3)
    assert not cf.present.any()
    np.testing.assert_array_equal(cf.values, 0.0)


def test_half_half_regions():
    feats = np.zeros((1, 2, 4, 4))
    feats[:, :, :, 2:] = 2.0
    labels = np.zeros((1, 4, 4), dtype=int)
    labels[:, :, 2:] = 1
    cf = pool_class_features(feats, labels, 2)
    rows, present = oracles.pool_class_features(feats, labels, 2)
    np.testing.assert_array_equal(cf.values, rows)
    np.testing.assert_array_equal(cf.values, [[0.0, 0.0], [2.0, 2.0]])
    assert present == [True, True]


def test_pooling_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(10):
        C = int(rng.integers(2, 6))
        feats = rng.normal(size=(2, 3, 4, 4))
        labels = rng.integers(0, C, size=(2, 8, 8))
        labels[rng.random(labels.shape) < 0.1] = IGNORE_INDEX
        cf = pool_class_features(feats, labels, C)
        rows, present = oracles.pool_class_features(feats, labels, C)
        np.testing.assert_allclose(cf.values, rows, rtol=0, atol=1e-12)
        assert cf.present.tolist() == present


def test_pooling_backpropagates():
    feats = Tensor(np.random.default_rng(1).normal(size=(1, 2, 2, 2)), requires_grad=True)
    labels = np.array([[[0, 1], [1, 1]]])
    cf = pool_class_features(feats, labels, 2)
    backward(cf.features[1].sum())
    # class 1 covers three cells, each gets weight 1/3
    np.testing.assert_allclose(feats.grad[0, :, 0, 1], 1 / 3)
    np.testing.assert_allclose(feats.grad[0, :, 0, 0], 0.0)


def test_bad_label_names_value():
    with pytest.raises(LabelError, match="7"):
        pool_class_features(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 7), 3)


def test_ema_update():
    bank = PrototypeBank(np.ones((2, 1)), np.array([True, True]), 0.9)
    out = update_bank(bank, np.zeros((2, 1)), np.array([True, False]))
    assert out.prototypes[0, 0] == pytest.approx(0.9, abs=1e-15)
    assert out.prototypes[1, 0] == 1.0


def test_first_seen_copies():
    bank = PrototypeBank.empty(2, 3, 0.9)
    v = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    out = update_bank(bank, v, np.array([True, False]))
    np.testing.assert_array_equal(out.prototypes[0], v[0])
    assert out.initialized.tolist() == [True, False]


def test_absent_row_bit_identical():
    rng = np.random.default_rng(2)
    bank = PrototypeBank(rng.normal(size=(3, 4)), np.ones(3, dtype=bool), 0.9)
    out = update_bank(bank, rng.normal(size=(3, 4)), np.array([True, False, True]))
    assert out.prototypes[1].tobytes() == bank.prototypes[1].tobytes()


def test_geometric_convergence():
    v = np.array([[0.3, -1.0]])
    bank = PrototypeBank(np.array([[2.0, 5.0]]), np.array([True]), 0.9)
    d0 = np.linalg.norm(bank.prototypes - v)
    for t in range(1, 30):
        bank = update_bank(bank, v, np.array([True]))
        assert abs(np.linalg.norm(bank.prototypes - v) - d0 * 0.9**t) <= 1e-12


def test_update_does_not_mutate_input():
    bank = PrototypeBank(np.ones((1, 2)), np.array([True]), 0.5)
    update_bank(bank, np.zeros((1, 2)), np.array([True]))
    np.testing.assert_array_equal(bank.prototypes, 1.0)


def test_bad_momentum():
    with pytest.raises(ValueError):
        PrototypeBank.empty(2, 2, 1.0)


def test_downsample_uniform():
    np.testing.assert_array_equal(downsample_labels(np.full((1, 4, 4), 3), 2, 2), 3)


def test_downsample_top_left():
    lab = np.array([[[5, 1], [2, 3]]])
    assert downsample_labels(lab, 1, 1).tolist() == [[[5]]]


def test_downsample_checkerboard_matches_oracle():
    lab = (np.add.outer(np.arange(4), np.arange(4)) % 2)[None]
    out = downsample_labels(lab, 2, 2)
    assert out.tolist() == oracles.downsample_labels(lab, 2, 2)
    assert out.tolist() == [[[0, 0], [0, 0]]]


def test_downsample_indivisible():
    with pytest.raises(ShapeError):
        downsample_labels(np.zeros((1, 5, 4), dtype=int), 2, 2)
