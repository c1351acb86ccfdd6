import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdpcl import numerics as nx
from cdpcl import oracles
from cdpcl.losses import (
    LossConfig,
    NonFiniteLoss,
    hpcl_loss,
    loss_weights,
    pcl_loss,
    seg_loss,
    total_loss,
    upcl_loss,
)
from cdpcl.numerics import Tensor
from cdpcl.protobank import IGNORE_INDEX, ClassFeatures

TAU1 = LossConfig(tau=1.0, tau_u=1.0, tau_h=1.0)


def cf(feats, present=None):
    feats = np.asarray(feats, dtype=np.float64)
    if present is None:
        present = np.ones(len(feats), dtype=bool)
    return ClassFeatures(Tensor(feats, requires_grad=True), np.asarray(present, dtype=bool))


def test_two_class_aligned_example():
    e = np.eye(2)
    loss = pcl_loss(e, cf(e), TAU1).item()
    assert loss == pytest.approx(2 * -math.log(math.e / (math.e + 1)), abs=1e-12)
    assert loss == pytest.approx(0.6266, abs=1e-4)
    assert loss == pytest.approx(oracles.contrast_loss(e, e, [True, True], 1.0), abs=1e-14)


def test_orthogonal_prototypes_give_ln2():
    protos = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    feats = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    assert pcl_loss(protos, cf(feats), TAU1).item() == pytest.approx(2 * math.log(2), abs=1e-14)


def test_single_active_class_zero():
    loss = pcl_loss(np.eye(3), cf(np.eye(3), [True, False, False]), TAU1)
    assert loss.item() == 0.0


def test_empty_active_set_warns():
    before = nx.numeric_warnings["contrast_empty_active_set"]
    assert pcl_loss(np.eye(2), cf(np.eye(2), [False, False]), TAU1).item() == 0.0
    assert nx.numeric_warnings["contrast_empty_active_set"] == before + 1


def test_single_class_without_positive_is_skipped():
    cfg = LossConfig(include_positive_in_denominator=False)
    before = nx.numeric_warnings["contrast_single_class_skipped"]
    assert pcl_loss(np.eye(2), cf(np.eye(2), [True, False]), cfg).item() == 0.0
    assert nx.numeric_warnings["contrast_single_class_skipped"] == before + 1


def test_uninitialized_prototypes_excluded():
    rng = np.random.default_rng(0)
    protos, feats = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    got = pcl_loss(protos, cf(feats), LossConfig(), initialized=np.array([True, True, False])).item()
    want = oracles.contrast_loss(protos, feats, [True, True, False], 0.8)
    assert got == pytest.approx(want, abs=1e-12)


def test_upcl_all_ones_is_pcl_bitwise():
    rng = np.random.default_rng(1)
    protos, feats = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    cfg = LossConfig(tau_u=0.6)
    a = upcl_loss(protos, np.ones_like(protos), cf(feats), cfg).item()
    b = pcl_loss(protos, cf(feats), cfg, tau=0.6).item()
    assert a == b


def test_upcl_constant_scale_removed_by_normalization():
    rng = np.random.default_rng(2)
    protos, feats = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a = upcl_loss(protos, np.full_like(protos, 0.5), cf(feats), LossConfig()).item()
    b = pcl_loss(protos, cf(feats), LossConfig(), tau=0.8).item()
    assert a == pytest.approx(b, abs=1e-13)


def test_upcl_matches_oracle():
    rng = np.random.default_rng(3)
    protos, feats, U = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.random((3, 4))
    got = upcl_loss(protos, U, cf(feats), LossConfig()).item()
    assert got == pytest.approx(oracles.upcl_loss(protos, U, feats, [True] * 3, 0.8), abs=1e-12)


def test_hpcl_neutral_is_pcl_bitwise():
    rng = np.random.default_rng(4)
    protos, feats = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cfg = LossConfig(tau_h=0.7)
    a = hpcl_loss(protos, np.ones((3, 3)), cf(feats), cfg).item()
    b = pcl_loss(protos, cf(feats), cfg, tau=0.7).item()
    assert a == b


def test_hpcl_shrinking_negative_weight_increases_loss():
    rng = np.random.default_rng(5)
    protos = np.abs(rng.normal(size=(3, 4)))
    feats = protos + 0.1 * np.abs(rng.normal(size=(3, 4)))
    H = np.full((3, 3), 0.7)
    np.fill_diagonal(H, 0.9)
    before = hpcl_loss(protos, H, cf(feats), LossConfig()).item()
    H[0, 1] = 0.35
    after = hpcl_loss(protos, H, cf(feats), LossConfig()).item()
    assert after > before


def test_hpcl_matches_oracle():
    rng = np.random.default_rng(6)
    protos, feats = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    H = rng.uniform(1e-4, 2.0, size=(4, 4))
    got = hpcl_loss(protos, H, cf(feats), LossConfig()).item()
    assert got == pytest.approx(oracles.hpcl_loss(protos, H, feats, [True] * 4, 0.8), rel=1e-12)


def test_contrast_stable_for_large_logits():
    e = np.eye(3)
    cfg = LossConfig(normalize_features=False, tau=1.0)
    small = pcl_loss(e, cf(e), cfg).item()
    big = pcl_loss(e * 1e3, cf(e), cfg).item()
    assert math.isfinite(big)
    assert big == pytest.approx(oracles.contrast_loss(e * 1e3, e, [True] * 3, 1.0, normalize=False), abs=1e-9)
    assert big < small


def test_positive_excluded_matches_oracle():
    rng = np.random.default_rng(7)
    protos, feats = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cfg = LossConfig(include_positive_in_denominator=False)
    got = pcl_loss(protos, cf(feats), cfg).item()
    want = oracles.contrast_loss(protos, feats, [True] * 4, 0.8, include_positive=False)
    assert got == pytest.approx(want, abs=1e-12)


def test_seg_loss_uniform_logits():
    loss = seg_loss(np.zeros((2, 5, 3, 3)), np.zeros((2, 3, 3), dtype=int)).item()
    assert loss == pytest.approx(math.log(5), abs=1e-14)


def test_seg_loss_vanishes_with_margin():
    labels = np.array([[[0, 1], [1, 0]]])
    onehot = np.stack([labels == 0, labels == 1], axis=1).astype(float)
    losses = [seg_loss(onehot * m, labels).item() for m in (1.0, 10.0, 50.0)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20


def test_seg_loss_matches_oracle_with_ignore():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(1, 3, 2, 2))
    labels = np.array([[[0, 2], [IGNORE_INDEX, 1]]])
    assert seg_loss(logits, labels).item() == pytest.approx(oracles.seg_loss(logits, labels), abs=1e-12)


def test_seg_loss_all_ignored():
    assert seg_loss(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), IGNORE_INDEX)).item() == 0.0


def test_total_loss_arithmetic():
    cfg = LossConfig(lambda1=0.1, lambda2=0.01)
    assert total_loss(1.0, 2.0, 3.0, cfg).item() == pytest.approx(1.23, abs=1e-15)


def test_total_loss_zero_lambdas_is_seg():
    cfg = LossConfig(lambda1=0.0, lambda2=0.0)
    assert total_loss(1.5, 2.0, 3.0, cfg).item() == 1.5


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLoss):
        total_loss(1.0, float("nan"), 0.0, LossConfig())


def test_default_weights():
    cfg = LossConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.tau_u, cfg.tau_h) == (0.1, 0.01, 0.8, 0.8)
    assert loss_weights(cfg, "baseline") == (0.0, 0.0)
    assert loss_weights(cfg, "pcl") == (0.1, 0.0)
    assert loss_weights(cfg, "upcl") == (0.1, 0.0)
    assert loss_weights(cfg, "hpcl") == (0.0, 0.01)
    assert loss_weights(cfg, "cdpcl") == (0.1, 0.01)
    with pytest.raises(ValueError):
        loss_weights(cfg, "bogus")


def test_invalid_config():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(lambda1=-1.0)


# -- properties --------------------------------------------------------------------
shapes = st.tuples(st.sampled_from([2, 3, 6]), st.sampled_from([2, 4, 8]))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_contrast_losses_non_negative_with_positive_included(shape, seed):
    rng = np.random.default_rng(seed)
    protos, feats = rng.normal(size=shape), rng.normal(size=shape)
    H = rng.uniform(1e-4, 2.0, size=(shape[0], shape[0]))
    for loss in (
        pcl_loss(protos, cf(feats), LossConfig()),
        upcl_loss(protos, rng.random(shape), cf(feats), LossConfig()),
        hpcl_loss(protos, H, cf(feats), LossConfig()),
    ):
        # each term is -log of a softmax probability
        assert loss.item() >= -1e-12


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_pcl_permutation_invariant(shape, seed):
    rng = np.random.default_rng(seed)
    protos, feats = rng.normal(size=shape), rng.normal(size=shape)
    perm = rng.permutation(shape[0])
    a = pcl_loss(protos, cf(feats), LossConfig()).item()
    b = pcl_loss(protos[perm], cf(feats[perm]), LossConfig()).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_pcl_feature_scale_invariant_when_normalized(shape, seed, scale):
    rng = np.random.default_rng(seed)
    protos, feats = rng.normal(size=shape), rng.normal(size=shape)
    a = pcl_loss(protos, cf(feats), LossConfig()).item()
    b = pcl_loss(protos, cf(feats * scale), LossConfig()).item()
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_hpcl_gradient_matches_finite_difference(shape, seed):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=shape)
    H = rng.uniform(0.05, 2.0, size=(shape[0], shape[0]))
    present = np.ones(shape[0], dtype=bool)

    def f(t):
        return hpcl_loss(protos, H, ClassFeatures(t, present), LossConfig())

    assert nx.finite_difference_check(f, rng.normal(size=shape)) <= 1e-4
