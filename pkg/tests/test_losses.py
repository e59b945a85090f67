import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarseg import losses as L
from polarseg.tensor_core import finite_diff_gradcheck

from oracles import iou_per_class, lovasz_oracle


# ------------------------------------------------------------------- SMCE

def test_smce_pixel_values():
    loss, _ = L.smce_pixel(np.array([[0.0, 1.0], [0.5, 0.5]]), np.array([1, 0]))
    assert loss[0] == pytest.approx(-math.log(1 - 1e-7))
    assert loss[1] == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        L.smce_pixel(np.array([[0.5, 0.5]]), np.array([2]))


def test_smce_pixel_gradient():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 0.9, (6, 1))
    probs = np.concatenate([1 - a, a], axis=1)
    labels = rng.integers(0, 2, 6)
    _, grad = L.smce_pixel(probs, labels)
    err = finite_diff_gradcheck(lambda: float(L.smce_pixel(probs, labels)[0].sum()),
                                {"p": probs}, {"p": grad})
    assert err < 1e-6


def test_smce_train_reduces_to_per_class_mean():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, (3, 5, 5))
    y = rng.integers(0, 2, (3, 5, 5))
    loss, _, _ = L.smce_train_loss(p, y, np.zeros(2))
    ce = -np.log(np.where(y == 1, p, 1 - p))
    ref = np.mean([sum(ce[f][y[f] == c].mean() for c in (0, 1) if (y[f] == c).any())
                   for f in range(3)])
    assert loss == ref


def test_smce_train_perfect_prediction():
    y = np.array([[[0, 1], [1, 0]]])
    loss, _, _ = L.smce_train_loss(y.astype(float), y, np.zeros(2))
    assert loss == pytest.approx(2 * -math.log(1 - 1e-7), rel=1e-9)


def test_smce_train_gradients():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, (2, 4, 4))
    y = rng.integers(0, 2, (2, 4, 4))
    w = np.array([0.3, -0.4])
    _, dp, dw = L.smce_train_loss(p, y, w)
    err = finite_diff_gradcheck(lambda: L.smce_train_loss(p, y, w)[0], {"w": w, "p": p},
                                {"w": dw, "p": dp})
    assert err < 1e-6


def test_smce_train_weight_minimum_by_scan():
    y = np.ones((1, 4, 4), dtype=int)
    y[0, :2] = 0
    p = np.where(y == 1, 0.2, 0.8)           # both classes: CE = ln 5
    mean_ce = math.log(5)
    grid = np.linspace(0, 1.5, 3001)
    vals = [L.smce_train_loss(p, y, np.array([w, w]))[0] for w in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(math.log(mean_ce), abs=1e-3)


def test_absent_class_contributes_nothing():
    y = np.ones((1, 3, 3), dtype=int)
    p = np.full((1, 3, 3), 0.7)
    loss, _, dw = L.smce_train_loss(p, y, np.array([0.9, 0.0]))
    assert loss == pytest.approx(-math.log(0.7))
    assert dw[0] == 0.0


def test_plain_smce_gradient():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.05, 0.95, (2, 3, 3))
    y = rng.integers(0, 2, (2, 3, 3))
    _, dp = L.smce_loss(p, y)
    assert finite_diff_gradcheck(lambda: L.smce_loss(p, y)[0], {"p": p}, {"p": dp}) < 1e-6


# ----------------------------------------------------------------- Lovasz

@pytest.mark.parametrize("seed", range(20))
def test_lovasz_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 13))
    p = rng.random((1, 1, n))
    y = rng.integers(0, 2, (1, 1, n))
    loss, _ = L.lovasz_softmax(p, y)
    assert abs(loss - lovasz_oracle(p, y)) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_lovasz_of_hard_predictions_is_one_minus_iou(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, (1, 6, 7))
    pred = rng.integers(0, 2, (1, 6, 7))
    loss, _ = L.lovasz_softmax(pred.astype(float), y)
    assert abs(loss - np.mean(1 - iou_per_class(pred, y))) < 1e-9


def test_lovasz_perfect_is_zero():
    y = np.array([[[0, 1, 1]]])
    assert L.lovasz_softmax(y.astype(float), y)[0] == 0.0


def test_lovasz_one_wrong_pixel_shrinks_with_n():
    vals = []
    for n in range(2, 9):
        y = np.ones((1, 1, n), dtype=int)
        p = np.ones((1, 1, n))
        p[0, 0, 0] = 0.0
        loss, _ = L.lovasz_softmax(p, y)
        assert loss == pytest.approx(lovasz_oracle(p, y), abs=1e-12)
        vals.append(loss)
    assert all(v > 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_lovasz_gradient_away_from_ties():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.05, 0.95, (2, 3, 4))
    y = rng.integers(0, 2, (2, 3, 4))
    _, dp = L.lovasz_softmax(p, y)
    err = finite_diff_gradcheck(lambda: L.lovasz_softmax(p, y)[0], {"p": p}, {"p": dp}, eps=1e-7)
    assert err < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 30))
def test_lovasz_per_class_range(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.random((1, 1, n))
    y = rng.integers(0, 2, (1, 1, n))
    loss, _ = L.lovasz_softmax(p, y)
    assert 0.0 <= loss <= 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_losses_invariant_to_pixel_permutation(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 0.99, (1, 4, 5))
    y = rng.integers(0, 2, (1, 4, 5))
    w = rng.normal(0, 0.5, 2)
    perm = rng.permutation(20)
    pp, yp = p.reshape(1, -1)[:, perm].reshape(p.shape), y.reshape(1, -1)[:, perm].reshape(y.shape)
    for name in L.LOSSES:
        a = L.compute_loss(name, p, y, w)[0]
        b = L.compute_loss(name, pp, yp, w)[0]
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_compute_loss_dispatch():
    p = np.full((1, 2, 2), 0.5)
    y = np.zeros((1, 2, 2), dtype=int)
    for name in L.LOSSES:
        loss, dp, dw = L.compute_loss(name, p, y, np.zeros(2))
        assert np.isfinite(loss) and dp.shape == p.shape and dw.shape == (2,)
    with pytest.raises(ValueError):
        L.compute_loss("focal", p, y)
