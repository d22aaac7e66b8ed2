import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from safire.metrics import (THRESHOLDS, apply_transform, ari, brute_force_pmiou, f1, permuted_f1,
                            permuted_f1_best, permuted_f1_fixed, permuted_miou)

from conftest import ari_oracle


def identity_miou(y, x):
    """Mean IoU pairing label k with label k; surplus predicted labels beyond
    the N largest are blanked first, as the permuted score does."""
    labels = np.unique(y)
    xl, counts = np.unique(x, return_counts=True)
    if xl.size > labels.size:
        keep = xl[np.lexsort((xl, -counts))[:labels.size]]
        x = np.where(np.isin(x, keep), x, -1)
    return np.mean([np.sum((y == k) & (x == k)) / np.sum((y == k) | (x == k)) for k in labels])


def test_f1_examples():
    assert f1([1, 0], [0.9, 0.2]) == 1.0
    assert f1([1, 1], [0.1, 0.1]) == 0.0
    assert f1([0, 0], [0.1, 0.1]) == 1.0
    y = np.array([[1, 0], [0, 1]])
    assert f1(y, y.astype(float)) == 1.0
    with pytest.raises(ValueError, match="shape"):
        f1(y, np.zeros(3))


def test_permuted_f1_inversion_and_boundary():
    g = np.random.default_rng(0)
    y = g.random((8, 8)) > 0.5
    perfect = y.astype(float)
    assert permuted_f1_fixed(y, 1 - perfect) == 1.0
    half = np.full((8, 8), 0.5)
    assert permuted_f1_fixed(y, half) == f1(y, np.zeros((8, 8)))


def test_permuted_dominates_and_complement_invariant():
    g = np.random.default_rng(1)
    for _ in range(500):
        y = g.random(20) > g.random()
        x = g.random(20)
        assert permuted_f1_fixed(y, x) >= f1(y, x)
        assert permuted_f1_fixed(y, x) == permuted_f1_fixed(y, 1 - x)


def test_f1_best_sweep():
    g = np.random.default_rng(2)
    y = g.random((6, 6)) > 0.5
    x = np.where(y, 0.6 + 0.3 * g.random((6, 6)), 0.4 * g.random((6, 6)))
    assert permuted_f1_best(y, x) == 1.0
    for _ in range(50):
        y = g.random((5, 5)) > 0.4
        x = np.round(g.random((5, 5)) * 256) / 256
        best = permuted_f1_best(y, x)
        assert best >= permuted_f1_fixed(y, x)
        # the sorted-count sweep equals thresholding at every grid value directly
        assert best == max(permuted_f1(y, x, t) for t in THRESHOLDS)


def test_pmiou_examples():
    y = np.zeros((4, 4), int)
    y[:, 2:] = 1
    assert permuted_miou(y, y) == 1.0
    assert permuted_miou(y, 1 - y) == 1.0 == brute_force_pmiou(y, 1 - y)
    x = y.copy()
    x[2:] = 1 - x[2:]
    assert permuted_miou(y, x) == pytest.approx(1 / 3, abs=1e-15)
    assert brute_force_pmiou(y, x) == permuted_miou(y, x)


def test_pmiou_overflow_keeps_largest():
    y = np.zeros((4, 4), int)
    y[:, 2:] = 1
    x = y.copy()
    x[0, 0] = 5  # tiny extra predicted region is dropped, its pixel matches nothing
    expect = (7 / 8 + 1.0) / 2
    assert permuted_miou(y, x) == pytest.approx(expect, abs=1e-15)
    # size tie between kept and dropped regions: the lower label is kept
    y = np.array([[0, 0, 1, 1]])
    x = np.array([[0, 1, 2, 2]])
    assert permuted_miou(y, x) == brute_force_pmiou(y, x) == pytest.approx((0.5 + 1.0) / 2)


def test_pmiou_underflow_counts_zero():
    y = np.array([[0, 1, 2, 2]])
    x = np.zeros((1, 4), int)
    assert permuted_miou(y, x) == pytest.approx((2 / 4) / 3)


def test_pmiou_matches_brute_force_randomized():
    g = np.random.default_rng(3)
    for _ in range(200):
        n, m = g.integers(2, 6, size=2)
        shape = tuple(g.integers(3, 9, size=2))
        y = g.integers(0, n, shape)
        x = g.integers(0, m, shape)
        pm = permuted_miou(y, x)
        assert pm == brute_force_pmiou(y, x)
        assert pm >= identity_miou(y, x) - 1e-15


labelled = st.integers(2, 5).flatmap(lambda k: arrays(np.int64, (4, 5), elements=st.integers(0, k - 1)))


@settings(max_examples=150, deadline=None)
@given(labelled, labelled)
def test_pmiou_brute_force_property(y, x):
    assert permuted_miou(y, x) == brute_force_pmiou(y, x)


@settings(max_examples=150, deadline=None)
@given(labelled, labelled)
def test_ari_properties(y, x):
    a = ari(y, x)
    assert abs(a - ari_oracle(y, x)) < 1e-12
    assert a == pytest.approx(ari(x, y), abs=1e-15)
    assert -1 <= a <= 1
    perm = np.random.default_rng(int(y.sum())).permutation(10)
    assert ari(y, perm[y]) == 1.0


def test_ari_examples():
    y = np.array([[0, 0, 1, 1]])
    assert ari(y, y) == 1.0
    assert ari(y, 1 - y) == 1.0
    assert ari(y, np.zeros_like(y)) == 0.0


def test_identity_transforms_are_exact():
    img = np.random.default_rng(4).random((16, 16, 3))
    for t, lvl in (("blur", 0), ("noise", 0), ("jpeg", 100), ("gamma", 1.0)):
        assert np.array_equal(apply_transform(img, t, lvl), img)
    with pytest.raises(ValueError):
        apply_transform(img, "rotate", 1)
