import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import ap_enumerate, auc_pairs, spearman_permutation
from ucascade.errors import DataError
from ucascade.metrics import dice, pr_auc, roc_auc, score_model, spearman, weighted_brier


def _scored(rng, n, ties=False):
    while True:
        y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            break
    s = rng.integers(0, 5, n) / 4.0 if ties else rng.random(n)
    return s, y


def test_roc_auc_matches_pair_counting():
    rng = np.random.default_rng(0)
    for i in range(200):
        s, y = _scored(rng, int(rng.integers(2, 40)), ties=i % 2 == 0)
        assert abs(roc_auc(s, y)[1] - auc_pairs(s, y)) <= 1e-10


def test_pr_auc_matches_threshold_enumeration():
    rng = np.random.default_rng(1)
    for i in range(200):
        s, y = _scored(rng, int(rng.integers(2, 12)), ties=i % 2 == 0)
        assert abs(pr_auc(s, y)[1] - ap_enumerate(list(s), list(y))) <= 1e-10


def test_auc_trivial_cases():
    y = np.array([0, 0, 1, 1])
    assert roc_auc([0.1, 0.2, 0.8, 0.9], y)[1] == 1.0
    assert roc_auc([0.5] * 4, y)[1] == 0.5
    assert pr_auc([0.1, 0.2, 0.8, 0.9], y)[1] == 1.0
    assert pr_auc([0.3] * 5, [1, 0, 0, 1, 0])[1] == pytest.approx(0.4)
    (thr, fpr, tpr), _ = roc_auc([0.1, 0.9], [0, 1])
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    with pytest.raises(DataError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        pr_auc([0.1, 0.2], [0, 0])


def test_weighted_brier_trivial():
    assert weighted_brier([0, 1, 1], [0, 1, 1]) == 0.0
    assert weighted_brier([0.5] * 5, [0, 1, 0, 0, 1]) == 0.25
    # one positive at 0.5, negatives at 0: only the positive half contributes
    assert weighted_brier([0.5, 0, 0, 0], [1, 0, 0, 0]) == pytest.approx(0.125)
    with pytest.raises(DataError):
        weighted_brier([0.1, 0.2], [0, 0])


def test_spearman_matches_permutation_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.integers(0, 6, 6).astype(float)
        y = rng.random(6)
        y[1] = y[4]  # one tie in y
        if np.ptp(x) == 0:
            continue
        rho, p = spearman(x, y, method="exact")
        rho_ref, p_ref = spearman_permutation(list(x), list(y))
        assert rho == pytest.approx(rho_ref, abs=1e-12)
        assert p == pytest.approx(p_ref, abs=1e-12)


def test_spearman_known_values():
    x = np.arange(10.0)
    assert spearman(x, x ** 3)[0] == pytest.approx(1.0)
    assert spearman(x, -x)[0] == pytest.approx(-1.0)
    rho, p = spearman([1, 2, 3, 4, 5, 6, 7, 8, 9, 10], [2, 1, 4, 3, 6, 5, 8, 7, 10, 9])
    assert rho == pytest.approx(1 - 6 * 10 / (10 * 99))
    t = rho * math.sqrt(8 / (1 - rho ** 2))
    from scipy import stats
    assert p == pytest.approx(2 * stats.t.sf(t, 8))
    with pytest.raises(DataError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(DataError):
        spearman([1, 2], [1, 2])


def test_dice():
    a = np.zeros((4, 4), bool)
    assert math.isnan(dice(a, a))
    b = a.copy()
    b[0, :2] = True
    assert dice(b, b) == 1.0
    c = a.copy()
    c[0, 1:3] = True
    assert dice(b, c) == 0.5


def test_score_model_fields():
    r = score_model("m", [0.2, 0.7, 0.9], [0, 1, 1], [0.1, 0.2, 0.3])
    assert r.roc_auc == 1.0 and r.avg_sigma == pytest.approx(0.2)
    assert math.isnan(score_model("m", [0.2, 0.7], [0, 1]).avg_sigma)


# dyadic grid values keep 1 - s exact, so flips cannot merge distinct scores
scores = st.lists(st.integers(0, 64).map(lambda k: k / 64), min_size=4, max_size=30)


@settings(max_examples=60, deadline=None)
@given(scores, st.integers(0, 2**31))
def test_auc_invariant_under_monotone_transform(s, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    assume(0 < y.sum() < len(y))
    s = np.array(s)
    t = s ** 3 * 0.5 + 0.1  # strictly increasing on [0, 1]
    assume(len(np.unique(t)) == len(np.unique(s)))
    assert roc_auc(t, y)[1] == pytest.approx(roc_auc(s, y)[1], abs=1e-12)
    assert pr_auc(t, y)[1] == pytest.approx(pr_auc(s, y)[1], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(scores, st.integers(0, 2**31))
def test_auc_label_flip_symmetry(s, seed):
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    assume(0 < y.sum() < len(y))
    s = np.array(s)
    assert roc_auc(1 - s, 1 - y)[1] == pytest.approx(roc_auc(s, y)[1], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(scores, st.integers(0, 2**31), st.integers(2, 5))
def test_brier_invariant_to_duplicating_positives(s, seed, k):
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    assume(0 < y.sum() < len(y))
    s = np.array(s)
    pos = y == 1
    s2 = np.r_[s, np.repeat(s[pos], k - 1)]
    y2 = np.r_[y, np.ones((k - 1) * pos.sum(), int)]
    assert weighted_brier(s2, y2) == pytest.approx(weighted_brier(s, y), rel=1e-12, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=30))
def test_spearman_self_is_one(x):
    assume(len(set(x)) >= 2)
    assert spearman(x, x)[0] == pytest.approx(1.0)
