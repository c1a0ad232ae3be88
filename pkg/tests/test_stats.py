import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import auc_pairs, phi_series, rank_sum_enumeration, signed_rank_enumeration
from scsr.errors import ShapeError, UndefinedMetricError
from scsr.geometry import Parcellation
from scsr.stats import (
    benjamini_hochberg, bonferroni, multiclass_auc, permutation_median_diff, reconstruction_error, roc_auc,
    spearman, wilcoxon_rank_sum, wilcoxon_signed_rank, z_to_centile,
)


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert roc_auc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([1, 2], [1, 1])
    with pytest.raises(ShapeError):
        roc_auc([1, 2, 3], [0, 1])


def test_auc_matches_pair_counting(rng):
    for _ in range(300):
        n = int(rng.integers(2, 80))
        scores = rng.integers(0, 10, n).astype(float)
        labels = rng.random(n) < 0.4
        if labels.all() or not labels.any():
            continue
        assert abs(roc_auc(scores, labels) - float(auc_pairs(scores.tolist(), labels.tolist()))) <= 1e-12


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=40), st.integers(0, 10_000))
def test_auc_monotone_invariance(scores, seed):
    labels = np.random.default_rng(seed).random(len(scores)) < 0.5
    if labels.all() or not labels.any():
        return
    s = np.array(scores)
    a = roc_auc(s, labels)
    # transform through the distinct-value index so the map stays strictly increasing in floating point
    _, inv = np.unique(s, return_inverse=True)
    assert roc_auc(np.exp(inv / 7.0), labels) == a
    assert roc_auc(inv.astype(float) ** 3 - 40.0, labels) == a
    assert 0.0 <= a <= 1.0


def test_multiclass_auc():
    s = [1, 2, 3, 4, 5, 6]
    lab = ["CN", "CN", "MCI", "MCI", "AD", "AD"]
    assert multiclass_auc(s, lab) == 1.0
    two = ["CN", "CN", "CN", "AD", "AD", "AD"]
    sc = [0.3, 0.1, 0.9, 0.5, 0.2, 0.8]
    assert multiclass_auc(sc, two) == roc_auc(sc, [l == "AD" for l in two])
    with pytest.raises(UndefinedMetricError):
        multiclass_auc([1, 2], ["CN", "CN"])


def test_multiclass_identical_pairwise():
    # CN {0,3}, MCI {1,4}, AD {2,5}: every ordered pair of groups wins 3 of 4 comparisons
    s = [0, 3, 1, 4, 2, 5]
    lab = ["CN", "CN", "MCI", "MCI", "AD", "AD"]
    assert multiclass_auc(s, lab) == 0.75


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [30, 20, 10]) == -1.0
    assert abs(spearman([1, 2, 3, 4], [1, 1, 3, 4]) - 0.9487) < 1e-3
    with pytest.raises(UndefinedMetricError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedMetricError):
        spearman([1, 2], [1, 2])


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=3, max_size=30))
def test_spearman_monotone_invariance(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    r = spearman(x, y)
    _, ix = np.unique(x, return_inverse=True)
    _, iy = np.unique(y, return_inverse=True)
    assert abs(spearman(ix.astype(float) ** 3, np.exp(-iy / 5.0)) + r) < 1e-12
    assert abs(spearman(np.exp(ix / 5.0), iy.astype(float)) - r) < 1e-12
    assert -1.0 <= r <= 1.0


def test_rank_sum_examples():
    u, p = wilcoxon_rank_sum([1, 2], [3, 4])
    assert u == 0 and abs(p - 2 / 6) < 1e-15
    assert wilcoxon_rank_sum([1, 2, 3], [1, 2, 3])[1] == 1.0
    with pytest.raises(UndefinedMetricError):
        wilcoxon_rank_sum([], [1])


def test_rank_sum_exact_matches_enumeration_all_sizes(rng):
    for n in range(2, 11):
        for na in range(1, n):
            for _ in range(3):
                a = rng.integers(0, 5, na).tolist()
                b = rng.integers(0, 5, n - na).tolist()
                u, p = wilcoxon_rank_sum(a, b, method="exact")
                u_o, p_o = rank_sum_enumeration(a, b)
                assert u == u_o and p == float(p_o)


def test_rank_sum_approx_close_to_exact(rng):
    for _ in range(20):
        a, b = rng.normal(size=6), rng.normal(0.5, 1, size=6)
        assert abs(wilcoxon_rank_sum(a, b, "approx")[1] - wilcoxon_rank_sum(a, b, "exact")[1]) < 0.01


def test_signed_rank_examples():
    w, p = wilcoxon_signed_rank([1, 2, 3, 4, 5])
    assert w == 15 and p == 2 / 32
    assert wilcoxon_signed_rank([-1, 1])[1] == 1.0
    with pytest.raises(UndefinedMetricError):
        wilcoxon_signed_rank([0, 0])


def test_signed_rank_exact_matches_enumeration(rng):
    for n in range(1, 11):
        for _ in range(4):
            d = rng.integers(-4, 5, n).tolist()
            if not any(d):
                continue
            w, p = wilcoxon_signed_rank(d, method="exact")
            w_o, p_o = signed_rank_enumeration(d)
            assert w == w_o and p == float(p_o)


def test_signed_rank_approx_close_at_n10(rng):
    for _ in range(20):
        d = rng.normal(0.3, 1, size=10)
        assert abs(wilcoxon_signed_rank(d, "approx")[1] - wilcoxon_signed_rank(d, "exact")[1]) < 0.01


def test_bonferroni():
    assert bonferroni([0.01]).tolist() == [0.01]
    assert bonferroni([0.01, 0.02]).tolist() == [0.02, 0.04]
    assert bonferroni([0.9, 0.9]).tolist() == [1.0, 1.0]


def test_benjamini_hochberg():
    assert benjamini_hochberg([0.03]).tolist() == [0.03]
    assert np.allclose(benjamini_hochberg([0.01, 0.04, 0.03, 0.005]), [0.02, 0.04, 0.04, 0.02])
    assert benjamini_hochberg([0.2] * 4).tolist() == [0.2] * 4


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_corrections_ordering(p):
    p = np.array(p)
    bh = benjamini_hochberg(p)
    bf = bonferroni(p)
    assert np.all(bh >= p - 1e-15)
    assert np.all(bf >= bh - 1e-15)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(bh[order]) >= -1e-15)


def test_permutation_examples():
    a = np.array([0.1, 0.5, 0.9, 0.3])
    _, p = permutation_median_diff(a, a[::-1], n_perm=2000, seed=1)
    assert p >= 0.5
    assert permutation_median_diff([1, 3], [2], n_perm=10)[0] == 0.0
    # distinct values with complete separation: only the identity split and its mirror reach |diff| = 10
    diff, p = permutation_median_diff(np.arange(10.0) + 10, np.arange(10.0), n_perm=10_000, seed=0)
    assert diff == 10.0 and p <= 0.001


def test_permutation_binary_separation_literal():
    diff, p = permutation_median_diff(np.ones(10), np.zeros(10), n_perm=10_000, seed=0)
    assert diff == 1.0 and p <= 0.001


def test_permutation_binary_separation_hypergeometric():
    """With 0/1 data the median gap is 1 unless the shuffled groups each get five ones."""
    diff, p = permutation_median_diff(np.ones(10), np.zeros(10), n_perm=10_000, seed=0)
    exact = 1 - comb(10, 5) ** 2 / comb(20, 10)
    sd = (exact * (1 - exact) / 10_000) ** 0.5
    assert diff == 1.0 and abs(p - exact) < 5 * sd


def test_permutation_deterministic_and_bounded(rng):
    a, b = rng.normal(size=15), rng.normal(0.2, 1, size=12)
    r1 = permutation_median_diff(a, b, n_perm=3000, seed=7)
    r2 = permutation_median_diff(a, b, n_perm=3000, seed=7)
    assert r1 == r2
    assert 1 / 3001 <= r1[1] <= 1.0


def test_z_to_centile():
    assert z_to_centile(0.0) == 0.5
    assert abs(z_to_centile(1.959964) - 0.975) < 1e-6
    z = np.linspace(-8, 8, 161)
    assert np.abs(z_to_centile(z) + z_to_centile(-z) - 1).max() < 1e-9


def test_z_to_centile_vs_series_oracle():
    for z in np.arange(-600, 601, 25) / 100.0:
        assert abs(z_to_centile(z) - phi_series(z)) < 1e-9


def test_reconstruction_error():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert reconstruction_error(y, y) == 0.0
    assert reconstruction_error(y, y - 0.5) == 0.25
    assert reconstruction_error(y, y - 0.5, kind="mae") == 0.5
    parc = Parcellation(labels=np.array([0, 0, 1, 1]), k=2)
    r = y - np.array([0.0, 0.0, 1.0, 1.0])
    assert reconstruction_error(y, r, level="parcel", parcellation=parc) == 0.5
    with pytest.raises(ShapeError):
        reconstruction_error(y, y[:3])
    with pytest.raises(ShapeError):
        reconstruction_error(y, y, level="parcel")
