import numpy as np
import pytest
from hypothesis import given, strategies as st

from scsr.errors import ConfigurationError, DegenerateMaskError
from scsr.geometry import Parcellation, define_roi
from scsr.masks import MaskSampler, draw_mask, round_half_away


def equal_parcels(k=10, size=10):
    labels = np.repeat(np.arange(k), size)
    return Parcellation(labels=labels, k=k)


def test_exact_count():
    m = draw_mask(10, 0.2, rng=np.random.default_rng(0))
    assert m.n_sampled == 2 and m.sampled.shape == (10,)


def test_rounding():
    assert round_half_away(2.5) == 3 and round_half_away(-2.5) == -3 and round_half_away(2.4) == 2
    assert MaskSampler(10, 0.25).k == 3  # 2.5 rounds away from zero
    assert MaskSampler(10, 0.01).k == 1  # at least one


def test_degenerate():
    with pytest.raises(DegenerateMaskError):
        MaskSampler(10, 0.96)
    with pytest.raises(ConfigurationError):
        MaskSampler(10, 1.0)
    with pytest.raises(ConfigurationError):
        MaskSampler(10, 0.2, strategy="parcel")


def test_exclusion():
    parc = define_roi(equal_parcels(), range(10), "roi")  # parcels 0..9 = vertices 0..99
    parc = Parcellation(labels=np.r_[parc.labels, np.full(100, 10)], k=11, roi_sets=parc.roi_sets)
    sampler = MaskSampler(200, 0.3, parcellation=parc, excluded_roi="roi")
    batch = sampler.draw_batch(50, np.random.default_rng(1))
    assert not batch[:, :100].any()
    assert np.all(batch.sum(1) == 30)


def test_parcel_strategy_threshold_crossing():
    parc = equal_parcels()
    sampler = MaskSampler(100, 0.2, strategy="parcel", parcellation=parc)
    for seed in range(20):
        m = sampler.draw(np.random.default_rng(seed))
        hit = np.unique(parc.labels[m.sampled])
        assert hit.size == 2
        assert m.n_sampled == 20  # whole parcels only


def test_parcel_strategy_unequal_sizes():
    labels = np.repeat(np.arange(4), [5, 10, 20, 65])
    parc = Parcellation(labels=labels, k=4)
    sampler = MaskSampler(100, 0.3, strategy="parcel", parcellation=parc)
    sizes = np.bincount(labels)
    for seed in range(30):
        m = sampler.draw(np.random.default_rng(seed))
        order = np.random.default_rng(seed).permutation(4)  # same stream the sampler consumed
        csum = np.cumsum(sizes[order])
        j = int(np.argmax(csum >= 30))
        assert set(np.unique(labels[m.sampled])) == set(order[:j + 1].tolist())
        assert m.n_sampled >= 30 and (j == 0 or csum[j - 1] < 30)


def test_deterministic_per_rng():
    s = MaskSampler(642, 0.2)
    a = s.draw_batch(5, np.random.default_rng(3))
    b = s.draw_batch(5, np.random.default_rng(3))
    assert np.array_equal(a, b)


@given(p=st.integers(2, 300), s=st.floats(0.001, 0.95), seed=st.integers(0, 2 ** 32 - 1))
def test_vertex_mask_invariants(p, s, seed):
    k = round_half_away(s * p)
    if k >= p:
        with pytest.raises(DegenerateMaskError):
            MaskSampler(p, s)
        return
    batch = MaskSampler(p, s).draw_batch(4, np.random.default_rng(seed))
    assert np.all(batch.sum(1) == max(1, k))
    assert np.all((~batch).sum(1) >= 1)


def test_vertex_mask_uniform():
    counts = MaskSampler(20, 0.25).draw_batch(4000, np.random.default_rng(0)).sum(0)
    # each vertex expected 1000 times; binomial sd about 27
    assert np.abs(counts - 1000).max() < 6 * 28
