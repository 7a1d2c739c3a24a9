import numpy as np
import pytest
from hypothesis import given, settings, seed
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import sparsify
from core import GradientVector, LayerLayout, derive_stream
from sparsify import SelectionError, SparsityConfig


def test_exact_threshold_example():
    mags = np.array([1.0, 3.0, 2.0, 0.5])
    thr = sparsify.exact_threshold(mags, 0.5)
    assert thr == 2.0
    res = sparsify.select(mags, thr, sparsify.keep_budget(4, 0.5))
    assert res.kept_count == 2
    assert res.mask.tolist() == [False, True, True, False]


def test_zero_sparsity_keeps_everything():
    mags = np.array([0.0, 1.0, 0.0, 2.0])
    thr = sparsify.exact_threshold(mags, 0.0)
    assert thr < 0.0
    assert sparsify.select(mags, thr, 4).mask.all()


def test_keep_budget_is_at_least_one():
    assert sparsify.keep_budget(10, 0.999) == 1
    assert sparsify.keep_budget(25_000_000, 0.999) == 25_000


def test_ties_admitted_in_index_order():
    mags = np.ones(10)
    thr = sparsify.exact_threshold(mags, 0.7)
    res = sparsify.select(mags, thr, sparsify.keep_budget(10, 0.7))
    assert res.kept_count == 3
    assert np.flatnonzero(res.mask).tolist() == [0, 1, 2]


def test_exact_threshold_rejects_bad_input():
    with pytest.raises(SelectionError):
        sparsify.exact_threshold(np.array([]), 0.5)
    with pytest.raises(SelectionError):
        sparsify.exact_threshold(np.array([1.0]), 1.0)


@seed(2)
@settings(max_examples=1000, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 1e3)),
    st.floats(0.0, 0.999),
)
def test_exact_threshold_matches_full_sort(mags, s):
    n = mags.shape[0]
    k = sparsify.keep_budget(n, s)
    thr = sparsify.exact_threshold(mags, s)
    if k < n:
        assert thr == np.sort(mags)[::-1][k - 1]
    res = sparsify.select(mags, thr, k)
    assert res.kept_count == min(k, n)
    # всё выбранное не меньше всего невыбранного
    if res.mask.any() and (~res.mask).any():
        assert mags[res.mask].min() >= mags[~res.mask].max()


def test_sampled_threshold_small_input_is_exact():
    mags = np.arange(100, dtype=np.float64)
    cfg = SparsityConfig(0.9, sample_fraction=0.01)
    thr, refined = sparsify.sampled_threshold(mags, cfg, derive_stream(0, 0, 0, "t"))
    assert thr == sparsify.exact_threshold(mags, 0.9)
    assert not refined


def test_sampled_threshold_identical_values():
    mags = np.full(100_000, 7.0)
    cfg = SparsityConfig(0.99, sample_fraction=0.01)
    thr, _ = sparsify.sampled_threshold(mags, cfg, derive_stream(0, 0, 0, "t"))
    res = sparsify.select(mags, thr, sparsify.keep_budget(mags.size, 0.99))
    assert res.kept_count == 1000


def test_sampled_threshold_close_to_exact():
    gen = np.random.default_rng(0)
    mags = np.abs(gen.standard_normal(1_000_000))
    cfg = SparsityConfig(0.999, sample_fraction=0.01)
    k = sparsify.keep_budget(mags.size, 0.999)
    thr, _ = sparsify.sampled_threshold(mags, cfg, derive_stream(1, 0, 0, "t"))
    kept = sparsify.select(mags, thr, k).kept_count
    # никогда не меньше k, и не больше overflow_factor * k
    assert k <= kept <= cfg.overflow_factor * k


def test_sampled_threshold_refines_on_overflow():
    # 5% одинаковых больших значений: кандидатов заведомо больше 2k
    mags = np.zeros(100_000)
    mags[:5000] = 1.0
    cfg = SparsityConfig(0.999, sample_fraction=0.001)
    k = sparsify.keep_budget(mags.size, 0.999)
    gen = np.random.Generator(np.random.PCG64(3))
    thr, refined = sparsify.sampled_threshold(mags, cfg, gen)
    assert sparsify.select(mags, thr, k).kept_count == k
    if refined:
        assert thr == 1.0


def test_sampled_threshold_refines_when_top_percent_is_huge():
    gen = derive_stream(4, 0, 0, "adversarial").generator()
    mags = gen.uniform(0.0, 1.0, 100_000)
    mags[gen.choice(mags.size, size=1000, replace=False)] = 1e6
    cfg = SparsityConfig(0.999, sample_fraction=0.01)
    k = sparsify.keep_budget(mags.size, 0.999)

    thr, refined = sparsify.sampled_threshold(mags, cfg, derive_stream(4, 0, 0, "t"))
    assert refined is True
    assert thr == 1e6
    kept = sparsify.select(mags, thr, k).kept_count
    assert kept == k <= cfg.overflow_factor * k


@seed(4)
@settings(max_examples=200)
@given(
    arrays(np.float64, st.integers(1, 200), elements=st.floats(0, 1e3)),
    st.floats(0.0, 0.999),
    st.floats(0.0, 0.999),
)
def test_kept_count_monotone_in_sparsity(mags, s1, s2):
    lo, hi = sorted((s1, s2))

    def kept(s):
        return sparsify.select(mags, sparsify.exact_threshold(mags, s), sparsify.keep_budget(mags.size, s)).kept_count

    assert kept(hi) <= kept(lo)


@seed(5)
@settings(max_examples=200)
@given(
    arrays(np.float64, st.integers(1, 200), elements=st.one_of(st.just(0.0), st.floats(1e-100, 1e3))),
    st.floats(0.0, 0.999),
    st.integers(-10, 10),
)
def test_selection_invariant_under_positive_scaling(mags, s, exponent):
    # степень двойки масштабирует без округления, порядок и равенства сохраняются
    c = 2.0 ** exponent
    k = sparsify.keep_budget(mags.size, s)
    base = sparsify.select(mags, sparsify.exact_threshold(mags, s), k).mask
    scaled = mags * c
    assert np.array_equal(sparsify.select(scaled, sparsify.exact_threshold(scaled, s), k).mask, base)


def test_per_layer_thresholds_independent():
    layout = LayerLayout.from_extents([("big", 4), ("small", 4)])
    v = GradientVector.from_values([100, 200, 300, 400, 1, 2, 3, 4], layout, dtype=np.float64)
    cfg = SparsityConfig(0.75, per_layer=True)
    thresholds = sparsify.compute_thresholds(v, cfg)
    assert thresholds == [400.0, 4.0]
    mask = sparsify.selection_mask(v, cfg, thresholds)
    assert np.flatnonzero(mask).tolist() == [3, 7]

    global_cfg = SparsityConfig(0.75, per_layer=False)
    mask = sparsify.selection_mask(v, global_cfg, sparsify.compute_thresholds(v, global_cfg))
    assert np.flatnonzero(mask).tolist() == [2, 3]


def test_selection_mask_threshold_count_checked():
    v = GradientVector.from_values([1.0, 2.0])
    with pytest.raises(SelectionError):
        sparsify.selection_mask(v, SparsityConfig(0.5), [1.0, 2.0])


def test_split_is_exact_partition():
    v = GradientVector.from_values([0.5, -3.0, 0.0, 2.0, 0.1], dtype=np.float64)
    mask = np.array([False, True, True, True, False])
    update, residual = sparsify.split(v, mask)
    assert update.indices.tolist() == [1, 3]  # нулевой элемент не отправляется
    assert residual.values.tolist() == [0.5, 0.0, 0.0, 0.0, 0.1]
    assert np.array_equal(update.to_dense() + residual.values, v.values)


def test_infinite_thresholds():
    v = GradientVector.from_values([1.0, -2.0, 3.0])
    cfg = SparsityConfig(0.5)
    assert not sparsify.selection_mask(v, cfg, [np.inf]).any()
    assert sparsify.selection_mask(v, cfg, [-np.inf]).all()


def test_apply_mask_per_layer():
    layout = LayerLayout.from_extents([("a", 3), ("b", 3)])
    v = GradientVector.from_values([0.1, -5.0, 0.2, 3.0, 0.0, -0.3], layout, dtype=np.float64)
    cfg = SparsityConfig(0.6, per_layer=True)
    update, residual = sparsify.apply_mask(v, cfg, sparsify.compute_thresholds(v, cfg))
    assert update.indices.tolist() == [1, 3]
    assert update.values.tolist() == [-5.0, 3.0]
    assert residual.values.tolist() == [0.1, 0.0, 0.2, 0.0, 0.0, -0.3]
