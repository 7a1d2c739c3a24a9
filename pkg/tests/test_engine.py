import math

import numpy as np
import pytest

import engine
import models
from core import GradientVector, LayerLayout, LayoutMismatchError, NonFiniteError, derive_stream, l2_norm
from engine import ClipConfig, DgcNodeState, SparsitySchedule, Variant
from sparsify import SparsityConfig

SUPPRESS = [math.inf]
RELEASE = [-math.inf]


def _state(variant, size=1, *, momentum=0.9, masking=True, clip=None, dtype=np.float64, layout=None):
    return DgcNodeState.create(
        layout or LayerLayout.single(size),
        momentum=momentum,
        variant=variant,
        clip=clip,
        momentum_masking=masking,
        selection=SparsityConfig(0.999),
        dtype=dtype,
    )


# ====== clipping ======

def test_local_threshold_scales_by_inverse_sqrt_nodes():
    assert ClipConfig(0.4, 4).local_threshold == pytest.approx(0.2)
    assert ClipConfig(0.4, 4).local_threshold == ClipConfig(0.4, 4).global_threshold / 2


def test_clip_below_threshold_unchanged():
    g = GradientVector.from_values([0.06, 0.08])
    assert engine.local_clip(g, ClipConfig(0.4, 4)) is g


def test_clip_scales_exactly():
    out = engine.clip_to(GradientVector.from_values([3.0, 4.0]), 2.5)
    assert out.values.tolist() == [1.5, 2.0]
    assert l2_norm(out) == 2.5


def test_clip_zero_norm():
    g = GradientVector.zeros(LayerLayout.single(3))
    assert engine.clip_to(g, 1.0) is g


def test_post_clip_norm_never_exceeds_threshold():
    gen = derive_stream(0, 0, 0, "clip-test").generator()
    clip = ClipConfig(1.3, 4)
    for _ in range(1000):
        size = int(gen.integers(1, 500))
        g = GradientVector.from_values(gen.standard_normal(size) * 10.0 ** gen.uniform(-3, 3))
        assert l2_norm(engine.local_clip(g, clip)) <= clip.local_threshold


def test_clip_config_validation():
    with pytest.raises(ValueError):
        ClipConfig(0.0, 4)
    with pytest.raises(ValueError):
        ClipConfig(1.0, 0)


# ====== warm-up ======

def test_default_warmup_table():
    s = engine.DEFAULT_SCHEDULE
    assert engine.warmup_sparsity(0, s) == 0.75
    assert engine.warmup_sparsity(3, s) == 0.996
    assert engine.warmup_sparsity(4, s) == 0.999
    assert engine.warmup_sparsity(40, s) == 0.999


def test_no_warmup():
    assert engine.warmup_sparsity(0, SparsitySchedule.constant(0.99)) == 0.99


def test_exponential_schedule_reproduces_default_table():
    gen = SparsitySchedule.exponential(0.999, 4)
    assert gen.warmup_values[0] == 0.75
    for got, want in zip(gen.warmup_values, engine.DEFAULT_SCHEDULE.warmup_values):
        assert 1 - got == pytest.approx(1 - want, rel=0.05)


@pytest.mark.parametrize("values,final", [((0.9, 0.8), 0.999), ((0.5, 0.9995), 0.999), ((), 1.0)])
def test_invalid_schedules(values, final):
    with pytest.raises(ValueError):
        SparsitySchedule(values, final)


def test_negative_epoch():
    with pytest.raises(ValueError):
        engine.warmup_sparsity(-1, engine.DEFAULT_SCHEDULE)


# ====== step ======

def test_initial_state_is_zero():
    st = _state(Variant.NESTEROV_CORRECTED, 4)
    assert not st.U.values.any() and not st.V.values.any()
    assert _state(Variant.PLAIN_SPARSE, 4).U is None


def test_momentum_correction_discrepancy():
    g = GradientVector.from_values([1.0], dtype=np.float64)

    corrected = _state(Variant.VANILLA_CORRECTED)
    sent = [engine.step(corrected, g, 0.5, thresholds=SUPPRESS) for _ in range(2)]
    sent.append(engine.step(corrected, g, 0.5, thresholds=RELEASE))
    assert [u.nnz for u in sent] == [0, 0, 1]
    # тот же порядок операций, что и в движке
    u = v = 0.0
    for _ in range(3):
        u = 0.9 * u + 1.0
        v = v + u
    assert sent[2].values[0] == v
    assert sent[2].values[0] == pytest.approx(5.61, abs=1e-12)

    uncorrected = _state(Variant.VANILLA_UNCORRECTED)
    for _ in range(2):
        engine.step(uncorrected, g, 0.5, thresholds=SUPPRESS)
    assert engine.step(uncorrected, g, 0.5, thresholds=RELEASE).values[0] == 3.0


@pytest.mark.parametrize("variant", [Variant.VANILLA_CORRECTED, Variant.NESTEROV_CORRECTED])
def test_masked_positions_cleared(variant):
    st = _state(variant, 200, dtype=np.float32)
    gen = derive_stream(1, 0, 0, "mask").generator()
    for t in range(20):
        g = GradientVector.from_values(gen.standard_normal(200), st.layout)
        update = engine.step(st, g, 0.9, derive_stream(1, 0, t, "select"))
        assert update.nnz == 20
        assert not st.V.values[update.indices].any()
        assert not st.U.values[update.indices].any()


def test_masking_off_keeps_momentum():
    st = _state(Variant.VANILLA_CORRECTED, 10, masking=False)
    g = GradientVector.from_values(np.arange(1, 11), st.layout, dtype=np.float64)
    update = engine.step(st, g, 0.9)
    assert update.indices.tolist() == [9]
    assert st.U.values[9] == 10.0
    assert st.V.values[9] == 0.0


def test_masking_is_idempotent_on_zeros():
    st = _state(Variant.VANILLA_CORRECTED, 4)
    engine.step(st, GradientVector.from_values([0.0, 0.0, 0.0, 0.0], st.layout, dtype=np.float64), 0.5)
    assert not st.U.values.any() and not st.V.values.any()


def _quadratic(d=20):
    spec = models.ModelSpec(kind=models.ModelKind.QUADRATIC, dimension=d, samples=64, noise_scale=0.1)
    return models.build(spec, 0, np.float64)


def test_dense_equivalence_vanilla():
    model, data = _quadratic()
    lr, m = 0.05, 0.9
    st = _state(Variant.VANILLA_CORRECTED, layout=model.layout, masking=False)
    w = model.init_weights(derive_stream(0, 0, 0, "init"), np.float64)
    w_ref, u_ref = w.copy(), np.zeros_like(w)
    for t in range(1000):
        batch = data.take(np.arange(t % 8 * 8, t % 8 * 8 + 8))
        _, g = model.loss_and_grad(w, batch)
        update = engine.step(st, GradientVector(g, model.layout), 0.0)
        w -= lr * update.to_dense()

        _, g_ref = model.loss_and_grad(w_ref, batch)
        u_ref = m * u_ref + g_ref
        w_ref -= lr * u_ref
        assert np.max(np.abs(w - w_ref)) <= 1e-10


def test_dense_equivalence_nesterov():
    model, data = _quadratic()
    lr, m = 0.05, 0.9
    st = _state(Variant.NESTEROV_CORRECTED, layout=model.layout, masking=False)
    w = model.init_weights(derive_stream(0, 0, 0, "init"), np.float64)
    w_ref, u_ref = w.copy(), np.zeros_like(w)
    for t in range(1000):
        batch = data.take(np.arange(t % 8 * 8, t % 8 * 8 + 8))
        _, g = model.loss_and_grad(w, batch)
        update = engine.step(st, GradientVector(g, model.layout), 0.0)
        sent = update.to_dense()
        w -= lr * sent

        _, g_ref = model.loss_and_grad(w_ref, batch)
        u_ref = m * u_ref + g_ref
        step_ref = m * u_ref + g_ref
        assert np.max(np.abs(sent - step_ref)) <= 1e-10
        w_ref -= lr * step_ref
        assert np.max(np.abs(w - w_ref)) <= 1e-10
        # U = m*u
        assert np.max(np.abs(st.U.values - m * u_ref)) <= 1e-10


@pytest.mark.parametrize("T", [2, 10, 100])
def test_accumulation_identity(T):
    gen = derive_stream(T, 0, 0, "frozen").generator()
    grads = [gen.standard_normal(50).astype(np.float32) for _ in range(T)]
    lr = np.float32(0.1)

    st = _state(Variant.VANILLA_CORRECTED, 50, momentum=0.0, dtype=np.float32)
    w = np.ones(50, dtype=np.float32)
    for t, g in enumerate(grads):
        update = engine.step(st, GradientVector(g, st.layout), 0.5, thresholds=SUPPRESS if t < T - 1 else RELEASE)
        w -= lr * update.to_dense()

    w_ref = np.ones(50, dtype=np.float32)
    for g in grads:
        w_ref -= lr * g
    assert np.allclose(w, w_ref, rtol=1e-6, atol=1e-6 * T)


def test_conservation_without_sends():
    gen = derive_stream(2, 0, 0, "cons").generator()
    st = _state(Variant.VANILLA_UNCORRECTED, 30, dtype=np.float32)
    total = np.zeros(30, dtype=np.float64)
    for _ in range(25):
        g = gen.standard_normal(30).astype(np.float32)
        total += g
        engine.step(st, GradientVector(g, st.layout), 0.5, thresholds=SUPPRESS)
    assert np.allclose(st.V.values, total, rtol=1e-6, atol=5e-5)


def test_plain_sparse_ignores_clipping():
    clip = ClipConfig(0.01, 1)
    g = GradientVector.from_values([3.0, 4.0], dtype=np.float64)
    plain = _state(Variant.PLAIN_SPARSE, 2, clip=clip)
    engine.step(plain, g, 0.5, thresholds=SUPPRESS)
    assert plain.V.values.tolist() == [3.0, 4.0]

    uncorrected = _state(Variant.VANILLA_UNCORRECTED, 2, clip=clip)
    engine.step(uncorrected, g, 0.5, thresholds=SUPPRESS)
    assert l2_norm(uncorrected.V) <= 0.01


def test_per_layer_selection_in_step():
    layout = LayerLayout.from_extents([("a", 10), ("b", 10)])
    st = _state(Variant.VANILLA_CORRECTED, layout=layout)
    g = GradientVector.from_values(np.r_[np.full(10, 100.0), np.full(10, 0.01)], layout, dtype=np.float64)
    update = engine.step(st, g, 0.9)
    # по одному элементу из каждого слоя, несмотря на разницу масштабов
    assert update.indices.tolist() == [0, 10]


def test_step_rejects_bad_gradient():
    st = _state(Variant.VANILLA_CORRECTED, 3)
    with pytest.raises(LayoutMismatchError):
        engine.step(st, GradientVector.from_values([1.0, 2.0]), 0.5)
    with pytest.raises(NonFiniteError):
        engine.step(st, GradientVector.from_values([1.0, np.nan, 0.0], dtype=np.float64), 0.5)
