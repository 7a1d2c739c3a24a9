from dataclasses import replace

import numpy as np
import pytest

import models
from core import derive_stream
from models import ModelKind, ModelSpec

FD_STEP = 1e-5
FD_FLOOR = 1e-4


def _fd_check(model, w, batch, coords):
    _, g = model.loss_and_grad(w, batch)
    worst = 0.0
    for i in coords:
        wp, wm = w.copy(), w.copy()
        wp[i] += FD_STEP
        wm[i] -= FD_STEP
        numeric = (model.loss(wp, batch) - model.loss(wm, batch)) / (2 * FD_STEP)
        denom = max(abs(g[i]), abs(numeric), FD_FLOOR)
        worst = max(worst, abs(g[i] - numeric) / denom)
    return worst


def test_mlp_gradient_matches_finite_differences():
    spec = ModelSpec(kind=ModelKind.MLP, hidden=(16, 16), samples=128, noise_scale=0.1)
    model, data = models.build(spec, 0, np.float64)
    gen = derive_stream(0, 0, 0, "fd").generator()
    for setting in range(10):
        w = model.init_weights(derive_stream(setting, 0, 0, "init"), np.float64)
        w += 0.1 * gen.standard_normal(w.shape[0])
        coords = gen.choice(model.size, size=50, replace=False)
        assert _fd_check(model, w, data.take(np.arange(32)), coords) < 1e-4


def test_logistic_gradient_matches_finite_differences():
    spec = ModelSpec(kind=ModelKind.LOGISTIC, dimension=200, samples=64)
    model, data = models.build(spec, 1, np.float64)
    gen = derive_stream(1, 0, 0, "fd").generator()
    w = 0.05 * gen.standard_normal(model.size)
    coords = np.r_[gen.choice(200, size=30, replace=False), 200]
    assert _fd_check(model, w, data, coords) < 1e-4


def test_quadratic_gradient_and_optimum():
    spec = ModelSpec(kind=ModelKind.QUADRATIC, dimension=10, samples=32, noise_scale=0.0)
    model, data = models.build(spec, 2, np.float64)
    _, g = model.loss_and_grad(model.optimum.copy(), data)
    assert np.max(np.abs(g)) < 1e-10
    assert model.evaluate(model.optimum, data) == 0.0
    gen = derive_stream(2, 0, 0, "fd").generator()
    assert _fd_check(model, gen.standard_normal(10), data, range(10)) < 1e-4


def test_mlp_layout_has_named_layers():
    model, _ = models.build(ModelSpec(kind=ModelKind.MLP, hidden=(4, 3), samples=8), 0)
    assert model.layout.names() == [
        "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "out.weight", "out.bias",
    ]
    assert model.size == 2 * 4 + 4 + 4 * 3 + 3 + 3 + 1


def test_logistic_layout():
    model, data = models.build(ModelSpec(kind=ModelKind.LOGISTIC, dimension=50, samples=20), 0)
    assert model.layout.names() == ["weight", "bias"]
    assert model.size == 51
    assert data.X.shape == (20, 50)
    assert data.X.dtype == np.float32


@pytest.mark.parametrize("kind", list(ModelKind))
def test_build_is_deterministic(kind):
    spec = ModelSpec(kind=kind, dimension=30, samples=40, hidden=(5,))
    _, a = models.build(spec, 11)
    _, b = models.build(spec, 11)
    _, c = models.build(spec, 12)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.X, c.X)


def test_balanced_labels():
    _, data = models.build(ModelSpec(kind=ModelKind.LOGISTIC, dimension=10, samples=101), 0)
    assert abs(int(data.y.sum()) - 50) <= 1


def test_accuracy_in_unit_interval():
    model, data = models.build(ModelSpec(kind=ModelKind.MLP, hidden=(4,), samples=64), 0)
    w = model.init_weights(derive_stream(0, 0, 0, "init"))
    assert 0.0 <= model.evaluate(w, data) <= 1.0


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(dimension=0)
    with pytest.raises(ValueError):
        ModelSpec(hidden=(4, 0))


@pytest.mark.parametrize(
    "spec",
    [
        ModelSpec(kind=ModelKind.LOGISTIC, dimension=200, samples=64, weight_decay=0.05),
        ModelSpec(kind=ModelKind.MLP, hidden=(8, 8), samples=64, noise_scale=0.3, weight_decay=0.05),
    ],
    ids=["logistic", "mlp"],
)
def test_weight_decay_gradient_matches_finite_differences(spec):
    model, data = models.build(spec, 3, np.float64)
    gen = derive_stream(3, 0, 0, "fd").generator()
    w = 0.3 * gen.standard_normal(model.size)
    assert _fd_check(model, w, data, range(model.size)) < 1e-4


def test_weight_decay_penalizes_weights_only():
    spec = ModelSpec(kind=ModelKind.LOGISTIC, dimension=10, samples=32)
    plain, data = models.build(spec, 0, np.float64)
    decayed, _ = models.build(replace(spec, weight_decay=0.5), 0, np.float64)

    w = np.zeros(plain.size)
    assert decayed.loss(w, data) == pytest.approx(np.log(2.0))
    w[-1] = 3.0  # только смещение
    assert decayed.loss(w, data) == plain.loss(w, data)
    w[:10] = 2.0
    assert decayed.loss(w, data) == pytest.approx(plain.loss(w, data) + 0.5 * 0.5 * 40.0)
    _, g_plain = plain.loss_and_grad(w, data)
    _, g_decayed = decayed.loss_and_grad(w, data)
    assert np.allclose(g_decayed - g_plain, np.r_[np.full(10, 1.0), 0.0])


def test_weight_decay_must_be_non_negative():
    with pytest.raises(ValueError):
        ModelSpec(weight_decay=-0.1)
