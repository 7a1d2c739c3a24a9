import pytest

import perfmodel
from perfmodel import MB, PRESETS, PerfParams


def test_single_node_has_unit_speedup():
    for params in PRESETS.values():
        assert perfmodel.speedup(params, 1) == 1.0
        assert perfmodel.speedup(params, 1, compressed=True) == 1.0


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_compressed_never_slower_than_dense(preset):
    params = PRESETS[preset]
    for n in range(2, 129):
        assert perfmodel.speedup(params, n, compressed=True) >= perfmodel.speedup(params, n)


def test_alexnet_at_64_nodes():
    params = PRESETS["alexnet"]
    assert params.model_bytes == 232.56 * MB
    dgc = perfmodel.speedup(params, 64, compressed=True)
    dense = perfmodel.speedup(params, 64)
    assert dgc > 40
    assert dense < dgc / 2


def test_doubling_rounds():
    assert [perfmodel.doubling_rounds(n) for n in (1, 2, 3, 4, 5, 64, 65, 128)] == [0, 1, 2, 2, 3, 6, 7, 7]


def test_round_densities_double_and_cap():
    params = PerfParams(density=0.2)
    assert perfmodel.round_densities(params, 16) == pytest.approx([0.4, 0.8, 1.0, 1.0])
    assert not perfmodel.is_uncapped(params, 16)


def test_compressed_bytes_monotone_in_density():
    prev = 0.0
    for d in (1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0):
        cur = perfmodel.compressed_comm_bytes(PerfParams(density=d), 32)
        assert cur >= prev
        prev = cur


def test_dense_bytes_monotone_in_nodes():
    params = PerfParams()
    values = [perfmodel.dense_comm_bytes(params, n) for n in range(1, 129)]
    assert values[0] == 0.0
    assert values == sorted(values)
    assert values[-1] < 2 * params.model_bytes


@pytest.mark.parametrize("n", [2, 4, 16, 128])
def test_closed_form_matches_round_sum(n):
    params = PerfParams(density=0.001)
    assert perfmodel.is_uncapped(params, n)
    assert perfmodel.closed_form_doubling_bytes(params, n) == pytest.approx(
        perfmodel.compressed_comm_bytes(params, n), rel=1e-12
    )


def test_crossover_density_four_nodes():
    # 2 раунда: 1.5 * B * (2d + 4d) = 1.5 * B  =>  d = 1/6
    assert perfmodel.crossover_density(PerfParams(), 4) == pytest.approx(1 / 6, rel=1e-9)
    assert perfmodel.crossover_density(PerfParams(), 1) == 1.0


def test_ring_aggregation():
    params = PerfParams(density=0.001, aggregation="ring")
    dens = perfmodel.round_densities(params, 4)
    assert dens == pytest.approx([0.001, 0.002, 0.003, 0.004, 0.004, 0.004])
    expected = params.model_bytes / 4 * params.codec_overhead * sum(dens)
    assert perfmodel.compressed_comm_bytes(params, 4) == pytest.approx(expected)
    assert perfmodel.speedup(params, 4, compressed=True) > perfmodel.speedup(params, 4)


def test_speedup_table_rows():
    rows = perfmodel.speedup_table(PRESETS["resnet50"])
    assert [r.nodes for r in rows] == [1, 2, 4, 8, 16, 32, 64, 128]
    assert rows[0].dense_speedup == 1.0 and rows[0].dgc_comm_s == 0.0
    assert len(rows[0].as_tuple()) == len(perfmodel.SPEEDUP_HEADER)


def test_node_counts():
    assert perfmodel.node_counts(100) == [1, 2, 4, 8, 16, 32, 64]
    assert perfmodel.node_counts(1) == [1]


@pytest.mark.parametrize("kwargs", [
    {"density": 0.0}, {"density": 1.5}, {"bandwidth": 0.0}, {"latency_per_round": -1.0},
    {"aggregation": "tree"}, {"max_nodes": 0},
])
def test_params_validation(kwargs):
    with pytest.raises(ValueError):
        PerfParams(**kwargs)


def test_comm_time_rejects_zero_nodes():
    with pytest.raises(ValueError):
        perfmodel.comm_time(PerfParams(), 0)
