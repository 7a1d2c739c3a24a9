# perfmodel.py - аналитическая модель ускорения (dense vs DGC)
"""Аналитическая модель ускорения.

Время вычислений на одном узле заявляется, а не измеряется. Коммуникация:

* dense: ring all-reduce, ``2(N-1)/N * bytes * 8 / bandwidth + 2(N-1) * latency``
* сжатый, recursive doubling: ``ceil(log2 N)`` раундов, раунд r несёт
  ``bytes * min(1, d * 2^r) * overhead`` (худший случай удвоения плотности)
* сжатый, ring: шаг s reduce-scatter несёт кусок плотности ``min(1, d * s)``,
  шаги all-gather несут полностью свёрнутые куски ``min(1, d * N)``
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

logger = logging.getLogger(__name__)

MB = 1e6
GBPS = 1e9

SPEEDUP_HEADER = ("nodes", "dense_speedup", "dgc_speedup", "dense_comm_s", "dgc_comm_s")

AGGREGATIONS = ("recursive_doubling", "ring")


@dataclass(frozen=True)
class PerfParams:
    t_compute: float = 1.0
    model_bytes: float = 97.49 * MB
    density: float = 0.001
    bandwidth: float = 1.0 * GBPS  # bits/s
    latency_per_round: float = 50e-6
    codec_overhead: float = 1.5  # 6 байт на ненулевой против 4 в плотном виде
    aggregation: str = "recursive_doubling"
    max_nodes: int = 128

    def __post_init__(self) -> None:
        for name in ("t_compute", "model_bytes", "bandwidth", "codec_overhead"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.latency_per_round < 0:
            raise ValueError("latency_per_round must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")

    def with_(self, **changes) -> "PerfParams":
        return replace(self, **changes)


# Заявленные (не измеренные) значения t_compute.
PRESETS: dict[str, PerfParams] = {
    "alexnet": PerfParams(t_compute=1.0, model_bytes=232.56 * MB, density=0.001),
    "resnet50": PerfParams(t_compute=0.5, model_bytes=97.49 * MB, density=0.001),
}


def doubling_rounds(n_nodes: int) -> int:
    """ceil(log2 N); 0 для одного узла."""
    return (n_nodes - 1).bit_length() if n_nodes > 1 else 0


def message_time(nbytes: float, bandwidth: float, latency: float) -> float:
    return nbytes * 8.0 / bandwidth + latency


def dense_comm_bytes(params: PerfParams, n_nodes: int) -> float:
    if n_nodes <= 1:
        return 0.0
    return 2.0 * (n_nodes - 1) / n_nodes * params.model_bytes


def dense_comm_time(params: PerfParams, n_nodes: int) -> float:
    if n_nodes <= 1:
        return 0.0
    return (
        dense_comm_bytes(params, n_nodes) * 8.0 / params.bandwidth
        + 2 * (n_nodes - 1) * params.latency_per_round
    )


def round_densities(params: PerfParams, n_nodes: int) -> list[float]:
    """Плотность сообщения на каждом шаге агрегации (худший случай)."""
    d = params.density
    if params.aggregation == "ring":
        if n_nodes <= 1:
            return []
        scatter = [min(1.0, d * s) for s in range(1, n_nodes)]
        gather = [min(1.0, d * n_nodes)] * (n_nodes - 1)
        return scatter + gather
    return [min(1.0, d * 2.0 ** r) for r in range(1, doubling_rounds(n_nodes) + 1)]


def compressed_round_bytes(params: PerfParams, n_nodes: int) -> list[float]:
    dens = round_densities(params, n_nodes)
    chunk = params.model_bytes / n_nodes if params.aggregation == "ring" else params.model_bytes
    return [chunk * dr * params.codec_overhead for dr in dens]


def compressed_comm_bytes(params: PerfParams, n_nodes: int) -> float:
    return float(sum(compressed_round_bytes(params, n_nodes)))


def compressed_comm_time(params: PerfParams, n_nodes: int) -> float:
    return sum(
        message_time(b, params.bandwidth, params.latency_per_round)
        for b in compressed_round_bytes(params, n_nodes)
    )


def comm_time(params: PerfParams, n_nodes: int, *, compressed: bool = False) -> float:
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    if n_nodes == 1:
        return 0.0
    if compressed:
        return compressed_comm_time(params, n_nodes)
    return dense_comm_time(params, n_nodes)


def speedup(params: PerfParams, n_nodes: int, *, compressed: bool = False) -> float:
    t = params.t_compute
    return n_nodes * t / (t + comm_time(params, n_nodes, compressed=compressed))


def crossover_density(params: PerfParams, n_nodes: int, *, iterations: int = 80) -> float:
    """Плотность, при которой сжатый трафик равен плотному (бисекция).

    Если сжатый трафик меньше плотного даже при d = 1, возвращается 1.0.
    """
    if n_nodes <= 1:
        return 1.0
    dense = dense_comm_bytes(params, n_nodes)
    if compressed_comm_bytes(params.with_(density=1.0), n_nodes) <= dense:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mid == 0.0:
            break
        if compressed_comm_bytes(params.with_(density=mid), n_nodes) > dense:
            hi = mid
        else:
            lo = mid
    return lo


def node_counts(max_nodes: int) -> list[int]:
    counts = []
    n = 1
    while n <= max_nodes:
        counts.append(n)
        n *= 2
    return counts


@dataclass(frozen=True)
class SpeedupRow:
    nodes: int
    dense_speedup: float
    dgc_speedup: float
    dense_comm_s: float
    dgc_comm_s: float

    def as_tuple(self) -> tuple:
        return (self.nodes, self.dense_speedup, self.dgc_speedup, self.dense_comm_s, self.dgc_comm_s)


def speedup_table(params: PerfParams, nodes: list[int] | None = None) -> list[SpeedupRow]:
    rows = []
    for n in nodes or node_counts(params.max_nodes):
        rows.append(
            SpeedupRow(
                nodes=n,
                dense_speedup=speedup(params, n),
                dgc_speedup=speedup(params, n, compressed=True),
                dense_comm_s=comm_time(params, n),
                dgc_comm_s=comm_time(params, n, compressed=True),
            )
        )
    if rows:
        last = rows[-1]
        logger.info(
            "📈 N=%d: dense %.2fx, DGC %.2fx (crossover density %.4g)",
            last.nodes, last.dense_speedup, last.dgc_speedup,
            crossover_density(params, last.nodes),
        )
    return rows


def closed_form_doubling_bytes(params: PerfParams, n_nodes: int) -> float:
    """Сумма геометрической прогрессии, пока ни один раунд не упирается в 1."""
    rounds = doubling_rounds(n_nodes)
    return params.model_bytes * params.codec_overhead * params.density * (2.0 ** (rounds + 1) - 2.0)


def is_uncapped(params: PerfParams, n_nodes: int) -> bool:
    return params.density * 2.0 ** doubling_rounds(n_nodes) <= 1.0
