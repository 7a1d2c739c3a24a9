# sim.py - детерминированный симулятор синхронного data-parallel обучения
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum as PyEnum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import codec
import engine
import models
import perfmodel
from codec import SparseUpdate
from core import PRECISIONS, GradientVector, LayerLayout, LayoutMismatchError, derive_stream
from engine import ClipConfig, DgcNodeState, SparsitySchedule, Variant
from models import Dataset, Model, ModelSpec, NonFiniteLossError
from sparsify import SparsityConfig

logger = logging.getLogger(__name__)

TRACE_HEADER = ("iteration", "epoch", "loss", "eval", "bytes_per_node", "union_density", "wallclock_est")

DIVERGENCE_LOSS = 1e6
# Наблюдение для 99.9%: большинство координат обновляются раз в 600-1000 итераций.
REFERENCE_STALENESS = (600, 1000)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, trace: "MetricsTrace") -> None:
        super().__init__(message)
        self.trace = trace


class ReplicaDivergenceError(RuntimeError):
    """Копии весов на узлах разошлись."""


class Algorithm(PyEnum):
    DENSE_MOMENTUM = "dense_momentum"
    DENSE_NESTEROV = "dense_nesterov"
    VANILLA_CORRECTED = "vanilla_corrected"
    NESTEROV_CORRECTED = "nesterov_corrected"
    VANILLA_UNCORRECTED = "vanilla_uncorrected"
    NESTEROV_UNCORRECTED = "nesterov_uncorrected"
    PLAIN_SPARSE = "plain_sparse"

    @property
    def dense(self) -> bool:
        return self in (Algorithm.DENSE_MOMENTUM, Algorithm.DENSE_NESTEROV)

    @property
    def variant(self) -> Variant | None:
        return None if self.dense else Variant(self.value)

    @property
    def optimizer_mode(self) -> str:
        # Где живёт момент: в глобальном SGD (dense/некорректированные) или на узле.
        if self in (Algorithm.DENSE_NESTEROV, Algorithm.NESTEROV_UNCORRECTED):
            return "nesterov"
        if self in (Algorithm.DENSE_MOMENTUM, Algorithm.VANILLA_UNCORRECTED, Algorithm.PLAIN_SPARSE):
            return "momentum"
        return "plain"

    @property
    def baseline(self) -> "Algorithm":
        """Плотный аналог для --baseline."""
        if self in (Algorithm.DENSE_NESTEROV, Algorithm.NESTEROV_CORRECTED, Algorithm.NESTEROV_UNCORRECTED):
            return Algorithm.DENSE_NESTEROV
        return Algorithm.DENSE_MOMENTUM


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = Algorithm.VANILLA_CORRECTED
    nodes: int = 4
    batch_size: int = 32
    momentum: float = 0.9
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] = ()
    epochs: int = 8
    iterations_per_epoch: int = 0  # 0 -> samples // (nodes * batch_size)
    schedule: SparsitySchedule = engine.DEFAULT_SCHEDULE
    per_layer: bool = True
    sampled_threshold: bool = False
    sample_fraction: float = 0.01
    overflow_factor: float = 2.0
    momentum_masking: bool = True
    clip_threshold: float | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    seed: int = 0
    precision: int = 32
    workers: int = 1
    t_compute: float = 0.1
    bandwidth: float = 1e9
    latency: float = 50e-6

    def __post_init__(self) -> None:
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.iterations_per_epoch < 0:
            raise ValueError("iterations_per_epoch must be >= 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.clip_threshold is not None and not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be > 0")
        # проверка параметров выбора порога
        SparsityConfig(0.0, self.sample_fraction, self.overflow_factor)

    @property
    def dtype(self) -> np.dtype:
        return PRECISIONS[self.precision]

    def resolved_iterations_per_epoch(self) -> int:
        if self.iterations_per_epoch:
            return self.iterations_per_epoch
        return max(1, self.model.samples // (self.nodes * self.batch_size))

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_decay ** passed

    def selection(self) -> SparsityConfig:
        return SparsityConfig(
            target_sparsity=self.schedule.final_sparsity,
            sample_fraction=self.sample_fraction,
            overflow_factor=self.overflow_factor,
            per_layer=self.per_layer,
            sampled=self.sampled_threshold,
        )

    def clip(self) -> ClipConfig | None:
        if self.clip_threshold is None:
            return None
        return ClipConfig(self.clip_threshold, self.nodes)

    def to_mapping(self) -> dict[str, str]:
        """Полностью разрешённый конфиг в виде ``key -> value`` (формат run_config)."""
        spec = self.model
        return {
            "algorithm": self.algorithm.value,
            "nodes": str(self.nodes),
            "batch_size": str(self.batch_size),
            "momentum": repr(self.momentum),
            "lr": repr(self.lr),
            "lr_decay": repr(self.lr_decay),
            "lr_milestones": _fmt_list(self.lr_milestones),
            "epochs": str(self.epochs),
            "iterations_per_epoch": str(self.iterations_per_epoch),
            "warmup": _fmt_list(self.schedule.warmup_values),
            "final_sparsity": repr(self.schedule.final_sparsity),
            "per_layer": _fmt_bool(self.per_layer),
            "sampled_threshold": _fmt_bool(self.sampled_threshold),
            "sample_fraction": repr(self.sample_fraction),
            "overflow_factor": repr(self.overflow_factor),
            "momentum_masking": _fmt_bool(self.momentum_masking),
            "clip_threshold": "none" if self.clip_threshold is None else repr(self.clip_threshold),
            "model": spec.kind.value,
            "dimension": str(spec.dimension),
            "hidden": _fmt_list(spec.hidden),
            "samples": str(spec.samples),
            "informative": str(spec.informative),
            "separation": repr(spec.separation),
            "noise_scale": repr(spec.noise_scale),
            "ridge": repr(spec.ridge),
            "weight_decay": repr(spec.weight_decay),
            "seed": str(self.seed),
            "precision": str(self.precision),
            "workers": str(self.workers),
            "t_compute": repr(self.t_compute),
            "bandwidth": repr(self.bandwidth),
            "latency": repr(self.latency),
        }


def _fmt_list(values: Sequence) -> str:
    return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in values) if values else "none"


def _fmt_bool(flag: bool) -> str:
    return "true" if flag else "false"


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    epoch: int
    loss: float
    eval: float
    bytes_per_node: float
    union_density: float
    wallclock_est: float

    def as_row(self) -> tuple:
        return (
            self.iteration, self.epoch, repr(self.loss), repr(self.eval),
            repr(self.bytes_per_node), repr(self.union_density), repr(self.wallclock_est),
        )


@dataclass
class MetricsTrace:
    records: list[MetricsRecord] = field(default_factory=list)
    model_size: int = 0
    node_count: int = 1
    final_full_loss: float = math.nan
    final_eval: float = math.nan
    median_send_interval: float | None = None

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("iteration index must be monotone")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            for rec in self.records:
                writer.writerow(rec.as_row())


def read_trace_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        return [
            MetricsRecord(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]), float(r[6]))
            for r in reader
        ]


@dataclass(frozen=True)
class TraceSummary:
    final_loss: float
    final_eval: float
    mean_ratio: float
    total_bytes: float
    iterations: int


def summarize(records: Sequence[MetricsRecord], model_size: int, node_count: int) -> TraceSummary:
    """Сводка, которую можно пересчитать из trace.csv."""
    if not records:
        return TraceSummary(math.nan, math.nan, math.nan, 0.0, 0)
    dense_bytes = codec.VALUE_BYTES * model_size
    ratios = [dense_bytes / r.bytes_per_node for r in records if r.bytes_per_node > 0]
    return TraceSummary(
        final_loss=records[-1].loss,
        final_eval=records[-1].eval,
        mean_ratio=float(np.mean(ratios)) if ratios else math.inf,
        total_bytes=float(sum(r.bytes_per_node for r in records) * node_count),
        iterations=len(records),
    )


# ====== Минибатчи и градиенты ======

def sample_minibatch(
    dataset: Dataset,
    node: int,
    iteration: int,
    batch_size: int,
    *,
    seed: int,
    node_count: int,
    iterations_per_epoch: int,
) -> Dataset:
    """Узлы берут непересекающиеся куски одной перестановки эпохи.

    Итерация s эпохи: узел k получает позиции [(s*N + k)*b, (s*N + k + 1)*b)
    по модулю размера датасета.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    epoch, s = divmod(iteration, iterations_per_epoch)
    perm = derive_stream(seed, 0, epoch, "shuffle").generator().permutation(n)
    start = (s * node_count + node) * batch_size
    idx = perm[(start + np.arange(batch_size)) % n]
    return dataset.take(idx)


def grad(model: Model, w: np.ndarray, batch: Dataset, node_count: int) -> tuple[float, GradientVector]:
    """Средний лосс батча и градиент, масштабированный на 1/N: сумма по узлам даёт градиент всего батча."""
    loss, g = model.loss_and_grad(w, batch)
    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss {loss} (|w|max={float(np.max(np.abs(w))):.3g}, batch={len(batch)})"
        )
    g = g / g.dtype.type(node_count)
    return loss, GradientVector(g, model.layout)


# ====== Агрегация ======

def allreduce_dense(gradients: Sequence[GradientVector]) -> GradientVector:
    if not gradients:
        raise ValueError("no gradients to reduce")
    layout = gradients[0].layout
    total = gradients[0].values.copy()
    for g in gradients[1:]:
        if g.layout != layout:
            raise LayoutMismatchError("allreduce_dense: layout mismatch")
        total += g.values
    return GradientVector(total, layout)


@dataclass(frozen=True)
class AggregationStats:
    initial_density: float
    round_densities: tuple[float, ...]
    worst_case_densities: tuple[float, ...]
    round_bytes: tuple[int, ...]
    node_bytes: tuple[int, ...]

    @property
    def rounds(self) -> int:
        return len(self.round_densities)

    @property
    def union_density(self) -> float:
        return self.round_densities[-1] if self.round_densities else self.initial_density


def allreduce_sparse(
    updates: Sequence[SparseUpdate],
    layout: LayerLayout | None = None,
    *,
    node_bytes: Sequence[int] | None = None,
) -> tuple[GradientVector, AggregationStats]:
    """Точная сумма + модель трафика recursive doubling по реальным множествам индексов.

    Раунд r (1..ceil(log2 N)): узел отправляет частичную сумму своего блока
    размера 2^(r-1); после раунда он держит объединение блока размера 2^r.
    """
    if not updates:
        raise ValueError("no updates to reduce")
    length = updates[0].length
    for u in updates:
        if u.length != length:
            raise LayoutMismatchError("allreduce_sparse: length mismatch")
    layout = layout or LayerLayout.single(length)
    if layout.size != length:
        raise LayoutMismatchError("allreduce_sparse: layout does not match update length")

    dtype = np.result_type(*[u.values.dtype for u in updates])
    total = np.zeros(length, dtype=dtype)
    for u in updates:
        total[u.indices] += u.values

    n = len(updates)
    if node_bytes is None:
        node_bytes = [codec.encoded_nbytes(u.indices) for u in updates]
    blocks = [u.indices for u in updates]
    d0 = float(np.mean([u.nnz for u in updates])) / length
    densities, worst, round_bytes = [], [], []
    rnd = 0
    while len(blocks) > 1:
        rnd += 1
        # сообщения раунда: каждый узел шлёт объединение своего текущего блока
        size = 2 ** (rnd - 1)
        round_bytes.append(
            sum(codec.encoded_nbytes(blocks[node // size]) for node in range(n))
        )
        blocks = [
            np.union1d(blocks[i], blocks[i + 1]) if i + 1 < len(blocks) else blocks[i]
            for i in range(0, len(blocks), 2)
        ]
        size *= 2
        densities.append(sum(blocks[node // size].shape[0] for node in range(n)) / (n * length))
        worst.append(min(1.0, d0 * 2 ** rnd))

    stats = AggregationStats(
        initial_density=d0,
        round_densities=tuple(densities),
        worst_case_densities=tuple(worst),
        round_bytes=tuple(round_bytes),
        node_bytes=tuple(int(b) for b in node_bytes),
    )
    return GradientVector(total, layout), stats


# ====== Глобальный SGD ======

class SgdOptimizer:
    """Глобальный шаг SGD: plain (момент уже на узлах), momentum или nesterov."""

    def __init__(self, momentum: float, mode: str, size: int, dtype) -> None:
        if mode not in ("plain", "momentum", "nesterov"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.mode = mode
        self.momentum = dtype.type(momentum)
        self.buffer = np.zeros(size, dtype=dtype) if mode != "plain" else None

    def apply(self, w: np.ndarray, G: np.ndarray, lr: float) -> None:
        lr = w.dtype.type(lr)
        if self.mode == "plain":
            w -= lr * G
            return
        u = self.buffer
        u *= self.momentum
        u += G
        if self.mode == "momentum":
            w -= lr * u
        else:
            w -= lr * (self.momentum * u + G)


@dataclass(eq=False)
class Replica:
    weights: np.ndarray
    optimizer: SgdOptimizer


# ====== Устаревание ======

class StalenessTracker:
    """Интервалы между отправками каждой координаты на каждом узле."""

    def __init__(self, nodes: int, size: int) -> None:
        self.last_sent = np.full((nodes, size), -1, dtype=np.int64)
        self._intervals: list[np.ndarray] = []

    def record(self, node: int, indices: np.ndarray, iteration: int) -> None:
        if indices.size == 0:
            return
        prev = self.last_sent[node, indices]
        seen = prev >= 0
        if seen.any():
            self._intervals.append(iteration - prev[seen])
        self.last_sent[node, indices] = iteration

    def median_interval(self) -> float | None:
        if not self._intervals:
            return None
        return float(np.median(np.concatenate(self._intervals)))


# ====== Основной цикл ======

@dataclass(eq=False)
class _NodeResult:
    loss: float
    gradient: GradientVector | None = None
    update: SparseUpdate | None = None
    nbytes: int = 0


def _dense_wallclock(config: TrainConfig, model_size: int) -> float:
    params = perfmodel.PerfParams(
        t_compute=config.t_compute,
        model_bytes=codec.VALUE_BYTES * model_size,
        bandwidth=config.bandwidth,
        latency_per_round=config.latency,
    )
    return config.t_compute + perfmodel.comm_time(params, config.nodes)


def _sparse_wallclock(config: TrainConfig, stats: AggregationStats) -> float:
    comm = sum(
        perfmodel.message_time(b / config.nodes, config.bandwidth, config.latency)
        for b in stats.round_bytes
    )
    return config.t_compute + comm


def train(
    config: TrainConfig,
    on_iteration: Callable[[int, np.ndarray], None] | None = None,
) -> MetricsTrace:
    """N синхронных узлов: grad -> engine.step (или dense) -> all-reduce -> SGD на каждой копии."""
    dtype = config.dtype
    model, data = models.build(config.model, config.seed, dtype)
    layout = model.layout
    size = model.size
    N = config.nodes
    ipe = config.resolved_iterations_per_epoch()
    algorithm = config.algorithm
    clip = config.clip()

    w0 = model.init_weights(derive_stream(config.seed, 0, 0, "init"), dtype)
    replicas = [
        Replica(w0.copy(), SgdOptimizer(config.momentum, algorithm.optimizer_mode, size, dtype))
        for _ in range(N)
    ]
    states = []
    if not algorithm.dense:
        states = [
            DgcNodeState.create(
                layout,
                momentum=config.momentum,
                variant=algorithm.variant,
                clip=clip,
                momentum_masking=config.momentum_masking,
                selection=config.selection(),
                node=k,
                dtype=dtype,
            )
            for k in range(N)
        ]
    staleness = StalenessTracker(N, size) if states else None
    trace = MetricsTrace(model_size=size, node_count=N)
    dense_wallclock = _dense_wallclock(config, size)

    logger.info(
        "🚀 train: %s, N=%d, b=%d, %d epochs x %d iterations, %d params, seed=%d",
        algorithm.value, N, config.batch_size, config.epochs, ipe, size, config.seed,
    )

    def node_step(k: int, t: int, sparsity: float) -> _NodeResult:
        w = replicas[k].weights
        batch = sample_minibatch(
            data, k, t, config.batch_size, seed=config.seed, node_count=N, iterations_per_epoch=ipe
        )
        loss, g = grad(model, w, batch, N)
        if algorithm.dense:
            return _NodeResult(loss, gradient=g, nbytes=codec.VALUE_BYTES * size)
        update = engine.step(states[k], g, sparsity, derive_stream(config.seed, k, t, "select"))
        if config.precision == 32:
            # путь по проводу: encode -> decode
            encoded = codec.encode(update)
            return _NodeResult(loss, update=codec.decode(encoded), nbytes=encoded.nbytes)
        return _NodeResult(loss, update=update, nbytes=codec.encoded_nbytes(update.indices))

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        t = 0
        for epoch in range(config.epochs):
            sparsity = engine.warmup_sparsity(epoch, config.schedule)
            lr = config.lr_at(epoch)
            if not algorithm.dense:
                logger.info("epoch %d: sparsity %.6g, lr %.4g", epoch, sparsity, lr)
            for _ in range(ipe):
                try:
                    if pool is not None:
                        results = list(pool.map(lambda k: node_step(k, t, sparsity), range(N)))
                    else:
                        results = [node_step(k, t, sparsity) for k in range(N)]
                except NonFiniteLossError as e:
                    logger.error("❌ divergence at iteration %d: %s", t, e)
                    raise TrainingDivergedError(str(e), trace) from e

                if algorithm.dense:
                    G = allreduce_dense([r.gradient for r in results])
                    if clip is not None:
                        G = engine.clip_to(G, clip.global_threshold)
                    union_density = 1.0
                    wallclock = dense_wallclock
                else:
                    G, stats = allreduce_sparse(
                        [r.update for r in results], layout, node_bytes=[r.nbytes for r in results]
                    )
                    for k, r in enumerate(results):
                        staleness.record(k, r.update.indices, t)
                    union_density = stats.union_density
                    wallclock = _sparse_wallclock(config, stats)

                for rep in replicas:
                    rep.optimizer.apply(rep.weights, G.values, lr)
                _check_replicas(replicas, t)

                w = replicas[0].weights
                loss = float(np.mean([r.loss for r in results]))
                record = MetricsRecord(
                    iteration=t,
                    epoch=epoch,
                    loss=loss,
                    eval=model.evaluate(w, data),
                    bytes_per_node=float(np.mean([r.nbytes for r in results])),
                    union_density=float(union_density),
                    wallclock_est=float(wallclock),
                )
                trace.append(record)
                if on_iteration is not None:
                    on_iteration(t, w)

                if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                    logger.error("❌ divergence at iteration %d: loss=%r", t, loss)
                    raise TrainingDivergedError(f"loss {loss!r} at iteration {t}", trace)
                logger.debug("it %d: loss %.6g, bytes/node %.0f", t, loss, record.bytes_per_node)
                t += 1

            last = trace.records[-1]
            logger.info(
                "epoch %d done: loss %.5g, eval %.5g, bytes/node %.0f",
                epoch, last.loss, last.eval, last.bytes_per_node,
            )
    finally:
        if pool is not None:
            pool.shutdown()

    w = replicas[0].weights
    trace.final_full_loss = float(model.loss(w, data))
    trace.final_eval = float(model.evaluate(w, data))
    if staleness is not None:
        trace.median_send_interval = staleness.median_interval()
        logger.info(
            "⏳ median inter-send interval: %s iterations (reference at 99.9%% sparsity: %d-%d)",
            trace.median_send_interval, *REFERENCE_STALENESS,
        )
    logger.info("✅ train done: full-data loss %.6g, eval %.6g", trace.final_full_loss, trace.final_eval)
    return trace


def _check_replicas(replicas: Sequence[Replica], iteration: int) -> None:
    ref = replicas[0].weights
    for k, rep in enumerate(replicas[1:], start=1):
        if not np.array_equal(rep.weights, ref):
            raise ReplicaDivergenceError(f"node {k} weights differ from node 0 at iteration {iteration}")

