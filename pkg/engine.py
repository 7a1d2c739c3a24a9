# engine.py - состояние DGC на одном узле
"""Конечный автомат Deep Gradient Compression на одном узле.

Рекурсии по вариантам (G - локальный градиент, уже умноженный на 1/N):

* ``vanilla_corrected``:   U <- m*U + G;       V <- V + U
* ``nesterov_corrected``:  U <- m*(U + G);     V <- V + U + G
* ``vanilla_uncorrected``, ``nesterov_uncorrected``: V <- V + G
  (момент живёт в глобальном оптимизаторе, см. ``sim.SgdOptimizer``)
* ``plain_sparse``: V <- V + G, без локального клиппинга

После отбора замаскированная часть V уходит в обновление и обнуляется.
С маскированием момента те же позиции U тоже обнуляются.
Learning rate движок не применяет.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum as PyEnum
from typing import Sequence

import numpy as np

import sparsify
from codec import SparseUpdate
from core import WIRE_DTYPE, GradientVector, LayerLayout, LayoutMismatchError, RngStream, l2_norm
from sparsify import SparsityConfig

logger = logging.getLogger(__name__)


class Variant(PyEnum):
    VANILLA_CORRECTED = "vanilla_corrected"
    NESTEROV_CORRECTED = "nesterov_corrected"
    VANILLA_UNCORRECTED = "vanilla_uncorrected"
    NESTEROV_UNCORRECTED = "nesterov_uncorrected"
    PLAIN_SPARSE = "plain_sparse"

    @property
    def corrected(self) -> bool:
        return self in (Variant.VANILLA_CORRECTED, Variant.NESTEROV_CORRECTED)

    @property
    def nesterov(self) -> bool:
        return self in (Variant.NESTEROV_CORRECTED, Variant.NESTEROV_UNCORRECTED)


# ====== Локальное клиппирование ======

@dataclass(frozen=True)
class ClipConfig:
    global_threshold: float
    node_count: int

    def __post_init__(self) -> None:
        if not self.global_threshold > 0:
            raise ValueError("global_threshold must be > 0")
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")

    @property
    def local_threshold(self) -> float:
        # thr_local = N^(-1/2) * thr_G
        return self.global_threshold / math.sqrt(self.node_count)


def clip_to(g: GradientVector, threshold: float) -> GradientVector:
    norm = l2_norm(g)
    if norm == 0.0 or norm <= threshold:
        return g
    factor = threshold / norm
    out = GradientVector((g.values * factor).astype(g.dtype, copy=False), g.layout)
    if l2_norm(out) > threshold:
        # округление в 32-bit может дать норму чуть выше порога
        factor *= 1.0 - 4.0 * float(np.finfo(g.dtype).eps)
        out = GradientVector((g.values * factor).astype(g.dtype, copy=False), g.layout)
    return out


def local_clip(g: GradientVector, clip: ClipConfig) -> GradientVector:
    """Клиппирование на узле до накопления: порог thr_G / sqrt(N)."""
    return clip_to(g, clip.local_threshold)


# ====== Warm-up ======

@dataclass(frozen=True)
class SparsitySchedule:
    warmup_values: tuple[float, ...]
    final_sparsity: float

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.warmup_values)
        object.__setattr__(self, "warmup_values", vals)
        if not 0.0 <= self.final_sparsity < 1.0:
            raise ValueError(f"final_sparsity must be in [0, 1), got {self.final_sparsity}")
        for a, b in zip(vals, vals[1:]):
            if not a < b:
                raise ValueError(f"warm-up values must be strictly increasing: {vals}")
        if vals and vals[-1] > self.final_sparsity:
            raise ValueError("last warm-up value exceeds final_sparsity")
        if vals and vals[0] < 0.0:
            raise ValueError("warm-up values must be non-negative")

    @classmethod
    def constant(cls, sparsity: float) -> "SparsitySchedule":
        return cls((), sparsity)

    @classmethod
    def exponential(cls, final_sparsity: float, warmup_epochs: int, initial: float = 0.75) -> "SparsitySchedule":
        """Плотность (1 - s) убывает геометрически от 1 - initial до 1 - final за warmup_epochs эпох."""
        if warmup_epochs <= 0:
            return cls.constant(final_sparsity)
        d0, d1 = 1.0 - initial, 1.0 - final_sparsity
        values = tuple(1.0 - d0 * (d1 / d0) ** (e / warmup_epochs) for e in range(warmup_epochs))
        return cls(values, final_sparsity)

    @property
    def warmup_epochs(self) -> int:
        return len(self.warmup_values)


DEFAULT_SCHEDULE = SparsitySchedule((0.75, 0.9375, 0.984375, 0.996), 0.999)


def warmup_sparsity(epoch: int, schedule: SparsitySchedule) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < len(schedule.warmup_values):
        return schedule.warmup_values[epoch]
    return schedule.final_sparsity


# ====== Состояние узла ======

@dataclass(eq=False)
class DgcNodeState:
    U: GradientVector | None
    V: GradientVector
    momentum: float
    variant: Variant
    clip: ClipConfig | None = None
    momentum_masking: bool = True
    selection: SparsityConfig = field(default_factory=lambda: SparsityConfig(0.999))
    node: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.U is not None and self.U.layout != self.V.layout:
            raise LayoutMismatchError("U and V must share the model layout")

    @classmethod
    def create(
        cls,
        layout: LayerLayout,
        *,
        momentum: float,
        variant: Variant,
        clip: ClipConfig | None = None,
        momentum_masking: bool = True,
        selection: SparsityConfig | None = None,
        node: int = 0,
        dtype=WIRE_DTYPE,
    ) -> "DgcNodeState":
        # U^k <- 0, V^k <- 0; у некорректированных вариантов U нет.
        U = GradientVector.zeros(layout, dtype) if variant.corrected else None
        return cls(
            U=U,
            V=GradientVector.zeros(layout, dtype),
            momentum=momentum,
            variant=variant,
            clip=clip,
            momentum_masking=momentum_masking,
            selection=selection or SparsityConfig(0.999),
            node=node,
        )

    @property
    def layout(self) -> LayerLayout:
        return self.V.layout


def _accumulate(state: DgcNodeState, g: np.ndarray) -> None:
    m = state.V.dtype.type(state.momentum)
    V = state.V.values
    if state.variant is Variant.VANILLA_CORRECTED:
        U = state.U.values
        U *= m
        U += g
        V += U
    elif state.variant is Variant.NESTEROV_CORRECTED:
        U = state.U.values
        U += g
        U *= m
        V += U
        V += g
    else:
        V += g


def step(
    state: DgcNodeState,
    g: GradientVector,
    sparsity: float,
    rng: RngStream | None = None,
    *,
    thresholds: Sequence[float] | None = None,
) -> SparseUpdate:
    """Одна итерация на узле: clip -> накопление -> порог -> маска -> очистка.

    ``thresholds`` задаёт пороги по областям вручную (+inf - ничего не
    отправлять, -inf - отправить всё).
    """
    if g.layout != state.layout:
        raise LayoutMismatchError("gradient layout differs from node state layout")
    g.ensure_finite("gradient")

    if state.clip is not None and state.variant is not Variant.PLAIN_SPARSE:
        g = local_clip(g, state.clip)

    _accumulate(state, g.values.astype(state.V.dtype, copy=False))

    config = state.selection.with_sparsity(sparsity)
    if thresholds is None:
        thresholds = sparsify.compute_thresholds(state.V, config, rng)
    mask = sparsify.selection_mask(state.V, config, thresholds)
    update, residual = sparsify.split(state.V, mask)

    state.V.values[:] = residual.values
    if state.U is not None and state.momentum_masking:
        # Momentum factor masking: та же маска для U.
        state.U.values[mask] = 0

    logger.debug(
        "node %d: sparsity %.6f, sent %d of %d", state.node, sparsity, update.nnz, len(state.V)
    )
    return update
