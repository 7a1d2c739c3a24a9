# sparsify.py - выбор порога и маска по слоям
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from codec import SparseUpdate
from core import GradientVector, RngStream

logger = logging.getLogger(__name__)

# Меньше этого числа сэмплов оценка порога бессмысленна -> точный порог.
MIN_SAMPLE = 10


class SelectionError(ValueError):
    """Некорректный вход для выбора порога."""


@dataclass(frozen=True)
class SparsityConfig:
    target_sparsity: float
    sample_fraction: float = 0.01
    overflow_factor: float = 2.0
    per_layer: bool = True
    sampled: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if not self.overflow_factor > 1.0:
            raise ValueError(f"overflow_factor must be > 1, got {self.overflow_factor}")

    def with_sparsity(self, sparsity: float) -> "SparsityConfig":
        return SparsityConfig(
            target_sparsity=sparsity,
            sample_fraction=self.sample_fraction,
            overflow_factor=self.overflow_factor,
            per_layer=self.per_layer,
            sampled=self.sampled,
        )


@dataclass(frozen=True, eq=False)
class SelectionResult:
    mask: np.ndarray
    threshold: float
    kept_count: int


def keep_budget(n: int, target_sparsity: float) -> int:
    """k = max(1, round((1 - s) * n)): сколько элементов отправляем из области."""
    return max(1, int(round((1.0 - target_sparsity) * n)))


def exact_threshold(magnitudes: np.ndarray, target_sparsity: float) -> float:
    """k-я по величине |g|. При s = 0 порог строго ниже минимума (все проходят)."""
    mags = np.asarray(magnitudes)
    n = mags.shape[0]
    if n == 0:
        raise SelectionError("exact_threshold: empty input")
    if not 0.0 <= target_sparsity < 1.0:
        raise SelectionError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    k = keep_budget(n, target_sparsity)
    if k >= n:
        return float(np.nextafter(mags.min(), -np.inf))
    return float(np.partition(mags, n - k)[n - k])


def sampled_threshold(
    magnitudes: np.ndarray,
    config: SparsityConfig,
    rng: RngStream | np.random.Generator,
) -> tuple[float, bool]:
    """Оценка порога по случайной выборке (0.1%..1% элементов).

    Если кандидатов (|g| >= оценки) больше overflow_factor * k, точный порог
    пересчитывается только по уже отобранным кандидатам: refined = True.
    Если кандидатов меньше k, оценка завышена и берётся точный порог.
    """
    mags = np.asarray(magnitudes)
    n = mags.shape[0]
    if n == 0:
        raise SelectionError("sampled_threshold: empty input")
    s = config.target_sparsity
    sample_size = int(config.sample_fraction * n)
    if sample_size < MIN_SAMPLE:
        return exact_threshold(mags, s), False
    if mags.min() == mags.max():
        logger.debug("sampled_threshold: degenerate input of %d equal values", n)
        return exact_threshold(mags, s), False

    gen = rng.generator() if isinstance(rng, RngStream) else rng
    sample = mags[gen.integers(0, n, size=sample_size)]
    estimate = exact_threshold(sample, s)

    k = keep_budget(n, s)
    candidates = mags[mags >= estimate]
    if candidates.shape[0] > config.overflow_factor * k:
        # Точный top-k только среди уже отобранных.
        refined = float(np.partition(candidates, candidates.shape[0] - k)[candidates.shape[0] - k])
        logger.debug(
            "sampled_threshold: %d candidates > %.1f*k (k=%d), refined",
            candidates.shape[0], config.overflow_factor, k,
        )
        return refined, True
    if candidates.shape[0] < k:
        logger.debug("sampled_threshold: estimate too high (%d < k=%d), exact fallback", candidates.shape[0], k)
        return exact_threshold(mags, s), False
    return estimate, False


def select(magnitudes: np.ndarray, threshold: float, budget: int) -> SelectionResult:
    """Маска |g| > thr; равные порогу добавляются по возрастанию индекса, пока не набрано budget."""
    mags = np.asarray(magnitudes)
    mask = mags > threshold
    kept = int(np.count_nonzero(mask))
    if kept < budget:
        ties = np.flatnonzero(mags == threshold)[: budget - kept]
        mask[ties] = True
        kept += int(ties.shape[0])
    return SelectionResult(mask=mask, threshold=float(threshold), kept_count=kept)


def scope_slices(v: GradientVector, per_layer: bool) -> list[slice]:
    if per_layer:
        return [seg.slice for seg in v.layout]
    return [slice(0, len(v))]


def compute_thresholds(
    v: GradientVector,
    config: SparsityConfig,
    rng: RngStream | None = None,
) -> list[float]:
    """Порог для каждой области выбора (слой или вся модель)."""
    mags = np.abs(v.values)
    thresholds = []
    for i, sl in enumerate(scope_slices(v, config.per_layer)):
        scope = mags[sl]
        if config.sampled and rng is not None:
            thr, _ = sampled_threshold(scope, config, rng.child(f"scope{i}"))
        else:
            thr = exact_threshold(scope, config.target_sparsity)
        thresholds.append(thr)
    return thresholds


def selection_mask(
    v: GradientVector,
    config: SparsityConfig,
    thresholds: Sequence[float],
) -> np.ndarray:
    slices = scope_slices(v, config.per_layer)
    if len(thresholds) != len(slices):
        raise SelectionError(f"expected {len(slices)} thresholds, got {len(thresholds)}")
    mags = np.abs(v.values)
    mask = np.zeros(len(v), dtype=bool)
    for sl, thr in zip(slices, thresholds):
        scope = mags[sl]
        budget = keep_budget(scope.shape[0], config.target_sparsity)
        mask[sl] = select(scope, thr, budget).mask
    return mask


def split(v: GradientVector, mask: np.ndarray) -> tuple[SparseUpdate, GradientVector]:
    """Разбиение v на отправляемую часть и остаток без арифметики."""
    sent = mask & (v.values != 0)
    idx = np.flatnonzero(sent)
    update = SparseUpdate(idx, v.values[idx].copy(), len(v))
    residual = v.values.copy()
    residual[mask] = 0
    return update, GradientVector(residual, v.layout)


def apply_mask(
    v: GradientVector,
    config: SparsityConfig,
    thresholds: Sequence[float],
) -> tuple[SparseUpdate, GradientVector]:
    return split(v, selection_mask(v, config, thresholds))
