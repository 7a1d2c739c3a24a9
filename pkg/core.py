# core.py - плоские векторы градиентов, разметка по слоям, детерминированный RNG
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

# Градиенты хранятся и передаются в 32-bit; нормы и редукции считаются в 64-bit.
WIRE_DTYPE = np.dtype(np.float32)
ACCUM_DTYPE = np.dtype(np.float64)

PRECISIONS = {32: np.dtype(np.float32), 64: np.dtype(np.float64)}


class LayoutMismatchError(ValueError):
    """Векторы с разной разметкой (или длиной) смешаны в одной операции."""


class NonFiniteError(ValueError):
    """В векторе появились NaN/Inf."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    extent: int

    @property
    def stop(self) -> int:
        return self.offset + self.extent

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class LayerLayout:
    """Разметка плоского вектора по слоям: подряд, без перекрытий, покрывает [0, M)."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        expected = 0
        names = set()
        for seg in self.segments:
            if seg.extent < 1:
                raise ValueError(f"segment {seg.name!r} has extent {seg.extent} < 1")
            if seg.offset != expected:
                raise ValueError(
                    f"segment {seg.name!r} starts at {seg.offset}, expected {expected}"
                )
            if seg.name in names:
                raise ValueError(f"duplicate segment name {seg.name!r}")
            names.add(seg.name)
            expected = seg.stop

    @classmethod
    def from_extents(cls, extents: Iterable[tuple[str, int]]) -> "LayerLayout":
        segments = []
        offset = 0
        for name, extent in extents:
            segments.append(Segment(name=name, offset=offset, extent=int(extent)))
            offset += int(extent)
        return cls(tuple(segments))

    @classmethod
    def single(cls, size: int, name: str = "w") -> "LayerLayout":
        return cls.from_extents([(name, size)])

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def names(self) -> list[str]:
        return [seg.name for seg in self.segments]


@dataclass(eq=False)
class GradientVector:
    """Плоский вектор (градиент, веса, аккумуляторы U/V) с разметкой по слоям.

    Один писатель: движок меняет ``values`` на месте, читать можно параллельно.
    Публичные функции этого модуля возвращают новые векторы.
    """

    values: np.ndarray
    layout: LayerLayout

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise ValueError(f"values must be flat, got shape {self.values.shape}")
        if self.values.shape[0] != self.layout.size:
            raise LayoutMismatchError(
                f"vector length {self.values.shape[0]} != layout size {self.layout.size}"
            )

    @classmethod
    def zeros(cls, layout: LayerLayout, dtype=WIRE_DTYPE) -> "GradientVector":
        return cls(np.zeros(layout.size, dtype=dtype), layout)

    @classmethod
    def from_values(cls, values, layout: LayerLayout | None = None, dtype=WIRE_DTYPE) -> "GradientVector":
        arr = np.array(values, dtype=dtype).reshape(-1)
        if layout is None:
            layout = LayerLayout.single(arr.shape[0]) if arr.shape[0] else LayerLayout(())
        return cls(arr, layout)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def copy(self) -> "GradientVector":
        return GradientVector(self.values.copy(), self.layout)

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.slice]
        raise KeyError(name)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def ensure_finite(self, what: str = "vector") -> "GradientVector":
        if not self.is_finite():
            bad = int(np.count_nonzero(~np.isfinite(self.values)))
            raise NonFiniteError(f"{what}: {bad} non-finite values")
        return self


def same_layout(x: GradientVector, y: GradientVector) -> bool:
    return x.layout == y.layout and len(x) == len(y)


def l2_norm(v: GradientVector) -> float:
    """sqrt(sum v_i^2) с накоплением в float64. Пустой вектор -> 0.0."""
    if len(v) == 0:
        return 0.0
    acc = np.square(v.values, dtype=ACCUM_DTYPE).sum(dtype=ACCUM_DTYPE)
    return float(math.sqrt(acc))


def saxpy(alpha: float, x: GradientVector, y: GradientVector) -> GradientVector:
    """alpha*x + y поэлементно, в dtype входных векторов."""
    if not same_layout(x, y):
        raise LayoutMismatchError("saxpy: x and y have different layouts")
    dtype = np.result_type(x.dtype, y.dtype)
    out = np.asarray(alpha, dtype=dtype) * x.values.astype(dtype, copy=False)
    out += y.values
    return GradientVector(out, x.layout)


def scale(alpha: float, v: GradientVector) -> GradientVector:
    return GradientVector(np.asarray(alpha, dtype=v.dtype) * v.values, v.layout)


# ====== Детерминированный RNG ======

_PURPOSE_MAX = 128


@dataclass(frozen=True)
class RngStream:
    """Счётчиковый поток случайных чисел, ключ = (seed, node, iteration, purpose).

    Ключ Philox (128 бит) берётся из blake2b-хэша идентификатора, поэтому
    результат не зависит от порядка, в котором узлы/итерации запрашивают потоки.
    """

    seed: int
    node: int
    iteration: int
    purpose: str
    _key: tuple[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.purpose) > _PURPOSE_MAX:
            raise ValueError(f"purpose tag longer than {_PURPOSE_MAX} chars")
        digest = hashlib.blake2b(self._identity(), digest_size=16).digest()
        key = (
            int.from_bytes(digest[:8], "little"),
            int.from_bytes(digest[8:], "little"),
        )
        object.__setattr__(self, "_key", key)

    def _identity(self) -> bytes:
        # Длины полей фиксированы, purpose с префиксом длины -> кодирование однозначно.
        tag = self.purpose.encode("utf-8")
        return b"".join(
            (
                (self.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"),
                int(self.node).to_bytes(8, "little", signed=True),
                int(self.iteration).to_bytes(8, "little", signed=True),
                len(tag).to_bytes(2, "little"),
                tag,
            )
        )

    @property
    def fingerprint(self) -> int:
        """128-битный отпечаток потока (ключ Philox)."""
        lo, hi = self._key
        return lo | (hi << 64)

    def generator(self) -> np.random.Generator:
        """Новый генератор, каждый раз с начала потока."""
        return np.random.Generator(np.random.Philox(key=np.array(self._key, dtype=np.uint64)))

    def child(self, tag: str) -> "RngStream":
        """Подпоток для вложенного назначения (например, отдельного слоя)."""
        return RngStream(self.seed, self.node, self.iteration, f"{self.purpose}/{tag}")


def derive_stream(seed: int, node: int, iteration: int, purpose: str) -> RngStream:
    return RngStream(seed=int(seed), node=int(node), iteration=int(iteration), purpose=str(purpose))
