# codec.py - формат передачи разреженного обновления
"""Формат передачи разреженного обновления.

Поток - последовательность 6-байтовых токенов::

    [run_len: uint16 LE][value: float32 LE]

``run_len`` - число нулей строго между предыдущей позицией и этим значением.
Разрыв длиннее 65535 нулей режется филлерами ``[65535][0.0]``: филлер
съедает 65535 нулей и собственную (нулевую) позицию. Хвостовые нули
задаются ``original_length``, которая передаётся отдельно (или в 8-байтовом
заголовке дампа).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core import WIRE_DTYPE

logger = logging.getLogger(__name__)

MAX_RUN = 0xFFFF
# Филлер занимает MAX_RUN нулей и собственную позицию.
FILLER_SPAN = MAX_RUN + 1

TOKEN_DTYPE = np.dtype([("run", "<u2"), ("value", "<f4")])  # packed, itemsize 6
TOKEN_BYTES = TOKEN_DTYPE.itemsize
VALUE_BYTES = 4
HEADER_DTYPE = np.dtype("<u8")


class MalformedStreamError(ValueError):
    """Поток не декодируется: обрезан, выходит за original_length или не мог быть выдан encode."""


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    """Выжившие компоненты градиента: строго возрастающие индексы и ненулевые значения."""

    indices: np.ndarray
    values: np.ndarray
    length: int

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        vals = np.asarray(self.values).reshape(-1)
        if vals.dtype.kind != "f":
            vals = vals.astype(WIRE_DTYPE)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        if idx.shape != vals.shape:
            raise ValueError(f"indices/values count mismatch: {idx.shape[0]} vs {vals.shape[0]}")
        if self.length < 0:
            raise ValueError("length must be non-negative")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.length:
                raise ValueError(f"indices out of range [0, {self.length})")
            if idx.size > 1 and not bool(np.all(np.diff(idx) > 0)):
                raise ValueError("indices must be strictly increasing")
            if not bool(np.all(vals != 0)):
                raise ValueError("stored values must be nonzero")

    @classmethod
    def empty(cls, length: int, dtype=WIRE_DTYPE) -> "SparseUpdate":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=dtype), int(length))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseUpdate":
        dense = np.asarray(dense)
        idx = np.flatnonzero(dense)
        return cls(idx, dense[idx], int(dense.shape[0]))

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def to_dense(self, dtype=None) -> np.ndarray:
        out = np.zeros(self.length, dtype=dtype or self.values.dtype)
        out[self.indices] = self.values
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return (
            self.length == other.length
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"SparseUpdate(length={self.length}, nnz={self.nnz})"


@dataclass(frozen=True)
class EncodedUpdate:
    data: bytes
    original_length: int
    nonzero_count: int

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @property
    def run_count(self) -> int:
        return len(self.data) // TOKEN_BYTES

    @property
    def filler_count(self) -> int:
        return self.run_count - self.nonzero_count

    @property
    def is_empty(self) -> bool:
        return not self.data


def _gap_layout(indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gaps = np.diff(indices, prepend=-1) - 1
    fills = gaps // FILLER_SPAN
    return gaps - fills * FILLER_SPAN, fills


def encoded_nbytes(indices: np.ndarray) -> int:
    """Размер кодированного потока без построения байтов (для учёта трафика)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return 0
    _, fills = _gap_layout(indices)
    return int(indices.size + fills.sum()) * TOKEN_BYTES


def encode(u: SparseUpdate) -> EncodedUpdate:
    n = u.nnz
    if n == 0:
        return EncodedUpdate(b"", u.length, 0)

    rem, fills = _gap_layout(u.indices)
    counts = fills + 1
    total = int(counts.sum())

    tokens = np.empty(total, dtype=TOKEN_DTYPE)
    # Для каждого значения: сначала fills[i] филлеров, потом само значение.
    owner = np.repeat(np.arange(n), counts)
    starts = np.cumsum(counts) - counts
    pos = np.arange(total) - starts[owner]
    is_value = pos == fills[owner]
    tokens["run"] = np.where(is_value, rem[owner], MAX_RUN)
    tokens["value"] = np.where(is_value, u.values.astype(WIRE_DTYPE)[owner], 0.0)

    if total != n:
        logger.debug("encode: %d filler tokens for %d values", total - n, n)
    return EncodedUpdate(tokens.tobytes(), u.length, n)


def decode(e: EncodedUpdate) -> SparseUpdate:
    if len(e.data) % TOKEN_BYTES:
        raise MalformedStreamError(
            f"truncated stream: {len(e.data)} bytes is not a multiple of {TOKEN_BYTES}"
        )
    if not e.data:
        return SparseUpdate.empty(e.original_length)

    tokens = np.frombuffer(e.data, dtype=TOKEN_DTYPE)
    positions = np.cumsum(tokens["run"].astype(np.int64) + 1) - 1
    if positions[-1] >= e.original_length:
        raise MalformedStreamError(
            f"index overflow: position {int(positions[-1])} past length {e.original_length}"
        )
    values = tokens["value"].astype(WIRE_DTYPE)
    keep = values != 0
    if not bool(np.all(keep | (tokens["run"] == MAX_RUN))):
        bad = int(np.flatnonzero(~keep & (tokens["run"] != MAX_RUN))[0])
        raise MalformedStreamError(f"token {bad}: zero value with run {int(tokens['run'][bad])}")
    if not keep[-1]:
        raise MalformedStreamError("stream ends with a filler token")
    kept = int(keep.sum())
    if kept != e.nonzero_count:
        raise MalformedStreamError(f"stream holds {kept} values, header says {e.nonzero_count}")
    return SparseUpdate(positions[keep], values[keep], e.original_length)


def compression_ratio(dense_length: int, e: EncodedUpdate) -> tuple[float, bool]:
    """Плотный размер / сжатый размер (больше - лучше).

    Возвращает (ratio, empty): для пустого потока ratio = +inf и empty = True.
    """
    if dense_length <= 0:
        raise ValueError("dense_length must be positive")
    if e.is_empty:
        return math.inf, True
    return VALUE_BYTES * dense_length / e.nbytes, False


# ====== Дамп в файл: [original_length: uint64 LE] + поток ======

def dump_bytes(e: EncodedUpdate) -> bytes:
    return np.array([e.original_length], dtype=HEADER_DTYPE).tobytes() + e.data


def load_bytes(blob: bytes) -> EncodedUpdate:
    if len(blob) < HEADER_DTYPE.itemsize:
        raise MalformedStreamError("dump shorter than its 8-byte header")
    length = int(np.frombuffer(blob[: HEADER_DTYPE.itemsize], dtype=HEADER_DTYPE)[0])
    data = bytes(blob[HEADER_DTYPE.itemsize :])
    if len(data) % TOKEN_BYTES:
        raise MalformedStreamError("truncated stream in dump")
    tokens = np.frombuffer(data, dtype=TOKEN_DTYPE)
    nonzero = int(np.count_nonzero(tokens["value"]))
    return EncodedUpdate(data, length, nonzero)


def write_dump(path: str | Path, e: EncodedUpdate) -> None:
    Path(path).write_bytes(dump_bytes(e))


def read_dump(path: str | Path) -> EncodedUpdate:
    return load_bytes(Path(path).read_bytes())
