# models.py - игрушечные модели с аналитическими градиентами и синтетические датасеты
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum as PyEnum

import numpy as np

from core import LayerLayout, RngStream, derive_stream

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Лосс стал NaN/Inf: запуск прерывается."""


class ModelKind(PyEnum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.LOGISTIC
    dimension: int = 1000
    hidden: tuple[int, ...] = (64, 64)
    samples: int = 2048
    informative: int = 16
    separation: float = 0.3
    noise_scale: float = 1.0
    ridge: float = 0.1
    weight_decay: float = 0.0  # L2 на весах logistic/mlp, смещения не штрафуются

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if not self.weight_decay >= 0.0:
            raise ValueError("weight_decay must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")


@dataclass(eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.X.shape[0])

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^z) - y*z, устойчиво
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


class Model:
    """Общий интерфейс: плоский вектор весов + аналитический градиент среднего лосса."""

    layout: LayerLayout
    weight_decay: float = 0.0

    @property
    def size(self) -> int:
        return self.layout.size

    def init_weights(self, stream: RngStream, dtype=np.float32) -> np.ndarray:
        raise NotImplementedError

    def loss_and_grad(self, w: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def loss(self, w: np.ndarray, batch: Dataset) -> float:
        return self.loss_and_grad(w, batch)[0]

    def evaluate(self, w: np.ndarray, data: Dataset) -> float:
        raise NotImplementedError

    def _decayed(self) -> list[slice]:
        return [s.slice for s in self.layout if s.name == "weight" or s.name.endswith(".weight")]

    def _add_decay(self, w: np.ndarray, loss: float, grad: np.ndarray | None = None) -> float:
        """loss + wd/2 * |W|^2 по весовым слоям; grad дополняется на месте."""
        if not self.weight_decay:
            return loss
        penalty = 0.0
        for sl in self._decayed():
            W = w[sl].astype(np.float64, copy=False)
            penalty += float(W @ W)
            if grad is not None:
                grad[sl] += (self.weight_decay * W).astype(grad.dtype, copy=False)
        return loss + 0.5 * self.weight_decay * penalty


class QuadraticBowl(Model):
    """f(w) = 1/2 w^T A w - (b + xi)^T w, xi - шум выборки."""

    def __init__(self, A: np.ndarray, b: np.ndarray) -> None:
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        d = self.b.shape[0]
        if self.A.shape != (d, d):
            raise ValueError(f"A must be {d}x{d}, got {self.A.shape}")
        self.layout = LayerLayout.single(d)
        self.optimum = np.linalg.solve(self.A, self.b)

    def init_weights(self, stream: RngStream, dtype=np.float32) -> np.ndarray:
        return stream.generator().standard_normal(self.size).astype(dtype)

    def loss_and_grad(self, w: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
        w64 = w.astype(np.float64, copy=False)
        shift = self.b + batch.X.mean(axis=0, dtype=np.float64) if len(batch) else self.b
        Aw = self.A @ w64
        loss = 0.5 * float(w64 @ Aw) - float(shift @ w64)
        return loss, (Aw - shift).astype(w.dtype, copy=False)

    def evaluate(self, w: np.ndarray, data: Dataset) -> float:
        # расстояние до оптимума
        return float(np.linalg.norm(w.astype(np.float64) - self.optimum))


class LogisticRegression(Model):
    def __init__(self, dimension: int, weight_decay: float = 0.0) -> None:
        self.dimension = dimension
        self.weight_decay = weight_decay
        self.layout = LayerLayout.from_extents([("weight", dimension), ("bias", 1)])

    def init_weights(self, stream: RngStream, dtype=np.float32) -> np.ndarray:
        return np.zeros(self.size, dtype=dtype)

    def _logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        return X @ w[: self.dimension] + w[self.dimension]

    def loss_and_grad(self, w: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
        z = self._logits(w, batch.X)
        loss = _bce_with_logits(z, batch.y)
        err = (_sigmoid(z) - batch.y) / len(batch)
        grad = np.empty_like(w)
        grad[: self.dimension] = batch.X.T @ err
        grad[self.dimension] = err.sum()
        return self._add_decay(w, loss, grad), grad

    def loss(self, w: np.ndarray, batch: Dataset) -> float:
        return self._add_decay(w, _bce_with_logits(self._logits(w, batch.X), batch.y))

    def evaluate(self, w: np.ndarray, data: Dataset) -> float:
        # accuracy
        return float(np.mean((self._logits(w, data.X) > 0) == (data.y > 0.5)))


class TinyMlp(Model):
    """tanh-MLP с одним логитом на выходе, бинарная кросс-энтропия."""

    def __init__(self, inputs: int, hidden: tuple[int, ...], weight_decay: float = 0.0) -> None:
        self.widths = (inputs, *hidden, 1)
        self.weight_decay = weight_decay
        extents = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths, self.widths[1:])):
            name = f"fc{i + 1}" if i < len(hidden) else "out"
            extents.append((f"{name}.weight", fan_in * fan_out))
            extents.append((f"{name}.bias", fan_out))
        self.layout = LayerLayout.from_extents(extents)

    def _params(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        segs = list(self.layout)
        for i, (fan_in, fan_out) in enumerate(zip(self.widths, self.widths[1:])):
            W = w[segs[2 * i].slice].reshape(fan_in, fan_out)
            b = w[segs[2 * i + 1].slice]
            layers.append((W, b))
        return layers

    def init_weights(self, stream: RngStream, dtype=np.float32) -> np.ndarray:
        gen = stream.generator()
        w = np.zeros(self.size, dtype=np.float64)
        segs = list(self.layout)
        for i, fan_in in enumerate(self.widths[:-1]):
            seg = segs[2 * i]
            w[seg.slice] = gen.standard_normal(seg.extent) / math.sqrt(fan_in)
        return w.astype(dtype)

    def _forward(self, w: np.ndarray, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        acts = [X]
        h = X
        layers = self._params(w)
        for W, b in layers[:-1]:
            h = np.tanh(h @ W + b)
            acts.append(h)
        W, b = layers[-1]
        z = (h @ W + b)[:, 0]
        return acts, z

    def loss_and_grad(self, w: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
        acts, z = self._forward(w, batch.X)
        loss = _bce_with_logits(z, batch.y)
        grad = np.empty_like(w)
        gparams = self._params(grad)
        layers = self._params(w)

        delta = ((_sigmoid(z) - batch.y) / len(batch))[:, None]
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            gW, gb = gparams[i]
            gW[...] = acts[i].T @ delta
            gb[...] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ W.T) * (1.0 - acts[i] ** 2)
        return self._add_decay(w, loss, grad), grad

    def loss(self, w: np.ndarray, batch: Dataset) -> float:
        return self._add_decay(w, _bce_with_logits(self._forward(w, batch.X)[1], batch.y))

    def evaluate(self, w: np.ndarray, data: Dataset) -> float:
        return float(np.mean((self._forward(w, data.X)[1] > 0) == (data.y > 0.5)))


# ====== Синтетические датасеты ======

def _balanced_labels(n: int) -> np.ndarray:
    y = np.zeros(n, dtype=np.float64)
    y[1::2] = 1.0
    return y


def make_quadratic(spec: ModelSpec, stream: RngStream, dtype=np.float32) -> tuple[QuadraticBowl, Dataset]:
    # A = M^T M / d + ridge*I: симметричная положительно определённая
    gen = stream.generator()
    d = spec.dimension
    M = gen.standard_normal((d, d)) / math.sqrt(d)
    A = M.T @ M + spec.ridge * np.eye(d)
    b = gen.standard_normal(d)
    noise = spec.noise_scale * gen.standard_normal((spec.samples, d))
    data = Dataset(noise.astype(dtype), np.zeros(spec.samples, dtype=dtype))
    return QuadraticBowl(A, b), data


def make_logistic(spec: ModelSpec, stream: RngStream, dtype=np.float32) -> tuple[LogisticRegression, Dataset]:
    """Два гауссовых кластера, различающихся только на ``informative`` координатах."""
    gen = stream.generator()
    n, d = spec.samples, spec.dimension
    y = _balanced_labels(n)
    X = gen.standard_normal((n, d), dtype=np.float32) * np.float32(spec.noise_scale)
    informative = np.sort(gen.choice(d, size=min(spec.informative, d), replace=False))
    sign = (2.0 * y - 1.0)[:, None]
    X[:, informative] = gen.standard_normal((n, informative.shape[0])) + sign * spec.separation
    return LogisticRegression(d, spec.weight_decay), Dataset(X.astype(dtype, copy=False), y.astype(dtype))


def make_moons(spec: ModelSpec, stream: RngStream, dtype=np.float32) -> tuple[TinyMlp, Dataset]:
    gen = stream.generator()
    n = spec.samples
    y = _balanced_labels(n)
    t = gen.uniform(0.0, math.pi, size=n)
    X = np.where(
        (y > 0.5)[:, None],
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
        np.stack([np.cos(t), np.sin(t)], axis=1),
    )
    X = X + spec.noise_scale * gen.standard_normal((n, 2))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    return TinyMlp(2, spec.hidden, spec.weight_decay), Dataset(X.astype(dtype), y.astype(dtype))


_BUILDERS = {
    ModelKind.QUADRATIC: make_quadratic,
    ModelKind.LOGISTIC: make_logistic,
    ModelKind.MLP: make_moons,
}


def build(spec: ModelSpec, seed: int, dtype=np.float32) -> tuple[Model, Dataset]:
    stream = derive_stream(seed, 0, 0, f"dataset/{spec.kind.value}")
    model, data = _BUILDERS[spec.kind](spec, stream, dtype)
    logger.info(
        "🧩 model %s: %d params in %d layers, %d samples",
        spec.kind.value, model.size, len(model.layout), len(data),
    )
    return model, data
