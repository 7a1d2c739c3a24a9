# run_config.py - разбор файлов конфигурации запусков (key = value)
from __future__ import annotations

import io
import logging
from dataclasses import fields
from pathlib import Path
from typing import Callable, Mapping

from dotenv.parser import parse_stream

from engine import SparsitySchedule
from models import ModelKind, ModelSpec
from perfmodel import AGGREGATIONS, PRESETS, PerfParams
from sim import Algorithm, TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Ошибка в файле конфигурации; ``line`` - номер строки с единицы (0 - файл целиком)."""

    def __init__(self, message: str, *, line: int = 0, key: str | None = None) -> None:
        self.line = line
        self.key = key
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")


# ====== Парсеры значений ======

def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_list(item: Callable[[str], object]) -> Callable[[str], tuple]:
    def parse(raw: str) -> tuple:
        raw = raw.strip()
        if raw.lower() in ("", "none"):
            return ()
        return tuple(item(part.strip()) for part in raw.split(","))
    return parse


def _parse_optional_float(raw: str) -> float | None:
    return None if raw.strip().lower() == "none" else float(raw)


def _parse_choice(choices: tuple[str, ...]) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        v = raw.strip()
        if v not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}, got {v!r}")
        return v
    return parse


float_list = _parse_list(float)
int_list = _parse_list(int)

# key -> parser; значения по умолчанию берутся из TrainConfig / ModelSpec
TRAIN_KEYS: dict[str, Callable[[str], object]] = {
    "algorithm": Algorithm,
    "nodes": int,
    "batch_size": int,
    "momentum": float,
    "lr": float,
    "lr_decay": float,
    "lr_milestones": int_list,
    "epochs": int,
    "iterations_per_epoch": int,
    "warmup": float_list,
    "final_sparsity": float,
    "per_layer": _parse_bool,
    "sampled_threshold": _parse_bool,
    "sample_fraction": float,
    "overflow_factor": float,
    "momentum_masking": _parse_bool,
    "clip_threshold": _parse_optional_float,
    "model": ModelKind,
    "dimension": int,
    "hidden": int_list,
    "samples": int,
    "informative": int,
    "separation": float,
    "noise_scale": float,
    "ridge": float,
    "weight_decay": float,
    "seed": int,
    "precision": int,
    "workers": int,
    "t_compute": float,
    "bandwidth": float,
    "latency": float,
}

PERF_KEYS: dict[str, Callable[[str], object]] = {
    "preset": _parse_choice(tuple(PRESETS)),
    "t_compute": float,
    "model_bytes": float,
    "density": float,
    "bandwidth": float,
    "latency_per_round": float,
    "codec_overhead": float,
    "aggregation": _parse_choice(AGGREGATIONS),
    "max_nodes": int,
}

_MODEL_FIELDS = {f.name for f in fields(ModelSpec)} - {"kind"}


# ====== Чтение файла ======

def _binding_line(original) -> int:
    # пустые строки перед ключом попадают в тот же фрагмент
    string = original.string
    lead = string[: len(string) - len(string.lstrip())]
    return original.line + lead.count("\n")


def parse_bindings(
    text: str,
    schema: Mapping[str, Callable[[str], object]],
) -> dict[str, tuple[object, int]]:
    """Разбирает текст в ``key -> (значение, номер строки)``; неизвестный ключ - ошибка."""
    values: dict[str, tuple[object, int]] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = _binding_line(binding.original)
        if binding.error:
            raise ConfigError(f"cannot parse {binding.original.string.strip()!r}", line=line)
        if binding.key is None:
            continue  # комментарий или пустая строка
        key = binding.key.strip()
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", line=line, key=key)
        if binding.value is None:
            raise ConfigError(f"missing value for {key!r}", line=line, key=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first at line {values[key][1]})", line=line, key=key)
        try:
            values[key] = (schema[key](binding.value), line)
        except ValueError as e:
            raise ConfigError(f"invalid value for {key!r}: {e}", line=line, key=key) from e
    return values


def _read(path: str | Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _first_line(values: dict[str, tuple[object, int]], keys) -> int:
    lines = [values[k][1] for k in keys if k in values]
    return min(lines) if lines else 0


def train_config_from_text(
    text: str,
    *,
    seed: int | None = None,
    default_seed: int = 0,
    default_workers: int = 1,
) -> TrainConfig:
    """``seed`` (флаг --seed) перекрывает файл; default_* - значения окружения для отсутствующих ключей."""
    values = parse_bindings(text, TRAIN_KEYS)
    plain = {k: v for k, (v, _) in values.items()}

    model_kw = {k: plain.pop(k) for k in list(plain) if k in _MODEL_FIELDS}
    if "model" in plain:
        model_kw["kind"] = plain.pop("model")
    try:
        model = ModelSpec(**model_kw)
    except ValueError as e:
        raise ConfigError(f"invalid model: {e}", line=_first_line(values, ["model", *_MODEL_FIELDS])) from e

    defaults = TrainConfig().schedule
    warmup = plain.pop("warmup", defaults.warmup_values)
    final = plain.pop("final_sparsity", defaults.final_sparsity)
    try:
        schedule = SparsitySchedule(warmup, final)
    except ValueError as e:
        raise ConfigError(f"invalid schedule: {e}", line=_first_line(values, ["warmup", "final_sparsity"])) from e

    if seed is not None:
        plain["seed"] = seed
    plain.setdefault("seed", default_seed)
    plain.setdefault("workers", default_workers)
    try:
        return TrainConfig(model=model, schedule=schedule, **plain)
    except ValueError as e:
        raise ConfigError(f"invalid config: {e}", line=_first_line(values, plain)) from e


def load_train_config(path: str | Path, **kwargs) -> TrainConfig:
    config = train_config_from_text(_read(path), **kwargs)
    logger.info("⚙️ config %s: %s, %d nodes, seed %d", path, config.algorithm.value, config.nodes, config.seed)
    return config


def perf_params_from_text(text: str) -> PerfParams:
    values = parse_bindings(text, PERF_KEYS)
    plain = {k: v for k, (v, _) in values.items()}
    base = PRESETS[plain.pop("preset")] if "preset" in plain else PerfParams()
    try:
        return base.with_(**plain)
    except ValueError as e:
        raise ConfigError(f"invalid perf params: {e}", line=_first_line(values, plain)) from e


def load_perf_params(path: str | Path) -> PerfParams:
    return perf_params_from_text(_read(path))


def dump_mapping(mapping: Mapping[str, str]) -> str:
    """Обратная операция к разбору: одна строка ``key = value`` на ключ."""
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())
