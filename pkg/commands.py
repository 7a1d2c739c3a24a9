# commands.py - команды CLI: train / bench-codec / perf / sweep
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

import codec
import config
import database
import perfmodel
import report_render
import run_config
import sim
import sparsify
from core import derive_stream
from database import RunStatus
from engine import SparsitySchedule
from run_config import ConfigError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

TRACE_FILE = "trace.csv"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.txt"
SPEEDUP_FILE = "speedup.csv"
SWEEP_FILE = "sweep.csv"
SWEEP_HEADER = ("variant", "sparsity", "final_loss", "final_eval", "mean_ratio", "total_bytes")


@dataclass
class RunManifest:
    """Всё, что нужно для повтора запуска: конфиг, seed, артефакты, сводка."""

    command: str
    seed: int | None
    config: dict[str, str]
    artifacts: dict[str, str] = field(default_factory=dict)
    summary: dict[str, float] = field(default_factory=dict)
    status: str = RunStatus.COMPLETED.value

    def write(self, path: str | Path) -> None:
        data = asdict(self)
        # inf/nan в JSON не бывает: пустой или расходящийся прогон даёт null
        data["summary"] = {
            k: database.finite_or_none(v) if isinstance(v, float) else v for k, v in self.summary.items()
        }
        Path(path).write_text(
            json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8"
        )

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _open_registry(out: Path):
    try:
        return database.open_registry(out)
    except Exception as e:
        logger.warning(f"⚠️ Реестр недоступен: {e}")
        return None


def _record(registry, **kwargs) -> None:
    if registry is not None:
        database.record_run(registry, **kwargs)


def _write_summary(out: Path, text: str) -> None:
    (out / SUMMARY_FILE).write_text(text + "\n", encoding="utf-8")
    print(text)


# ====== train ======

def _run_arm(cfg: sim.TrainConfig, out: Path) -> tuple[sim.MetricsTrace, sim.TraceSummary, RunStatus]:
    """Один запуск в каталоге out: trace.csv пишется и при расхождении обучения."""
    out.mkdir(parents=True, exist_ok=True)
    status = RunStatus.COMPLETED
    try:
        trace = sim.train(cfg)
    except sim.TrainingDivergedError as e:
        trace = e.trace
        status = RunStatus.DIVERGED
    trace.write_csv(out / TRACE_FILE)
    summary = sim.summarize(trace.records, trace.model_size, trace.node_count)
    return trace, summary, status


def _summary_dict(summary: sim.TraceSummary, trace: sim.MetricsTrace) -> dict[str, float]:
    return {
        "final_loss": summary.final_loss,
        "final_eval": summary.final_eval,
        "mean_ratio": summary.mean_ratio,
        "total_bytes": summary.total_bytes,
        "iterations": summary.iterations,
        "final_full_loss": trace.final_full_loss,
        "median_send_interval": trace.median_send_interval,
    }


def cmd_train(
    config_path: str | Path,
    out_dir: str | Path,
    *,
    seed: int | None = None,
    baseline: bool = False,
) -> int:
    out = Path(out_dir)
    try:
        cfg = run_config.load_train_config(
            config_path, seed=seed, default_seed=config.DEFAULT_SEED, default_workers=config.WORKERS
        )
    except ConfigError as e:
        logger.error(f"❌ {config_path}: {e}")
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    registry = _open_registry(out)
    try:
        trace, summary, status = _run_arm(cfg, out)
        manifest = RunManifest(
            command="train",
            seed=cfg.seed,
            config=cfg.to_mapping(),
            artifacts={"trace": TRACE_FILE, "summary": SUMMARY_FILE},
            summary=_summary_dict(summary, trace),
            status=status.value,
        )
        cards = [
            report_render.render_train_card(
                algorithm=cfg.algorithm.value,
                nodes=cfg.nodes,
                seed=cfg.seed,
                iterations=summary.iterations,
                final_loss=summary.final_loss,
                final_eval=summary.final_eval,
                mean_ratio=summary.mean_ratio,
                total_bytes=summary.total_bytes,
                staleness=trace.median_send_interval,
                trace_path=TRACE_FILE,
                status="❌ обучение разошлось" if status is RunStatus.DIVERGED else None,
            )
        ]

        if baseline:
            if status is not RunStatus.COMPLETED:
                logger.warning("⚠️ основной прогон разошёлся, baseline всё равно считается для сравнения")
            base_cfg = replace(cfg, algorithm=cfg.algorithm.baseline)
            base_trace, base_summary, base_status = _run_arm(base_cfg, out / "baseline")
            base_trace_path = str(Path("baseline") / TRACE_FILE)
            manifest.artifacts["baseline_trace"] = base_trace_path
            manifest.summary["baseline_final_loss"] = base_summary.final_loss
            manifest.summary["baseline_final_eval"] = base_summary.final_eval
            cards.append(
                report_render.render_train_card(
                    title="📏 Baseline",
                    algorithm=base_cfg.algorithm.value,
                    nodes=base_cfg.nodes,
                    seed=base_cfg.seed,
                    iterations=base_summary.iterations,
                    final_loss=base_summary.final_loss,
                    final_eval=base_summary.final_eval,
                    mean_ratio=base_summary.mean_ratio,
                    total_bytes=base_summary.total_bytes,
                    trace_path=base_trace_path,
                )
            )
            _record(
                registry,
                command="train",
                variant=base_cfg.algorithm.value,
                seed=base_cfg.seed,
                config_mapping=base_cfg.to_mapping(),
                trace_path=base_trace_path,
                manifest_path=MANIFEST_FILE,
                final_loss=base_summary.final_loss,
                final_eval=base_summary.final_eval,
                mean_ratio=base_summary.mean_ratio,
                total_bytes=base_summary.total_bytes,
                status=base_status,
            )

        manifest.write(out / MANIFEST_FILE)
        _write_summary(out, "\n\n".join(cards))
        _record(
            registry,
            command="train",
            variant=cfg.algorithm.value,
            seed=cfg.seed,
            config_mapping=manifest.config,
            trace_path=TRACE_FILE,
            manifest_path=MANIFEST_FILE,
            final_loss=summary.final_loss,
            final_eval=summary.final_eval,
            mean_ratio=summary.mean_ratio,
            total_bytes=summary.total_bytes,
            status=status,
        )
    except Exception as e:
        logger.error(f"❌ train aborted: {e}")
        _record(registry, command="train", variant=cfg.algorithm.value, seed=cfg.seed, status=RunStatus.FAILED)
        return EXIT_RUNTIME
    return EXIT_OK if status is RunStatus.COMPLETED else EXIT_RUNTIME


# ====== bench-codec ======

def random_sparse_update(size: int, sparsity: float, seed: int) -> codec.SparseUpdate:
    """k = max(1, round((1 - s) * size)) случайных позиций с ненулевыми значениями."""
    gen = derive_stream(seed, 0, 0, "bench-codec").generator()
    k = sparsify.keep_budget(size, sparsity)
    idx = np.sort(gen.choice(size, size=k, replace=False))
    vals = gen.standard_normal(k).astype(np.float32)
    vals[vals == 0] = 1.0
    return codec.SparseUpdate(idx, vals, size)


def cmd_bench_codec(size: int, sparsity: float, seed: int, out_dir: str | Path | None = None) -> int:
    if size < 1:
        logger.error("❌ size must be >= 1")
        return EXIT_CONFIG
    if not 0.0 <= sparsity < 1.0:
        logger.error("❌ sparsity must be in [0, 1)")
        return EXIT_CONFIG

    try:
        update = random_sparse_update(size, sparsity, seed)
        encoded = codec.encode(update)
        if codec.decode(encoded) != update:
            logger.error("❌ codec round-trip mismatch (size=%d, sparsity=%g, seed=%d)", size, sparsity, seed)
            return EXIT_RUNTIME
        ratio, _ = codec.compression_ratio(size, encoded)
    except Exception as e:
        logger.error(f"❌ bench-codec aborted: {e}")
        return EXIT_RUNTIME

    dense_bytes = codec.VALUE_BYTES * size
    card = report_render.render_codec_card(
        size=size,
        sparsity=sparsity,
        nonzeros=update.nnz,
        dense_bytes=dense_bytes,
        encoded_bytes=encoded.nbytes,
        ratio=ratio,
        fillers=encoded.filler_count,
    )
    if out_dir is None:
        print(card)
        print(f"dense_bytes={dense_bytes} encoded_bytes={encoded.nbytes} ratio={ratio!r}")
        return EXIT_OK

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_summary(out, card)
    print(f"dense_bytes={dense_bytes} encoded_bytes={encoded.nbytes} ratio={ratio!r}")
    _record(_open_registry(out), command="bench-codec", seed=seed, mean_ratio=ratio, total_bytes=encoded.nbytes)
    return EXIT_OK


# ====== perf ======

def cmd_perf(params_path: str | Path | None, out_dir: str | Path, *, preset: str | None = None) -> int:
    try:
        if params_path is not None:
            params = run_config.load_perf_params(params_path)
        elif preset is not None:
            if preset not in perfmodel.PRESETS:
                raise ConfigError(f"unknown preset {preset!r}", key="preset")
            params = perfmodel.PRESETS[preset]
        else:
            params = perfmodel.PerfParams()
    except ConfigError as e:
        logger.error(f"❌ {params_path or 'preset'}: {e}")
        return EXIT_CONFIG

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rows = perfmodel.speedup_table(params)
        with open(out / SPEEDUP_FILE, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(perfmodel.SPEEDUP_HEADER)
            for row in rows:
                writer.writerow([row.nodes, *(repr(float(x)) for x in row.as_tuple()[1:])])
        crossover = perfmodel.crossover_density(params, rows[-1].nodes)
    except Exception as e:
        logger.error(f"❌ perf aborted: {e}")
        return EXIT_RUNTIME

    manifest = RunManifest(
        command="perf",
        seed=None,
        config={k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(params).items()},
        artifacts={"speedup": SPEEDUP_FILE, "summary": SUMMARY_FILE},
        summary={
            "t_compute_declared": params.t_compute,
            "max_dgc_speedup": max(r.dgc_speedup for r in rows),
            "max_dense_speedup": max(r.dense_speedup for r in rows),
            "crossover_density": crossover,
        },
    )
    manifest.write(out / MANIFEST_FILE)
    _write_summary(out, report_render.render_perf_card(preset=preset, params=params, rows=rows, crossover=crossover))
    _record(
        _open_registry(out),
        command="perf",
        variant=params.aggregation,
        config_mapping=manifest.config,
        trace_path=SPEEDUP_FILE,
        manifest_path=MANIFEST_FILE,
    )
    return EXIT_OK


# ====== sweep ======

def _schedule_for(base: SparsitySchedule, sparsity: float) -> SparsitySchedule:
    # warm-up обрезается значениями не выше целевой разреженности
    return SparsitySchedule(tuple(w for w in base.warmup_values if w <= sparsity), sparsity)


def parse_variants(raw: str) -> list[sim.Algorithm]:
    names = [part.strip() for part in raw.split(",") if part.strip()]
    if not names:
        raise ValueError("no variants given")
    return [sim.Algorithm(name) for name in names]


def cmd_sweep(
    config_path: str | Path,
    out_dir: str | Path,
    *,
    sparsities: Sequence[float],
    variants: Sequence[sim.Algorithm],
    seed: int | None = None,
) -> int:
    try:
        base = run_config.load_train_config(
            config_path, seed=seed, default_seed=config.DEFAULT_SEED, default_workers=config.WORKERS
        )
        for s in sparsities:
            if not 0.0 <= s < 1.0:
                raise ConfigError(f"sparsity {s!r} not in [0, 1)", key="sparsities")
    except ConfigError as e:
        logger.error(f"❌ {config_path}: {e}")
        return EXIT_CONFIG

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry = _open_registry(out)
    rows: list[dict] = []
    failed = False
    try:
        for algorithm in variants:
            # плотные варианты не зависят от разреженности: один прогон
            arm_sparsities = [0.0] if algorithm.dense else list(sparsities)
            for s in arm_sparsities:
                cfg = replace(base, algorithm=algorithm, schedule=_schedule_for(base.schedule, s))
                arm_dir = Path("sweep") / f"{algorithm.value}_s{s:g}"
                logger.info("sweep arm %s, sparsity %g", algorithm.value, s)
                trace, summary, status = _run_arm(cfg, out / arm_dir)
                failed |= status is not RunStatus.COMPLETED
                rows.append({
                    "variant": algorithm.value,
                    "sparsity": s,
                    "final_loss": summary.final_loss,
                    "final_eval": summary.final_eval,
                    "mean_ratio": summary.mean_ratio,
                    "total_bytes": summary.total_bytes,
                })
                _record(
                    registry,
                    command="sweep",
                    variant=algorithm.value,
                    seed=cfg.seed,
                    config_mapping=cfg.to_mapping(),
                    trace_path=str(arm_dir / TRACE_FILE),
                    final_loss=summary.final_loss,
                    final_eval=summary.final_eval,
                    mean_ratio=summary.mean_ratio,
                    total_bytes=summary.total_bytes,
                    status=status,
                )
        with open(out / SWEEP_FILE, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_HEADER)
            for row in rows:
                writer.writerow([row["variant"], repr(row["sparsity"]), *(repr(float(row[k])) for k in SWEEP_HEADER[2:])])
    except Exception as e:
        logger.error(f"❌ sweep aborted: {e}")
        return EXIT_RUNTIME

    RunManifest(
        command="sweep",
        seed=base.seed,
        config=base.to_mapping(),
        artifacts={"sweep": SWEEP_FILE, "summary": SUMMARY_FILE},
        summary={"arms": len(rows)},
    ).write(out / MANIFEST_FILE)
    _write_summary(out, report_render.render_sweep_card(rows))
    return EXIT_RUNTIME if failed else EXIT_OK
