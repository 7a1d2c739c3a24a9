# database.py - реестр запусков (SQLite внутри out_dir)
from __future__ import annotations

import datetime
import json
import logging
from dataclasses import dataclass
from enum import Enum as PyEnum
from pathlib import Path

from sqlalchemy import Column, DateTime, Float, Integer, String, create_engine, text
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

import config

logger = logging.getLogger(__name__)


class RunStatus(PyEnum):
    COMPLETED = "completed"
    DIVERGED = "diverged"
    FAILED = "failed"


Base = declarative_base()


class RunRecord(Base):
    __tablename__ = 'runs'
    id = Column(Integer, primary_key=True)
    created_at = Column(DateTime, default=datetime.datetime.utcnow)
    command = Column(String, nullable=False)          # train / bench-codec / perf / sweep
    variant = Column(String, nullable=True)
    seed = Column(Integer, nullable=True)
    config_json = Column(String, nullable=True)
    trace_path = Column(String, nullable=True)
    manifest_path = Column(String, nullable=True)
    status = Column(String, default=RunStatus.COMPLETED.value)

    # ====== Сводные метрики (пересчитываются из trace.csv) ======
    final_loss = Column(Float, nullable=True)
    final_eval = Column(Float, nullable=True)
    mean_ratio = Column(Float, nullable=True)
    total_bytes = Column(Float, nullable=True)


def _get_existing_columns(conn, table_name: str) -> set[str]:
    rows = conn.execute(text(f"PRAGMA table_info({table_name});")).fetchall()
    # row format: (cid, name, type, notnull, dflt_value, pk)
    return {r[1] for r in rows}


def _ensure_column(conn, table: str, column: str, ddl_type: str):
    existing = _get_existing_columns(conn, table)
    if column in existing:
        return
    conn.execute(text(f"ALTER TABLE {table} ADD COLUMN {column} {ddl_type};"))


def ensure_schema(engine: Engine):
    """
    Мягкая миграция: добавляет недостающие колонки (SQLite).
    Реестры, созданные до появления метрик, дополняются без пересоздания.
    """
    with engine.begin() as conn:
        _ensure_column(conn, "runs", "status", "TEXT")
        _ensure_column(conn, "runs", "final_loss", "REAL")
        _ensure_column(conn, "runs", "final_eval", "REAL")
        _ensure_column(conn, "runs", "mean_ratio", "REAL")
        _ensure_column(conn, "runs", "total_bytes", "REAL")


@dataclass(frozen=True)
class Registry:
    engine: Engine
    Session: sessionmaker
    path: Path


def open_registry(out_dir: str | Path) -> Registry:
    """Реестр лежит в out_dir: CLI ничего не пишет за его пределами."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / config.REGISTRY_FILE
    engine = create_engine(f"sqlite:///{path}")
    Base.metadata.create_all(engine)
    ensure_schema(engine)
    logger.debug("registry %s ready", path)
    return Registry(engine=engine, Session=sessionmaker(bind=engine), path=path)


def record_run(
    registry: Registry,
    *,
    command: str,
    variant: str | None = None,
    seed: int | None = None,
    config_mapping: dict | None = None,
    trace_path: str | None = None,
    manifest_path: str | None = None,
    final_loss: float | None = None,
    final_eval: float | None = None,
    mean_ratio: float | None = None,
    total_bytes: float | None = None,
    status: RunStatus = RunStatus.COMPLETED,
) -> int | None:
    """Запись о запуске. Ошибка реестра не валит запуск: только warning."""
    try:
        with registry.Session() as session:
            rec = RunRecord(
                command=command,
                variant=variant,
                seed=seed,
                config_json=json.dumps(config_mapping, sort_keys=True) if config_mapping is not None else None,
                trace_path=trace_path,
                manifest_path=manifest_path,
                final_loss=finite_or_none(final_loss),
                final_eval=finite_or_none(final_eval),
                mean_ratio=finite_or_none(mean_ratio),
                total_bytes=finite_or_none(total_bytes),
                status=status.value,
                created_at=datetime.datetime.utcnow(),
            )
            session.add(rec)
            session.commit()
            logger.info("🗂 registry: run #%d (%s %s) recorded", rec.id, command, variant or "")
            return rec.id
    except Exception as e:
        logger.warning(f"⚠️ Ошибка записи в реестр: {e}")
        return None


def list_runs(registry: Registry, *, command: str | None = None, variant: str | None = None) -> list[RunRecord]:
    with registry.Session() as session:
        q = session.query(RunRecord)
        if command:
            q = q.filter(RunRecord.command == command)
        if variant:
            q = q.filter(RunRecord.variant == variant)
        runs = q.order_by(RunRecord.id).all()
        session.expunge_all()
        return runs


def finite_or_none(x: float | None) -> float | None:
    # SQLite не хранит inf/nan в REAL предсказуемо
    if x is None or x != x or x in (float("inf"), float("-inf")):
        return None
    return float(x)
