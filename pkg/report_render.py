from __future__ import annotations

import math
from typing import Sequence


def fmt_bytes(n) -> str:
    """Байты в человекочитаемом виде."""
    try:
        n = float(n)
    except (TypeError, ValueError):
        return "—"
    if not math.isfinite(n):
        return "—"
    for unit in ("B", "KB", "MB", "GB"):
        if abs(n) < 1000.0 or unit == "GB":
            return f"{n:.0f} {unit}" if unit == "B" else f"{n:.2f} {unit}"
        n /= 1000.0
    return f"{n:.2f} GB"


def fmt_ratio(ratio) -> str:
    if ratio is None:
        return "—"
    r = float(ratio)
    if math.isinf(r):
        return "∞"
    if math.isnan(r):
        return "—"
    return f"{r:.1f}×" if r >= 10 else f"{r:.3f}×"


def fmt_metric(x) -> str:
    if x is None:
        return "—"
    x = float(x)
    if math.isnan(x):
        return "—"
    return f"{x:.6g}"


def render_train_card(
    *,
    title: str = "🧪 Обучение",
    algorithm: str,
    nodes: int,
    seed: int,
    iterations: int,
    final_loss,
    final_eval,
    mean_ratio,
    total_bytes,
    staleness=None,
    trace_path: str | None = None,
    status: str | None = None,
) -> str:
    lines: list[str] = [title]
    if status:
        lines.append(status)
    lines.append(f"⚙️ {algorithm} • {nodes} узл. • seed {seed}")
    lines.append(f"🔁 {iterations} итераций")
    lines.append(f"📉 loss {fmt_metric(final_loss)} • eval {fmt_metric(final_eval)}")
    lines.append(f"📦 сжатие {fmt_ratio(mean_ratio)} • трафик {fmt_bytes(total_bytes)}")
    if staleness is not None:
        lines.append(f"⏳ медианный интервал отправки {fmt_metric(staleness)} итераций")
    if trace_path:
        lines.append(f"📄 {trace_path}")
    return "\n".join(lines)


def render_codec_card(
    *,
    size: int,
    sparsity: float,
    nonzeros: int,
    dense_bytes: int,
    encoded_bytes: int,
    ratio,
    fillers: int,
) -> str:
    lines = ["🗜 Кодек"]
    lines.append(f"🔢 {size} элементов • sparsity {sparsity:g} • {nonzeros} ненулевых")
    lines.append(f"📦 dense {fmt_bytes(dense_bytes)} → encoded {fmt_bytes(encoded_bytes)}")
    lines.append(f"📈 ratio {fmt_ratio(ratio)}")
    if fillers:
        lines.append(f"🧱 filler-токенов: {fillers}")
    lines.append("✅ round-trip проверен")
    return "\n".join(lines)


def render_perf_card(*, preset: str | None, params, rows: Sequence, crossover: float | None = None) -> str:
    lines = ["📈 Модель ускорения"]
    if preset:
        lines.append(f"🏷 preset {preset}")
    lines.append(
        f"💾 {fmt_bytes(params.model_bytes)} • density {params.density:g} • "
        f"{params.bandwidth / 1e9:g} Gbps • t_compute {params.t_compute:g} s (заявлено)"
    )
    lines.append(f"🔀 агрегация: {params.aggregation}")
    for row in rows:
        lines.append(f"  N={row.nodes:<4} dense {row.dense_speedup:7.2f}×  DGC {row.dgc_speedup:7.2f}×")
    if crossover is not None:
        lines.append(f"⚖️ плотность безубыточности: {crossover:.4g}")
    return "\n".join(lines)


def render_sweep_card(rows: Sequence[dict]) -> str:
    lines = ["🧮 Sweep"]
    for row in rows:
        lines.append(
            f"  {row['variant']:<22} s={row['sparsity']:<8g} loss {fmt_metric(row['final_loss'])} "
            f"• ratio {fmt_ratio(row['mean_ratio'])}"
        )
    return "\n".join(lines)
