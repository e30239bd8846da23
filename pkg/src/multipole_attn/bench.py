"""Memory-operation accounting, error/recall metrics, parameter sweeps,
and wall-clock micro-benchmarks.

Memory operations are counted in head-dim vector loads per kv-head:
key centroids at every scored level, value centroids of rejected
clusters, keys and values of selected tokens, sinks, and the local
buffer.  The dense baseline is 2 x cache length loads per kv-head.
Index/metadata integers are not counted; the documented tolerance on
reported ratios absorbs that definitional gap.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .attention import DecodeReport
from .core import EngineConfig, HierarchyConfig, KvTrace
from .pipeline import prefill, run, step


@dataclass(frozen=True)
class MemOpCount:
    key_centroid_loads: int
    value_centroid_loads: int
    exact_key_loads: int
    exact_value_loads: int
    sink_loads: int
    buffer_loads: int
    baseline_loads: int

    @property
    def total_loads(self) -> int:
        return (
            self.key_centroid_loads
            + self.value_centroid_loads
            + self.exact_key_loads
            + self.exact_value_loads
            + self.sink_loads
            + self.buffer_loads
        )

    @property
    def ratio(self) -> float:
        return self.total_loads / self.baseline_loads


def count_memops(report: DecodeReport) -> MemOpCount:
    """Vector-load accounting for one step, recomputed from the report
    alone.  Oracle-mode reports count only the baseline loads."""
    if report.mode == "oracle" or not report.per_head:
        base = 2 * report.cache_len * report.num_kv_heads
        return MemOpCount(0, 0, 0, 0, 0, 0, baseline_loads=base)
    kc = sum(h.scored_centroids for h in report.per_head)
    vc = sum(h.rejected_centroids for h in report.per_head)
    sel = sum(h.selected_tokens for h in report.per_head)
    nh = report.num_kv_heads
    return MemOpCount(
        key_centroid_loads=kc,
        value_centroid_loads=vc,
        exact_key_loads=sel,
        exact_value_loads=sel,
        sink_loads=2 * report.sink_count * nh,
        buffer_loads=2 * report.buffer_len * nh,
        baseline_loads=2 * report.cache_len * nh,
    )


def mean_memop_ratio(reports: list[DecodeReport]) -> float:
    return float(np.mean([count_memops(r).ratio for r in reports]))


def recall_at_budget(report: DecodeReport) -> float:
    """Fraction of the oracle's top clustered tokens (by exact attention
    weight) that the selection retained, averaged over kv-heads."""
    if report.oracle_topk is None or report.selected_indices is None:
        raise ValueError("report lacks oracle top-k data (run with oracle on)")
    vals = []
    for sel, topk in zip(report.selected_indices, report.oracle_topk):
        if topk.size == 0:
            continue
        vals.append(np.intersect1d(sel, topk).size / topk.size)
    return float(np.mean(vals)) if vals else 1.0


def mean_error(reports: list[DecodeReport]) -> float:
    return float(np.mean([r.mean_error() for r in reports]))


def mean_recall(reports: list[DecodeReport]) -> float:
    return float(np.mean([recall_at_budget(r) for r in reports]))


# ---------------------------------------------------------------------------
# Sweeps

SWEEP_COLUMNS = [
    "axis",
    "value",
    "mean_error",
    "mean_recall",
    "mean_memop_ratio",
    "update_count",
    "update_centroid_refreshes",
]


def _apply_axis(cfg: EngineConfig, axis: str, value):
    if axis == "budget":
        return replace(cfg, token_budget=int(value))
    if axis == "r":
        return replace(cfg, tokens_per_centroid=int(value))
    if axis == "W":
        v = int(value)
        return replace(cfg, block_size=v, alpha=v // 2)
    if axis == "p":
        h = cfg.hierarchy or HierarchyConfig()
        return replace(cfg, hierarchy=replace(h, promote_fraction=float(value)))
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(
    trace: KvTrace,
    base_cfg: EngineConfig,
    axis: str,
    values: list,
    mode: str = "multipole",
    max_steps: int | None = None,
) -> list[dict]:
    """One run per value; rows carry error, recall, memory ratio, and
    deterministic update-overhead counters (wall time is deliberately
    excluded so the CSV is bit-reproducible)."""
    if not values:
        raise ValueError("values must be nonempty")
    rows = []
    for v in values:
        cfg = _apply_axis(base_cfg, axis, v)
        reports = run(trace, cfg, mode=mode, oracle=True, max_steps=max_steps)
        updates = [r for r in reports if r.update_occurred]
        refreshes = sum(
            sum(h.scored_centroids for h in r.per_head) for r in updates
        )
        rows.append(
            {
                "axis": axis,
                "value": v,
                "mean_error": mean_error(reports),
                "mean_recall": mean_recall(reports),
                "mean_memop_ratio": mean_memop_ratio(reports),
                "update_count": len(updates),
                "update_centroid_refreshes": refreshes,
            }
        )
    return rows


def sweep_csv(rows: list[dict]) -> str:
    """RFC-4180-style CSV with a fixed schema and deterministic float
    formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row["axis"],
                f"{row['value']:.10g}" if isinstance(row["value"], float) else row["value"],
                f"{row['mean_error']:.12e}",
                f"{row['mean_recall']:.12e}",
                f"{row['mean_memop_ratio']:.12e}",
                row["update_count"],
                row["update_centroid_refreshes"],
            ]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Micro-benchmarks


def microbench(
    trace: KvTrace, cfg: EngineConfig, repeats: int, warmup: int | None = None
) -> dict:
    """Per-stage wall times over ``repeats`` measured decode steps.

    Stages: lookup (scoring + selection), exact (sink/buffer/selected
    partials), replace (replacement + merge), update (cluster refresh,
    reported both raw and amortized per step).  Warmup steps are
    discarded; medians and p95s are over per-step samples.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if warmup is None:
        warmup = min(3, max(0, trace.decode_steps - repeats))
    if warmup + repeats > trace.decode_steps:
        raise ValueError(
            f"trace has {trace.decode_steps} decode steps, need {warmup + repeats}"
        )
    state = prefill(trace, cfg, mode="multipole")
    samples = {"lookup": [], "exact": [], "replace": [], "total": []}
    update_total = 0.0
    measured = 0
    for t in range(warmup + repeats):
        pos = trace.prompt_len + t
        timers: dict = {}
        t0 = time.perf_counter()
        step(
            state,
            trace.queries[:, t, :],
            trace.keys[:, pos, :],
            trace.values[:, pos, :],
            timers=timers,
        )
        total = time.perf_counter() - t0
        if t < warmup:
            continue
        measured += 1
        update_total += timers.get("update", 0.0)
        samples["total"].append(total - timers.get("update", 0.0))
        for stage in ("lookup", "exact", "replace"):
            samples[stage].append(timers.get(stage, 0.0))

    def stats(xs):
        arr = np.asarray(xs)
        return {"median": float(np.median(arr)), "p95": float(np.percentile(arr, 95))}

    out = {stage: stats(xs) for stage, xs in samples.items()}
    out["update"] = {
        "total": update_total,
        "amortized_per_step": update_total / measured,
    }
    out["steps_measured"] = measured
    return out


def microbench_table(result: dict) -> str:
    lines = [f"{'stage':<10}{'median (ms)':>14}{'p95 (ms)':>12}"]
    for stage in ("lookup", "exact", "replace", "total"):
        s = result[stage]
        lines.append(f"{stage:<10}{s['median'] * 1e3:>14.4f}{s['p95'] * 1e3:>12.4f}")
    upd = result["update"]
    lines.append(
        f"{'update':<10}{upd['amortized_per_step'] * 1e3:>14.4f}"
        f"{'':>12}  (amortized per step)"
    )
    return "\n".join(lines)


def report_to_json_line(report: DecodeReport) -> str:
    """JSON-lines serialization of one decode report."""
    mem = count_memops(report)
    doc = {
        "step": report.step,
        "mode": report.mode,
        "cache_len": report.cache_len,
        "errors": report.errors,
        "selected_tokens": [h.selected_tokens for h in report.per_head],
        "memops": {
            "key_centroid_loads": mem.key_centroid_loads,
            "value_centroid_loads": mem.value_centroid_loads,
            "exact_key_loads": mem.exact_key_loads,
            "exact_value_loads": mem.exact_value_loads,
            "sink_loads": mem.sink_loads,
            "buffer_loads": mem.buffer_loads,
            "baseline_loads": mem.baseline_loads,
            "ratio": mem.ratio,
        },
        "update_occurred": report.update_occurred,
        "update_wall_time": report.update_wall_time,
    }
    return json.dumps(doc, sort_keys=True)
