"""Prefill-then-decode loop: ledger construction, per-step attention,
buffer management, and periodic online cluster updates.

Attention for step t is computed before the step's key/value are
appended, so a token never attends to itself in this replay formulation.
The buffer grows by one token per step and is flushed (oldest L tokens
absorbed into the final block) whenever it reaches 2L.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import clustering
from .attention import DecodeReport, decode_step_attention, exact_attention
from .clustering import BlockLedger
from .core import EngineConfig, KvTrace
from .rope import RopeParams

MODES = ("multipole", "oracle", "flat-no-replacement", "positional-baseline")


class _KvStore:
    """Per-head growable key/value arrays with doubling capacity."""

    def __init__(self, keys: np.ndarray, values: np.ndarray):
        n, d = keys.shape
        cap = max(16, 2 * n)
        self._keys = np.zeros((cap, d), dtype=np.float32)
        self._values = np.zeros((cap, d), dtype=np.float32)
        self._keys[:n] = keys
        self._values[:n] = values
        self.n = n

    def append(self, key: np.ndarray, value: np.ndarray):
        if self.n == self._keys.shape[0]:
            self._keys = np.concatenate([self._keys, np.zeros_like(self._keys)])
            self._values = np.concatenate([self._values, np.zeros_like(self._values)])
        self._keys[self.n] = key
        self._values[self.n] = value
        self.n += 1

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: self.n]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self.n]


@dataclass
class EngineState:
    trace: KvTrace
    cfg: EngineConfig
    mode: str
    ledgers: list[BlockLedger]
    stores: list[_KvStore]
    cursor: int = 0  # decode step index

    @property
    def cache_len(self) -> int:
        return self.trace.prompt_len + self.cursor


def prefill(trace: KvTrace, cfg: EngineConfig, mode: str = "multipole") -> EngineState:
    """Build per-head ledgers over the prompt; deterministic under
    (trace, cfg, seed)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    stores = [
        _KvStore(trace.keys[h, : trace.prompt_len], trace.values[h, : trace.prompt_len])
        for h in range(trace.layout.num_kv_heads)
    ]
    if mode == "oracle":
        ledgers = []
    elif mode == "positional-baseline":
        ledgers = [
            clustering.build_positional_index_head(
                s.keys, s.values, trace.prompt_len, cfg
            )
            for s in stores
        ]
    else:
        ledgers = [
            clustering.build_prefill_index_head(
                s.keys, s.values, trace.prompt_len, cfg, h
            )
            for h, s in enumerate(stores)
        ]
    return EngineState(trace=trace, cfg=cfg, mode=mode, ledgers=ledgers, stores=stores)


def _oracle_step(state: EngineState, queries: np.ndarray) -> tuple[np.ndarray, DecodeReport]:
    trace, cfg = state.trace, state.cfg
    lay = trace.layout
    d = lay.head_dim
    params = RopeParams(head_dim=d, theta=cfg.rope_theta, window_offset=cfg.window_offset)
    n = state.cache_len
    outputs = np.empty((lay.num_q_heads, d))
    pos = np.arange(n, dtype=np.int64)
    for h in range(lay.num_kv_heads):
        store = state.stores[h]
        for g in lay.q_heads_of(h):
            outputs[g] = exact_attention(
                queries[g], n, store.keys[:n], store.values[:n], pos, params
            )
    report = DecodeReport(
        step=state.cursor,
        errors=[0.0] * lay.num_q_heads,
        per_head=[],
        cache_len=n,
        sink_count=0,
        buffer_len=0,
        num_kv_heads=lay.num_kv_heads,
        mode="oracle",
    )
    return outputs, report


def step(
    state: EngineState,
    queries: np.ndarray,
    new_keys: np.ndarray,
    new_values: np.ndarray,
    oracle: bool = False,
    audit: bool = False,
    timers: dict | None = None,
) -> tuple[np.ndarray, DecodeReport]:
    """One decode step: attend, then append the new token and run the
    buffered cluster update if the buffer reached 2L.  Mutates state."""
    cfg = state.cfg
    lay = state.trace.layout
    if state.mode == "oracle":
        outputs, report = _oracle_step(state, queries)
    else:
        keys = [s.keys for s in state.stores]
        values = [s.values for s in state.stores]
        outputs, report = decode_step_attention(
            queries,
            state.ledgers,
            keys,
            values,
            state.cache_len,
            state.cursor,
            cfg,
            lay,
            mode=state.mode,
            oracle=oracle,
            timers=timers,
        )

    for h in range(lay.num_kv_heads):
        state.stores[h].append(new_keys[h], new_values[h])
        if state.ledgers:
            state.ledgers[h].total += 1

    if state.ledgers and state.ledgers[0].buffer_len >= 2 * cfg.local_buffer:
        t0 = time.perf_counter()
        for h in range(lay.num_kv_heads):
            store = state.stores[h]
            if state.mode == "positional-baseline":
                clustering.append_tokens_positional(
                    state.ledgers[h], store.keys, store.values, cfg
                )
            else:
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, state.cursor, h, 7])
                )
                clustering.append_tokens(
                    state.ledgers[h], store.keys, store.values, cfg, rng, head=h
                )
            if audit:
                clustering.audit_ledger(
                    state.ledgers[h],
                    store.keys,
                    cfg,
                    values=store.values,
                    check_assignment=state.mode != "positional-baseline",
                )
        dt = time.perf_counter() - t0
        report.update_occurred = True
        report.update_wall_time = dt
        if timers is not None:
            timers["update"] = timers.get("update", 0.0) + dt

    state.cursor += 1
    return outputs, report


def run(
    trace: KvTrace,
    cfg: EngineConfig,
    mode: str = "multipole",
    oracle: bool = False,
    audit: bool = False,
    max_steps: int | None = None,
    collect_outputs: bool = False,
) -> list[DecodeReport]:
    """Replay the trace's decode steps under the chosen attention mode."""
    if trace.decode_steps < 1:
        raise ValueError("trace has no decode steps")
    state = prefill(trace, cfg, mode=mode)
    n_steps = trace.decode_steps if max_steps is None else min(max_steps, trace.decode_steps)
    reports = []
    for t in range(n_steps):
        pos = trace.prompt_len + t
        queries = trace.queries[:, t, :]
        new_keys = trace.keys[:, pos, :]
        new_values = trace.values[:, pos, :]
        outputs, report = step(
            state, queries, new_keys, new_values, oracle=oracle, audit=audit
        )
        if collect_outputs:
            report.outputs = outputs
        reports.append(report)
    return reports
