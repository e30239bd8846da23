"""Decode-step attention: exact oracle, centroid lookup scoring, budgeted
selection, sparse exact attention, centroid replacement, hierarchical
lookup, grouped-query aggregation, and order-independent partial merging.

Two views are in play and never mixed inside one logit: exact paths
rotate queries and keys at their true positions; lookup and replacement
use the windowed key view with the query rotated at a fixed offset.
All accumulation is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import BlockLedger, Cluster
from .core import ConfigError, EngineConfig, HeadLayout
from .rope import RopeParams, lookup_query_view, rotate


@dataclass
class AttentionPartial:
    """Un-normalized streaming softmax state for one segment of keys.

    m is the running max of scaled logits, s the sum of exp(logit - m)
    contributions (cluster contributions carry their size as weight), and
    a the matching weighted value sum.  Merging is associative and
    commutative up to rounding.
    """

    m: float
    s: float
    a: np.ndarray

    @classmethod
    def neutral(cls, head_dim: int) -> "AttentionPartial":
        return cls(m=-np.inf, s=0.0, a=np.zeros(head_dim))

    @property
    def is_empty(self) -> bool:
        return self.s == 0.0

    def finalize(self) -> np.ndarray:
        if self.s <= 0.0:
            raise ValueError("cannot finalize an empty partial")
        return self.a / self.s


@dataclass(frozen=True)
class ClusterScore:
    ref: tuple[int, int, int]  # (block id, cluster id, level)
    score: float  # normalized importance estimate, in [0, 1]
    size: int
    logit: float  # q_lookup . Kc / sqrt(d), reused by replacement


def _partial_from_logits(logits, values, weights=None) -> AttentionPartial:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        return AttentionPartial.neutral(np.asarray(values).shape[-1])
    m = float(np.max(logits))
    w = np.exp(logits - m)
    if weights is not None:
        w = w * np.asarray(weights, dtype=np.float64)
    return AttentionPartial(
        m=m, s=float(np.sum(w)), a=w @ np.asarray(values, dtype=np.float64)
    )


def exact_partial(
    q: np.ndarray,
    q_position: int,
    keys: np.ndarray,
    values: np.ndarray,
    positions: np.ndarray,
    params: RopeParams,
) -> AttentionPartial:
    """Streaming-softmax partial over the given keys with true-position
    rotation and 1/sqrt(d) scaling."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] == 0:
        return AttentionPartial.neutral(params.head_dim)
    qr = rotate(q, q_position, params)
    kr = rotate(keys, np.asarray(positions), params)
    logits = kr @ qr / np.sqrt(params.head_dim)
    return _partial_from_logits(logits, values)


def exact_attention(
    q: np.ndarray,
    q_position: int,
    keys: np.ndarray,
    values: np.ndarray,
    positions: np.ndarray,
    params: RopeParams,
) -> np.ndarray:
    """Dense attention oracle over all passed keys (causal by construction:
    the caller passes only cached keys)."""
    if np.asarray(keys).shape[0] == 0:
        raise ValueError("exact attention over an empty key set")
    return exact_partial(q, q_position, keys, values, positions, params).finalize()


def exact_weights(
    q: np.ndarray,
    q_position: int,
    keys: np.ndarray,
    positions: np.ndarray,
    params: RopeParams,
) -> np.ndarray:
    """Softmax attention weights of the exact oracle (for recall metrics)."""
    qr = rotate(q, q_position, params)
    kr = rotate(np.asarray(keys, dtype=np.float64), np.asarray(positions), params)
    logits = kr @ qr / np.sqrt(params.head_dim)
    w = np.exp(logits - np.max(logits))
    return w / np.sum(w)


def sparse_exact_partial(
    q: np.ndarray,
    q_position: int,
    indices: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    params: RopeParams,
) -> AttentionPartial:
    """Exact attention restricted to the selected token indices."""
    indices = np.asarray(indices, dtype=np.int64)
    return exact_partial(
        q,
        q_position,
        np.asarray(keys)[indices],
        np.asarray(values)[indices],
        indices,
        params,
    )


# ---------------------------------------------------------------------------
# Centroid lookup and replacement


def centroid_scores(
    q_lookup: np.ndarray, clusters: list[Cluster], refs=None, head_dim: int | None = None
) -> list[ClusterScore]:
    """Importance estimate per cluster: exp(q.Kc/sqrt(d)) normalized by the
    size-weighted sum over every cluster passed in."""
    if not clusters:
        raise ValueError("clusters must be nonempty")
    d = head_dim if head_dim is not None else len(q_lookup)
    kc = np.stack([c.key_centroid for c in clusters])
    sizes = np.array([c.size for c in clusters], dtype=np.float64)
    logits = kc @ np.asarray(q_lookup, dtype=np.float64) / np.sqrt(d)
    m = np.max(logits)
    e = np.exp(logits - m)
    denom = float(np.sum(sizes * e))
    scores = e / denom
    if refs is None:
        refs = [(0, i, 2) for i in range(len(clusters))]
    return [
        ClusterScore(ref=refs[i], score=float(scores[i]), size=int(sizes[i]), logit=float(logits[i]))
        for i in range(len(clusters))
    ]


def aggregate_gqa(
    per_head_scores: list[list[ClusterScore]], layout: HeadLayout | None = None
) -> list[ClusterScore]:
    """Average importance over the query heads that share a kv-head.
    Logits are head-specific, so the aggregate carries NaN there."""
    first = per_head_scores[0]
    if len(per_head_scores) == 1:
        return first
    for other in per_head_scores[1:]:
        if len(other) != len(first) or any(
            a.ref != b.ref for a, b in zip(first, other)
        ):
            raise RuntimeError("query heads scored different cluster sets")
    g = len(per_head_scores)
    return [
        ClusterScore(
            ref=first[i].ref,
            score=sum(hs[i].score for hs in per_head_scores) / g,
            size=first[i].size,
            logit=float("nan"),
        )
        for i in range(len(first))
    ]


def select_clusters(scores: list[ClusterScore], budget: int):
    """Greedy selection by descending score (ties: ascending ref) while the
    cumulative token count is below the budget; the cluster crossing the
    budget is included."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    order = sorted(scores, key=lambda s: (-s.score, s.ref))
    selected, rejected = [], []
    cum = 0
    for s in order:
        if cum < budget:
            selected.append(s.ref)
            cum += s.size
        else:
            rejected.append(s.ref)
    return selected, rejected


def centroid_replacement_partial(
    q_lookup: np.ndarray,
    clusters: list[Cluster],
    logits: np.ndarray | None = None,
    head_dim: int | None = None,
) -> AttentionPartial:
    """Approximate contribution of rejected clusters: each contributes
    weight N * exp(q.Kc/sqrt(d)) on its value centroid.  Pass ``logits``
    to reuse the dot products already computed during lookup."""
    d = head_dim if head_dim is not None else len(q_lookup)
    if not clusters:
        return AttentionPartial.neutral(d)
    if logits is None:
        kc = np.stack([c.key_centroid for c in clusters])
        logits = kc @ np.asarray(q_lookup, dtype=np.float64) / np.sqrt(d)
    sizes = np.array([c.size for c in clusters], dtype=np.float64)
    vc = np.stack([c.value_centroid for c in clusters])
    return _partial_from_logits(logits, vc, weights=sizes)


def merge_partials(parts: list[AttentionPartial]) -> AttentionPartial:
    """Max-rescaled merge; associative and commutative, neutral partials
    are identity elements."""
    live = [p for p in parts if not p.is_empty]
    if not live:
        raise ValueError("all partials are empty")
    m = max(p.m for p in live)
    s = sum(p.s * np.exp(p.m - m) for p in live)
    a = sum(p.a * np.exp(p.m - m) for p in live)
    return AttentionPartial(m=m, s=float(s), a=a)


# ---------------------------------------------------------------------------
# Ledger-level lookup


def _flat_clusters(ledger: BlockLedger):
    """All fine clusters across blocks with (block, cluster, level=2) refs."""
    clusters, refs = [], []
    for b, block in enumerate(ledger.blocks()):
        for c_id, c in enumerate(block.clusters):
            clusters.append(c)
            refs.append((b, c_id, 2))
    return clusters, refs


def _coarse_clusters(ledger: BlockLedger):
    clusters, refs = [], []
    for b, block in enumerate(ledger.blocks()):
        if block.level1 is None:
            continue
        for c_id, c in enumerate(block.level1):
            clusters.append(c)
            refs.append((b, c_id, 1))
    return clusters, refs


def _scores_per_group(q_lookups: np.ndarray, clusters, refs, head_dim: int):
    """Score clusters with every query head of a group, returning the
    aggregated scores plus per-head logit arrays for replacement reuse.

    Vectorized equivalent of running centroid_scores per head and
    aggregate_gqa over the results (centroid_scores stays as the
    single-head reference implementation)."""
    kc = np.stack([c.key_centroid for c in clusters])
    sizes = np.array([c.size for c in clusters], dtype=np.float64)
    logits = np.asarray(q_lookups, dtype=np.float64) @ kc.T / np.sqrt(head_dim)
    e = np.exp(logits - np.max(logits, axis=1, keepdims=True))
    scores = e / (e @ sizes)[:, None]
    mean_scores = np.mean(scores, axis=0)
    single = q_lookups.shape[0] == 1
    agg = [
        ClusterScore(
            ref=refs[i],
            score=float(mean_scores[i]),
            size=int(sizes[i]),
            logit=float(logits[0, i]) if single else float("nan"),
        )
        for i in range(len(clusters))
    ]
    return agg, logits


def hierarchical_lookup(
    q_lookups: np.ndarray, ledger: BlockLedger, cfg: EngineConfig, head_dim: int
):
    """Two-stage lookup: promote the top coarse clusters covering the
    configured token fraction, then select fine clusters (inside promoted
    coarse clusters only) to the token budget.  The fine-stage denominator
    spans promoted fine clusters plus the rejected coarse clusters, so
    every token is represented exactly once.

    Returns (selected_token_indices, selected_fine_refs, fine_rejected,
    coarse_rejected, lookup_stats); the rejected lists pair each cluster
    with its per-head logits for replacement reuse.
    """
    if cfg.hierarchy is None:
        raise ConfigError("hierarchical lookup requires hierarchy enabled")
    q_lookups = np.atleast_2d(q_lookups)
    coarse, coarse_refs = _coarse_clusters(ledger)
    if not coarse:
        raise ConfigError("ledger has no coarse clusters")
    total = sum(c.size for c in coarse)
    agg1, logits1 = _scores_per_group(q_lookups, coarse, coarse_refs, head_dim)
    promote_budget = int(np.ceil(cfg.hierarchy.promote_fraction * total))
    promoted_refs, rejected1_refs = select_clusters(agg1, promote_budget)
    ref_to_pos = {r: i for i, r in enumerate(coarse_refs)}
    coarse_rejected = [
        (r, coarse[ref_to_pos[r]], logits1[:, ref_to_pos[r]]) for r in rejected1_refs
    ]

    # fine clusters under promoted coarse clusters
    blocks = ledger.blocks()
    fine, fine_refs = [], []
    for r in promoted_refs:
        b = r[0]
        coarse_cluster = blocks[b].level1[r[1]]
        for child in coarse_cluster.children:
            fine.append(blocks[b].clusters[child])
            fine_refs.append((b, child, 2))

    # score promoted fine clusters with the mixed denominator
    union = fine + [c for (_, c, _) in coarse_rejected]
    union_refs = fine_refs + [r for (r, _, _) in coarse_rejected]
    agg2, logits2 = _scores_per_group(q_lookups, union, union_refs, head_dim)
    fine_scores = agg2[: len(fine)]
    selected_refs, rejected2_refs = select_clusters(fine_scores, cfg.token_budget)
    fref_to_pos = {r: i for i, r in enumerate(fine_refs)}
    fine_rejected = [
        (r, fine[fref_to_pos[r]], logits2[:, fref_to_pos[r]]) for r in rejected2_refs
    ]
    if selected_refs:
        sel_idx = np.sort(
            np.concatenate([fine[fref_to_pos[r]].member_indices for r in selected_refs])
        )
    else:
        sel_idx = np.zeros(0, dtype=np.int64)
    stats = {
        "scored_centroids": len(coarse) + len(fine),
        "rejected_centroids": len(coarse_rejected) + len(fine_rejected),
    }
    return sel_idx, selected_refs, fine_rejected, coarse_rejected, stats


def flat_lookup(
    q_lookups: np.ndarray, ledger: BlockLedger, cfg: EngineConfig, head_dim: int
):
    """Single-level lookup over all fine clusters of the head."""
    q_lookups = np.atleast_2d(q_lookups)
    clusters, refs = _flat_clusters(ledger)
    if not clusters:
        raise ConfigError("ledger has no clusters")
    agg, logits = _scores_per_group(q_lookups, clusters, refs, head_dim)
    selected_refs, rejected_refs = select_clusters(agg, cfg.token_budget)
    ref_to_pos = {r: i for i, r in enumerate(refs)}
    rejected = [
        (r, clusters[ref_to_pos[r]], logits[:, ref_to_pos[r]]) for r in rejected_refs
    ]
    if selected_refs:
        sel_idx = np.sort(
            np.concatenate([clusters[ref_to_pos[r]].member_indices for r in selected_refs])
        )
    else:
        sel_idx = np.zeros(0, dtype=np.int64)
    stats = {"scored_centroids": len(clusters), "rejected_centroids": len(rejected)}
    return sel_idx, selected_refs, rejected, [], stats


# ---------------------------------------------------------------------------
# Per-step orchestration


@dataclass
class StepHeadResult:
    selected_refs: list
    selected_tokens: int
    scored_centroids: int
    rejected_centroids: int


@dataclass
class DecodeReport:
    step: int
    errors: list[float] | None  # per q-head relative error vs oracle
    per_head: list[StepHeadResult]
    cache_len: int
    sink_count: int
    buffer_len: int
    num_kv_heads: int
    update_occurred: bool = False
    update_wall_time: float = 0.0
    selected_indices: list | None = None  # per kv-head arrays (kept in-process)
    oracle_topk: list | None = None
    mode: str = "multipole"
    outputs: np.ndarray | None = None

    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if self.errors else float("nan")


def decode_step_attention(
    queries: np.ndarray,
    ledgers: list[BlockLedger],
    keys: np.ndarray,
    values: np.ndarray,
    cache_len: int,
    step: int,
    cfg: EngineConfig,
    layout: HeadLayout,
    mode: str = "multipole",
    oracle: bool = False,
    timers: dict | None = None,
) -> tuple[np.ndarray, DecodeReport]:
    """One decode step over all heads.

    ``queries`` is (num_q_heads, d); the query attends to tokens
    [0, cache_len).  Sinks and the unclustered buffer are always attended
    exactly; clustered tokens go through lookup/selection, exact sparse
    attention for selected clusters, and centroid replacement for the
    rest (unless mode drops replacement).
    """
    import time as _time

    d = layout.head_dim
    params = RopeParams(head_dim=d, theta=cfg.rope_theta, window_offset=cfg.window_offset)
    q_position = cache_len  # the new token's position
    outputs = np.empty((layout.num_q_heads, d))
    per_head_results = []
    errors = [] if oracle else None
    selected_indices = []
    oracle_topk = [] if oracle else None
    replacement = mode != "flat-no-replacement"

    def tick():
        return _time.perf_counter()

    def charge(stage, t0):
        if timers is not None:
            timers[stage] = timers.get(stage, 0.0) + (_time.perf_counter() - t0)

    for h, ledger in enumerate(ledgers):
        kv_keys = keys[h]
        kv_values = values[h]
        group = list(layout.q_heads_of(h))

        t0 = tick()
        q_lookups = np.stack(
            [lookup_query_view(queries[g], params) for g in group]
        )
        if cfg.hierarchy is not None:
            sel_idx, sel_refs, fine_rej, coarse_rej, stats = hierarchical_lookup(
                q_lookups, ledger, cfg, d
            )
        else:
            sel_idx, sel_refs, fine_rej, coarse_rej, stats = flat_lookup(
                q_lookups, ledger, cfg, d
            )
        charge("lookup", t0)

        sink_idx = np.arange(0, min(ledger.sink_end, cache_len), dtype=np.int64)
        buf_idx = np.arange(ledger.buffer_start, cache_len, dtype=np.int64)
        selected_indices.append(sel_idx)

        for gi, g in enumerate(group):
            q = queries[g]
            t0 = tick()
            parts = [
                exact_partial(
                    q, q_position, kv_keys[sink_idx], kv_values[sink_idx], sink_idx, params
                ),
                exact_partial(
                    q, q_position, kv_keys[buf_idx], kv_values[buf_idx], buf_idx, params
                ),
                sparse_exact_partial(q, q_position, sel_idx, kv_keys, kv_values, params),
            ]
            charge("exact", t0)
            t0 = tick()
            if replacement:
                for rej in (fine_rej, coarse_rej):
                    if rej:
                        clusters = [c for (_, c, _) in rej]
                        logits = np.array([lg[gi] for (_, _, lg) in rej])
                        parts.append(
                            centroid_replacement_partial(
                                q_lookups[gi], clusters, logits=logits, head_dim=d
                            )
                        )
            out = merge_partials(parts).finalize()
            charge("replace", t0)
            outputs[g] = out
            if oracle:
                all_idx = np.arange(cache_len, dtype=np.int64)
                ref = exact_attention(
                    q, q_position, kv_keys[:cache_len], kv_values[:cache_len], all_idx, params
                )
                err = np.linalg.norm(out - ref) / max(np.linalg.norm(ref), 1e-300)
                errors.append(float(err))

        if oracle:
            # true top tokens (by group-mean exact weight) among clustered tokens
            cl_mask = np.ones(cache_len, dtype=bool)
            cl_mask[sink_idx] = False
            cl_mask[buf_idx] = False
            cl_idx = np.flatnonzero(cl_mask)
            if cl_idx.size:
                w = np.zeros(cl_idx.size)
                for g in group:
                    full = exact_weights(
                        queries[g],
                        q_position,
                        kv_keys[:cache_len],
                        np.arange(cache_len),
                        params,
                    )
                    w += full[cl_idx]
                k = max(1, min(int(sel_idx.size) if sel_idx.size else cfg.token_budget, cl_idx.size))
                top = cl_idx[np.argsort(-w, kind="stable")[:k]]
                oracle_topk.append(np.sort(top))
            else:
                oracle_topk.append(np.zeros(0, dtype=np.int64))

        per_head_results.append(
            StepHeadResult(
                selected_refs=sel_refs,
                selected_tokens=int(sel_idx.size),
                scored_centroids=stats["scored_centroids"],
                rejected_centroids=stats["rejected_centroids"] if replacement else 0,
            )
        )

    report = DecodeReport(
        step=step,
        errors=errors,
        per_head=per_head_results,
        cache_len=cache_len,
        sink_count=min(cfg.sink_tokens, cache_len),
        buffer_len=cache_len - ledgers[0].buffer_start,
        num_kv_heads=layout.num_kv_heads,
        selected_indices=selected_indices,
        oracle_topk=oracle_topk,
        mode=mode,
    )
    return outputs, report
