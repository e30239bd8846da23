"""Key clustering: flat k-means, blockwise ledgers with a sliding final
block, fast online updates for generated tokens, and the two-level
hierarchy.

All clustering operates on the windowed key view (position-free vectors).
Member indices are global token indices into the per-head key store.

Convergence note: Lloyd's algorithm here runs a minimum number of
assign/update rounds and then continues until an assignment pass changes
nothing.  At the fixed point both audit invariants hold exactly: every
stored centroid is the mean of its members, and every member is nearest
to its own centroid (ties broken toward the lowest cluster id, which also
rules out assignment cycles).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, EngineConfig, KvTrace
from .rope import windowed_key_view

# Safety cap on extra Lloyd rounds past the requested minimum.  Warm
# starts converge in a handful of rounds; the cap only matters for
# pathological inputs, where we settle for the last consistent state.
MAX_EXTRA_ITERS = 100


class LedgerAuditError(AssertionError):
    pass


@dataclass
class Cluster:
    key_centroid: np.ndarray  # float64, mean of members' windowed keys
    value_centroid: np.ndarray | None  # float64, mean of members' values
    size: int
    member_indices: np.ndarray  # sorted int64 global token indices
    children: list[int] | None = None  # fine-cluster ids under a coarse cluster


@dataclass
class Block:
    start: int
    end: int
    clusters: list[Cluster]
    level1: list[Cluster] | None = None

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class BlockLedger:
    """Per-head bookkeeping: sinks, sealed blocks, mutable final block,
    and the trailing unclustered buffer."""

    sink_end: int
    sealed: list[Block]
    final: Block
    buffer_start: int
    total: int  # buffer end; number of tokens covered
    split_count: int = 0

    @property
    def buffer_len(self) -> int:
        return self.total - self.buffer_start

    def blocks(self) -> list[Block]:
        return self.sealed + [self.final]

    def clustered_tokens(self) -> int:
        return self.buffer_start - self.sink_end


# ---------------------------------------------------------------------------
# Lloyd's algorithm


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (n, k)."""
    p2 = np.einsum("nd,nd->n", points, points)[:, None]
    c2 = np.einsum("kd,kd->k", centroids, centroids)[None, :]
    return p2 + c2 - 2.0 * points @ centroids.T


def _repair_empty(points, centroids, assign):
    """Re-seed each empty cluster from the farthest point of the largest
    cluster, stealing that point.  Mutates centroids and assign."""
    k = centroids.shape[0]
    while True:
        sizes = np.bincount(assign, minlength=k)
        empties = np.flatnonzero(sizes == 0)
        if empties.size == 0:
            return
        big = int(np.argmax(sizes))
        if sizes[big] <= 1:
            return  # nothing left to steal (duplicate-heavy degenerate input)
        members = np.flatnonzero(assign == big)
        d = np.einsum(
            "nd,nd->n", points[members] - centroids[big], points[members] - centroids[big]
        )
        far = members[int(np.argmax(d))]
        cid = int(empties[0])
        centroids[cid] = points[far]
        assign[far] = cid


def _means(points, assign, k):
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, assign, points)
    counts = np.bincount(assign, minlength=k)
    out = sums.copy()
    nz = counts > 0
    out[nz] /= counts[nz, None]
    return out, counts


def lloyd(points: np.ndarray, init_centroids: np.ndarray, min_iters: int):
    """Assign/update rounds until a terminal assignment pass is a fixed
    point (at least ``min_iters`` update rounds).  Returns (centroids,
    assignment); centroids of empty clusters are meaningless and reported
    via a zero count in the assignment."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.array(init_centroids, dtype=np.float64)
    k = centroids.shape[0]
    prev = None
    it = 0
    while True:
        assign = np.argmin(_sq_dists(points, centroids), axis=1)
        _repair_empty(points, centroids, assign)
        if prev is not None and it >= min_iters and np.array_equal(assign, prev):
            return centroids, assign
        if it >= min_iters + MAX_EXTRA_ITERS:
            centroids, _ = _means(points, assign, k)
            return centroids, assign
        centroids, _ = _means(points, assign, k)
        prev = assign
        it += 1


def _clusters_from_assignment(points, centroids, assign, base_index, index_map=None):
    """Build Cluster objects (value centroids filled later).  Empty
    clusters are dropped; ids are compacted in centroid order."""
    out = []
    k = centroids.shape[0]
    for cid in range(k):
        local = np.flatnonzero(assign == cid)
        if local.size == 0:
            continue
        if index_map is not None:
            idx = np.sort(index_map[local])
        else:
            idx = local.astype(np.int64) + base_index
        out.append(
            Cluster(
                key_centroid=centroids[cid].copy(),
                value_centroid=None,
                size=int(local.size),
                member_indices=idx,
            )
        )
    return out


def kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> list[Cluster]:
    """Lloyd's with random-point initialization; k is clamped to the
    number of points.  Member indices are local (0-based); value
    centroids are left for the caller to fill."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("points must be nonempty")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)
    rng = np.random.default_rng(seed)
    init = points[rng.choice(n, size=k, replace=False)]
    centroids, assign = lloyd(points, init, iters)
    return _clusters_from_assignment(points, centroids, assign, base_index=0)


def fill_value_centroids(clusters: list[Cluster], values: np.ndarray) -> None:
    """Set each cluster's value centroid to the mean of its members' values."""
    for c in clusters:
        c.value_centroid = np.mean(
            np.asarray(values, dtype=np.float64)[c.member_indices], axis=0
        )


def wcss(ledger: BlockLedger, keys: np.ndarray) -> float:
    """Within-cluster sum of squared distances over all fine clusters."""
    keys = windowed_key_view(keys)
    total = 0.0
    for block in ledger.blocks():
        for c in block.clusters:
            diff = keys[c.member_indices] - c.key_centroid
            total += float(np.einsum("nd,nd->", diff, diff))
    return total


# ---------------------------------------------------------------------------
# Hierarchy


def build_hierarchy(
    clusters: list[Cluster], cfg: EngineConfig, block_len: int, seed: int
) -> list[Cluster]:
    """Coarse (level-1) clusters from size-weighted k-means over the fine
    key centroids.  Each coarse centroid is then the exact mean of all
    underlying member keys; coarse size is the sum of member fine sizes."""
    if cfg.hierarchy is None:
        raise ConfigError("hierarchy is not enabled")
    if not clusters:
        return []
    fine_kc = np.stack([c.key_centroid for c in clusters])
    weights = np.array([c.size for c in clusters], dtype=np.float64)
    k1 = min(len(clusters), max(1, -(-block_len // cfg.hierarchy.r1)))
    rng = np.random.default_rng(seed)
    centroids = fine_kc[rng.choice(len(clusters), size=k1, replace=False)].copy()

    prev = None
    it = 0
    while True:
        assign = np.argmin(_sq_dists(fine_kc, centroids), axis=1)
        _repair_empty(fine_kc, centroids, assign)
        if prev is not None and it >= cfg.refine_kmeans_iters and np.array_equal(assign, prev):
            break
        if it >= cfg.refine_kmeans_iters + MAX_EXTRA_ITERS:
            break
        # weighted update: coarse centroid = size-weighted mean of fine centroids
        sums = np.zeros((k1, fine_kc.shape[1]))
        np.add.at(sums, assign, fine_kc * weights[:, None])
        wsum = np.zeros(k1)
        np.add.at(wsum, assign, weights)
        nz = wsum > 0
        centroids[nz] = sums[nz] / wsum[nz, None]
        prev = assign
        it += 1

    out = []
    for cid in range(k1):
        child_ids = np.flatnonzero(assign == cid)
        if child_ids.size == 0:
            continue
        members = [clusters[j] for j in child_ids]
        n = sum(c.size for c in members)
        kc = sum(c.key_centroid * c.size for c in members) / n
        vc = sum(c.value_centroid * c.size for c in members) / n
        idx = np.sort(np.concatenate([c.member_indices for c in members]))
        out.append(
            Cluster(
                key_centroid=kc,
                value_centroid=vc,
                size=n,
                member_indices=idx,
                children=[int(j) for j in child_ids],
            )
        )
    return out


def _block_seed(cfg_seed: int, head: int, block_index: int, salt: int = 0) -> int:
    ss = np.random.SeedSequence([cfg_seed, head, block_index, salt])
    return int(ss.generate_state(1)[0])


def _cluster_block(keys, values, start, end, cfg, seed) -> list[Cluster]:
    if end <= start:
        return []
    pts = windowed_key_view(keys)[start:end]
    k = max(1, -(-(end - start) // cfg.fine_ratio))
    clusters = kmeans(pts, k, cfg.prefill_kmeans_iters, seed)
    for c in clusters:
        c.member_indices = c.member_indices + start
    fill_value_centroids(clusters, values)
    return clusters


# ---------------------------------------------------------------------------
# Prefill and online update


def build_prefill_index_head(
    keys: np.ndarray, values: np.ndarray, prompt_len: int, cfg: EngineConfig, head: int
) -> BlockLedger:
    """Blockwise clustering of one head's prompt keys."""
    if prompt_len <= cfg.sink_tokens:
        raise ConfigError(
            f"prompt_len {prompt_len} must exceed sink_tokens {cfg.sink_tokens}"
        )
    sink_end = cfg.sink_tokens
    buffer_len = min(cfg.local_buffer, prompt_len - sink_end)
    buffer_start = prompt_len - buffer_len
    clustered = buffer_start - sink_end
    W = cfg.block_size

    sealed = []
    n_sealed = clustered // W
    for b in range(n_sealed):
        start = sink_end + b * W
        seed = _block_seed(cfg.seed, head, b)
        block = Block(start, start + W, _cluster_block(keys, values, start, start + W, cfg, seed))
        sealed.append(block)

    fstart = sink_end + n_sealed * W
    fseed = _block_seed(cfg.seed, head, n_sealed)
    final = Block(fstart, buffer_start, _cluster_block(keys, values, fstart, buffer_start, cfg, fseed))

    ledger = BlockLedger(
        sink_end=sink_end,
        sealed=sealed,
        final=final,
        buffer_start=buffer_start,
        total=prompt_len,
    )
    if cfg.hierarchy is not None:
        for i, block in enumerate(ledger.blocks()):
            block.level1 = build_hierarchy(
                block.clusters, cfg, len(block), _block_seed(cfg.seed, head, i, salt=1)
            )
    return ledger


def build_prefill_index(trace: KvTrace, cfg: EngineConfig) -> list[BlockLedger]:
    """One ledger per kv-head over the prompt portion of the trace."""
    return [
        build_prefill_index_head(
            trace.keys[h, : trace.prompt_len],
            trace.values[h, : trace.prompt_len],
            trace.prompt_len,
            cfg,
            h,
        )
        for h in range(trace.layout.num_kv_heads)
    ]


def _settle_block(block: Block, keys, values) -> None:
    """Convergence-only Lloyd pass restoring the nearest-assignment fixed
    point after a split perturbed cluster membership."""
    if not block.clusters:
        return
    keys64 = windowed_key_view(keys)
    all_idx = np.sort(np.concatenate([c.member_indices for c in block.clusters]))
    init = np.stack([c.key_centroid for c in block.clusters])
    pts = keys64[all_idx]
    centroids, assign = lloyd(pts, init, min_iters=0)
    block.clusters = _clusters_from_assignment(
        pts, centroids, assign, base_index=0, index_map=all_idx
    )
    fill_value_centroids(block.clusters, values)


def _split_final(ledger: BlockLedger, keys, values, cfg: EngineConfig, head: int, settle: bool = True):
    """Seal the first W tokens of the final block whenever it reaches
    W + alpha.  Clusters straddling the boundary are split in two with
    recomputed centroids, then each side is settled back to a Lloyd fixed
    point so the partition and nearest-assignment invariants survive."""
    W, alpha = cfg.block_size, cfg.alpha
    keys64 = windowed_key_view(keys)
    while len(ledger.final) >= W + alpha:
        boundary = ledger.final.start + W
        sealed_clusters, kept_clusters = [], []
        for c in ledger.final.clusters:
            left = c.member_indices[c.member_indices < boundary]
            right = c.member_indices[c.member_indices >= boundary]
            for side, bucket in ((left, sealed_clusters), (right, kept_clusters)):
                if side.size == 0:
                    continue
                if side.size == c.size:
                    bucket.append(c)
                else:
                    bucket.append(
                        Cluster(
                            key_centroid=np.mean(keys64[side], axis=0),
                            value_centroid=np.mean(
                                np.asarray(values, dtype=np.float64)[side], axis=0
                            ),
                            size=int(side.size),
                            member_indices=side.copy(),
                        )
                    )
        new_block = Block(ledger.final.start, boundary, sealed_clusters)
        ledger.sealed.append(new_block)
        ledger.final = Block(boundary, ledger.final.end, kept_clusters)
        ledger.split_count += 1
        if settle:
            _settle_block(new_block, keys, values)
            _settle_block(ledger.final, keys, values)
        if cfg.hierarchy is not None:
            new_block.level1 = build_hierarchy(
                new_block.clusters,
                cfg,
                len(new_block),
                _block_seed(cfg.seed, head, len(ledger.sealed) - 1, salt=2),
            )


def append_tokens(
    ledger: BlockLedger,
    keys: np.ndarray,
    values: np.ndarray,
    cfg: EngineConfig,
    rng: np.random.Generator,
    head: int = 0,
) -> BlockLedger:
    """Absorb the oldest L buffered tokens into the final block.

    Sequential-style single-shot assignment (with freshly sampled initial
    centroids from the appended tokens) followed by a short full Lloyd
    refinement over the whole final block, then the W+alpha split check.
    ``keys``/``values`` are the full per-head stores.  Mutates the ledger.
    """
    L = cfg.local_buffer
    if ledger.buffer_len < 2 * L:
        raise RuntimeError(
            f"buffer underflow: have {ledger.buffer_len} tokens, need {2 * L}"
        )
    keys64 = windowed_key_view(keys)
    appended = np.arange(ledger.buffer_start, ledger.buffer_start + L, dtype=np.int64)

    # (1) fresh initial centroids sampled from the appended tokens
    n_new = -(-L // cfg.fine_ratio)
    sampled = rng.choice(L, size=n_new, replace=False)
    cent_list = [c.key_centroid for c in ledger.final.clusters]
    counts = [c.size for c in ledger.final.clusters]
    for s in sampled:
        cent_list.append(keys64[appended[s]].copy())
        counts.append(0)
    centroids = np.stack(cent_list) if cent_list else keys64[appended[:1]].copy()
    counts = np.array(counts, dtype=np.int64) if len(counts) else np.array([0])

    # (2) single-shot sequential assignment with running-mean updates
    for idx in appended:
        x = keys64[idx]
        d = np.einsum("kd,kd->k", centroids - x, centroids - x)
        c = int(np.argmin(d))
        counts[c] += 1
        centroids[c] += (x - centroids[c]) / counts[c]

    # (3) full Lloyd refinement over the entire final block
    old_members = [c.member_indices for c in ledger.final.clusters]
    all_idx = np.sort(
        np.concatenate(old_members + [appended])
        if old_members
        else appended
    )
    pts = keys64[all_idx]
    centroids, assign = lloyd(pts, centroids, cfg.refine_kmeans_iters)
    clusters = _clusters_from_assignment(
        pts, centroids, assign, base_index=0, index_map=all_idx
    )
    # (4) value centroids for the refreshed final block
    fill_value_centroids(clusters, values)
    ledger.final = Block(ledger.final.start, int(appended[-1]) + 1, clusters)
    ledger.buffer_start += L

    # (5) sliding-window split, (6) hierarchy refresh for the final block
    _split_final(ledger, keys, values, cfg, head)
    if cfg.hierarchy is not None:
        ledger.final.level1 = build_hierarchy(
            ledger.final.clusters,
            cfg,
            len(ledger.final),
            _block_seed(cfg.seed, head, ledger.buffer_start, salt=3),
        )
    return ledger


# ---------------------------------------------------------------------------
# Positional comparator: contiguous pages instead of semantic clusters


def _page_clusters(keys, values, start, end, r) -> list[Cluster]:
    keys64 = windowed_key_view(keys)
    out = []
    for s in range(start, end, r):
        e = min(s + r, end)
        idx = np.arange(s, e, dtype=np.int64)
        out.append(
            Cluster(
                key_centroid=np.mean(keys64[idx], axis=0),
                value_centroid=np.mean(np.asarray(values, dtype=np.float64)[idx], axis=0),
                size=int(e - s),
                member_indices=idx,
            )
        )
    return out


def build_positional_index_head(
    keys, values, prompt_len: int, cfg: EngineConfig
) -> BlockLedger:
    """Same ledger shape as the semantic index, but clusters are contiguous
    pages of r tokens with page-mean centroids."""
    if prompt_len <= cfg.sink_tokens:
        raise ConfigError(
            f"prompt_len {prompt_len} must exceed sink_tokens {cfg.sink_tokens}"
        )
    sink_end = cfg.sink_tokens
    buffer_len = min(cfg.local_buffer, prompt_len - sink_end)
    buffer_start = prompt_len - buffer_len
    clustered = buffer_start - sink_end
    W = cfg.block_size
    sealed = []
    n_sealed = clustered // W
    for b in range(n_sealed):
        start = sink_end + b * W
        sealed.append(
            Block(start, start + W, _page_clusters(keys, values, start, start + W, cfg.fine_ratio))
        )
    fstart = sink_end + n_sealed * W
    final = Block(
        fstart, buffer_start, _page_clusters(keys, values, fstart, buffer_start, cfg.fine_ratio)
    )
    return BlockLedger(
        sink_end=sink_end, sealed=sealed, final=final, buffer_start=buffer_start, total=prompt_len
    )


def append_tokens_positional(
    ledger: BlockLedger, keys, values, cfg: EngineConfig
) -> BlockLedger:
    """Positional-page analogue of append_tokens (no k-means)."""
    L = cfg.local_buffer
    if ledger.buffer_len < 2 * L:
        raise RuntimeError("buffer underflow")
    new_end = ledger.buffer_start + L
    ledger.final = Block(
        ledger.final.start,
        new_end,
        _page_clusters(keys, values, ledger.final.start, new_end, cfg.fine_ratio),
    )
    ledger.buffer_start += L
    _split_final(ledger, keys, values, cfg, head=0, settle=False)
    return ledger


# ---------------------------------------------------------------------------
# Audits and diagnostics


def audit_ledger(
    ledger: BlockLedger,
    keys: np.ndarray,
    cfg: EngineConfig,
    values: np.ndarray | None = None,
    rel_tol: float = 1e-5,
    check_assignment: bool = True,
) -> None:
    """Raise LedgerAuditError on any violated bookkeeping invariant:
    partition, centroid consistency, nearest assignment, final-block size.

    ``check_assignment=False`` skips the nearest-assignment invariant,
    which positional-page ledgers do not promise."""
    keys64 = windowed_key_view(keys)

    # partition: sinks + clustered members + buffer tile [0, total) exactly
    pieces = [np.arange(0, ledger.sink_end, dtype=np.int64)]
    for block in ledger.blocks():
        for c in block.clusters:
            pieces.append(c.member_indices)
            if c.size != len(c.member_indices):
                raise LedgerAuditError("cluster size disagrees with member count")
    pieces.append(np.arange(ledger.buffer_start, ledger.total, dtype=np.int64))
    flat = np.sort(np.concatenate(pieces))
    if flat.size != ledger.total or not np.array_equal(
        flat, np.arange(ledger.total, dtype=np.int64)
    ):
        raise LedgerAuditError("token indices do not tile [0, total) exactly")

    # block spans: contiguous, sealed blocks exactly W
    cursor = ledger.sink_end
    for block in ledger.sealed:
        if block.start != cursor or len(block) != cfg.block_size:
            raise LedgerAuditError("sealed block spans are not contiguous W-sized")
        cursor = block.end
    if ledger.final.start != cursor or ledger.final.end != ledger.buffer_start:
        raise LedgerAuditError("final block span inconsistent with buffer start")

    # final-block size window (applies once the sliding rule has engaged)
    if len(ledger.final) > cfg.block_size + cfg.alpha:
        raise LedgerAuditError("final block exceeds W + alpha")
    if ledger.split_count > 0 and len(ledger.final) < cfg.alpha:
        raise LedgerAuditError("final block shorter than alpha after a split")

    # centroid consistency and nearest assignment, per block
    values64 = None if values is None else np.asarray(values, dtype=np.float64)
    for block in ledger.blocks():
        if not block.clusters:
            continue
        centroids = np.stack([c.key_centroid for c in block.clusters])
        idx = np.concatenate([c.member_indices for c in block.clusters])
        owner = np.concatenate(
            [np.full(c.size, cid) for cid, c in enumerate(block.clusters)]
        )
        if idx.size and (idx.min() < block.start or idx.max() >= block.end):
            raise LedgerAuditError("cluster member outside its block span")
        pts = keys64[idx]
        counts = np.array([c.size for c in block.clusters], dtype=np.float64)
        sums = np.zeros_like(centroids)
        np.add.at(sums, owner, pts)
        scale = max(1.0, float(np.max(np.abs(centroids))))
        if np.max(np.abs(sums / counts[:, None] - centroids)) > rel_tol * scale:
            raise LedgerAuditError("key centroid drifted from member mean")
        if values64 is not None:
            vcent = np.stack([c.value_centroid for c in block.clusters])
            vsums = np.zeros_like(vcent)
            np.add.at(vsums, owner, values64[idx])
            vscale = max(1.0, float(np.max(np.abs(vcent))))
            if np.max(np.abs(vsums / counts[:, None] - vcent)) > rel_tol * vscale:
                raise LedgerAuditError("value centroid drifted from member mean")
        if check_assignment:
            nearest = np.argmin(_sq_dists(pts, centroids), axis=1)
            if not np.array_equal(nearest, owner):
                raise LedgerAuditError(
                    "a member is not assigned to its nearest centroid"
                )


def ledger_diagnostic(ledger: BlockLedger) -> dict:
    """JSON-friendly summary (spans, sizes, centroid checksums) for golden
    files and cross-run comparison."""

    def checksum(arr) -> str:
        return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]

    def block_doc(block: Block) -> dict:
        doc = {
            "span": [block.start, block.end],
            "cluster_sizes": [c.size for c in block.clusters],
            "key_centroid_checksums": [checksum(c.key_centroid) for c in block.clusters],
        }
        if block.level1 is not None:
            doc["level1_sizes"] = [c.size for c in block.level1]
        return doc

    return {
        "sink_end": ledger.sink_end,
        "buffer": [ledger.buffer_start, ledger.total],
        "split_count": ledger.split_count,
        "sealed": [block_doc(b) for b in ledger.sealed],
        "final": block_doc(ledger.final),
    }


def dump_ledger_json(ledger: BlockLedger) -> str:
    return json.dumps(ledger_diagnostic(ledger), sort_keys=True)


def load_ledger_json(doc: str) -> dict:
    return json.loads(doc)
