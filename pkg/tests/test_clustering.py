import numpy as np
import pytest

from multipole_attn.core import EngineConfig, HeadLayout, HierarchyConfig, gen_synthetic
from multipole_attn.clustering import (
    LedgerAuditError,
    append_tokens,
    append_tokens_positional,
    audit_ledger,
    build_positional_index_head,
    build_prefill_index,
    build_prefill_index_head,
    dump_ledger_json,
    fill_value_centroids,
    kmeans,
    load_ledger_json,
    wcss,
)


def _mixture(n, d, k, seed, sigma=0.05):
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((k, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.integers(0, k, size=n)
    return means[labels] + sigma * rng.standard_normal((n, d))


def _check_kmeans_invariants(points, clusters):
    # partition
    all_idx = np.sort(np.concatenate([c.member_indices for c in clusters]))
    assert np.array_equal(all_idx, np.arange(len(points)))
    centroids = np.stack([c.key_centroid for c in clusters])
    for cid, c in enumerate(clusters):
        # centroid is the exact mean of its members
        assert np.allclose(
            c.key_centroid, np.mean(points[c.member_indices], axis=0), atol=1e-10
        )
        # every member is nearest to its own centroid
        diffs = points[c.member_indices][:, None, :] - centroids[None, :, :]
        nearest = np.argmin(np.einsum("nkd,nkd->nk", diffs, diffs), axis=1)
        assert np.all(nearest == cid)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_kmeans_invariants(seed):
    points = _mixture(300, 8, 6, seed)
    clusters = kmeans(points, k=6, iters=5, seed=seed)
    _check_kmeans_invariants(points, clusters)


def test_kmeans_deterministic():
    points = _mixture(200, 8, 4, 9)
    a = kmeans(points, 4, 5, seed=3)
    b = kmeans(points, 4, 5, seed=3)
    assert len(a) == len(b)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.member_indices, cb.member_indices)
        assert np.array_equal(ca.key_centroid, cb.key_centroid)


def test_kmeans_k_clamped_to_n():
    points = np.eye(3)
    clusters = kmeans(points, k=10, iters=3, seed=0)
    assert len(clusters) == 3
    assert all(c.size == 1 for c in clusters)


def test_kmeans_duplicate_points_degenerate():
    points = np.zeros((20, 4))
    clusters = kmeans(points, k=4, iters=3, seed=1)
    assert sum(c.size for c in clusters) == 20


def test_kmeans_rejects_empty_and_bad_k():
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 3)), 1, 3, 0)
    with pytest.raises(ValueError):
        kmeans(np.zeros((5, 3)), 0, 3, 0)


def test_more_clusters_never_hurt_wcss():
    points = _mixture(400, 8, 8, 5)
    totals = []
    for k in (1, 4, 16):
        clusters = kmeans(points, k, 10, seed=2)
        totals.append(
            sum(
                float(np.sum((points[c.member_indices] - c.key_centroid) ** 2))
                for c in clusters
            )
        )
    assert totals[0] >= totals[1] >= totals[2]


def test_fill_value_centroids():
    points = _mixture(50, 4, 3, 7)
    values = np.arange(200, dtype=float).reshape(50, 4)
    clusters = kmeans(points, 3, 5, seed=0)
    fill_value_centroids(clusters, values)
    for c in clusters:
        assert np.allclose(c.value_centroid, values[c.member_indices].mean(axis=0))


# ---------------------------------------------------------------------------
# Ledger construction


@pytest.fixture
def cfg():
    return EngineConfig(
        block_size=128,
        alpha=64,
        local_buffer=16,
        sink_tokens=8,
        token_budget=32,
        tokens_per_centroid=8,
        seed=5,
    )


@pytest.fixture
def trace(cfg):
    lay = HeadLayout(num_q_heads=2, num_kv_heads=2, head_dim=8)
    return gen_synthetic(6, 500, lay, 0.05, seed=5, decode_steps=200)


def test_prefill_ledger_shape_and_audit(trace, cfg):
    ledgers = build_prefill_index(trace, cfg)
    assert len(ledgers) == 2
    for h, ledger in enumerate(ledgers):
        # 500 - 8 sinks - 16 buffer = 476 clustered -> 3 sealed W-blocks + final
        assert ledger.sink_end == 8
        assert len(ledger.sealed) == 3
        assert ledger.buffer_len == 16
        assert ledger.total == 500
        audit_ledger(ledger, trace.keys[h], cfg, values=trace.values[h])


def test_prefill_deterministic(trace, cfg):
    a = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, head=0)
    b = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, head=0)
    assert dump_ledger_json(a) == dump_ledger_json(b)


def test_prefill_heads_seeded_independently(trace, cfg):
    a = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, head=0)
    b = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, head=1)
    # same points, different head seed: centroids almost surely differ
    assert dump_ledger_json(a) != dump_ledger_json(b)


def test_prefill_requires_room_past_sinks(cfg):
    lay = HeadLayout(num_q_heads=1, num_kv_heads=1, head_dim=8)
    tr = gen_synthetic(2, 8, lay, 0.05, seed=0, decode_steps=0)
    with pytest.raises(Exception):
        build_prefill_index_head(tr.keys[0], tr.values[0], 8, cfg, head=0)


def test_append_tokens_absorbs_oldest_l(trace, cfg):
    h = 0
    keys, values = trace.keys[h], trace.values[h]
    ledger = build_prefill_index_head(keys[:500], values[:500], 500, cfg, head=h)
    ledger.total += 16  # as if 16 tokens were appended to the store
    rng = np.random.default_rng(0)
    old_end = ledger.final.end
    append_tokens(ledger, keys[:516], values[:516], cfg, rng, head=h)
    assert ledger.buffer_start == old_end + 16
    assert ledger.buffer_len == 16
    audit_ledger(ledger, keys[:516], cfg, values=values[:516])


def test_append_tokens_underflow(trace, cfg):
    ledger = build_prefill_index_head(trace.keys[0][:500], trace.values[0][:500], 500, cfg, 0)
    with pytest.raises(RuntimeError):
        append_tokens(ledger, trace.keys[0], trace.values[0], cfg, np.random.default_rng(0))


def test_sliding_split_engages(trace, cfg):
    # keep appending until the final block crosses W + alpha and splits
    h = 0
    keys, values = trace.keys[h], trace.values[h]
    ledger = build_prefill_index_head(keys[:500], values[:500], 500, cfg, head=h)
    n = 500
    sealed_before = len(ledger.sealed)
    while ledger.split_count == 0 and n + 16 <= keys.shape[0]:
        n += 16
        ledger.total = n
        append_tokens(ledger, keys[:n], values[:n], cfg, np.random.default_rng(n), head=h)
        audit_ledger(ledger, keys[:n], cfg, values=values[:n])
    assert ledger.split_count >= 1
    assert len(ledger.sealed) > sealed_before
    assert len(ledger.sealed[-1]) == cfg.block_size
    assert cfg.alpha <= len(ledger.final) < cfg.block_size + cfg.alpha


def test_hierarchy_structure(trace):
    cfg = EngineConfig(
        block_size=128,
        alpha=64,
        local_buffer=16,
        sink_tokens=8,
        tokens_per_centroid=8,
        hierarchy=HierarchyConfig(r1=32, r2=8, promote_fraction=0.5),
        seed=5,
    )
    ledger = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, head=0)
    audit_ledger(ledger, trace.keys[0], cfg, values=trace.values[0])
    for block in ledger.blocks():
        assert block.level1 is not None
        child_union = sorted(j for c in block.level1 for j in c.children)
        assert child_union == list(range(len(block.clusters)))
        for coarse in block.level1:
            members = [block.clusters[j] for j in coarse.children]
            n = sum(c.size for c in members)
            assert coarse.size == n
            expect = sum(c.key_centroid * c.size for c in members) / n
            assert np.allclose(coarse.key_centroid, expect, atol=1e-10)
            idx = np.sort(np.concatenate([c.member_indices for c in members]))
            assert np.array_equal(coarse.member_indices, idx)


def test_positional_index_pages(trace, cfg):
    ledger = build_positional_index_head(trace.keys[0], trace.values[0], 500, cfg)
    audit_ledger(ledger, trace.keys[0], cfg, values=trace.values[0], check_assignment=False)
    for block in ledger.blocks():
        cursor = block.start
        for c in block.clusters:
            assert np.array_equal(
                c.member_indices, np.arange(cursor, cursor + c.size)
            )
            assert c.size <= cfg.tokens_per_centroid
            cursor += c.size
        assert cursor == block.end


def test_positional_append(trace, cfg):
    h = 0
    keys, values = trace.keys[h], trace.values[h]
    ledger = build_positional_index_head(keys[:500], values[:500], 500, cfg)
    ledger.total += 16
    append_tokens_positional(ledger, keys[:516], values[:516], cfg)
    audit_ledger(ledger, keys[:516], cfg, values=values[:516], check_assignment=False)


def test_audit_detects_centroid_drift(trace, cfg):
    ledger = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, 0)
    ledger.final.clusters[0].key_centroid = ledger.final.clusters[0].key_centroid + 1.0
    with pytest.raises(LedgerAuditError):
        audit_ledger(ledger, trace.keys[0], cfg)


def test_audit_detects_partition_hole(trace, cfg):
    ledger = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, 0)
    c = ledger.final.clusters[0]
    c.member_indices = c.member_indices[1:]
    c.size -= 1
    with pytest.raises(LedgerAuditError):
        audit_ledger(ledger, trace.keys[0], cfg)


def test_audit_detects_size_mismatch(trace, cfg):
    ledger = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, 0)
    ledger.final.clusters[0].size += 1
    with pytest.raises(LedgerAuditError):
        audit_ledger(ledger, trace.keys[0], cfg)


def test_ledger_json_roundtrip(trace, cfg):
    ledger = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, 0)
    doc = load_ledger_json(dump_ledger_json(ledger))
    assert doc["sink_end"] == 8
    assert doc["buffer"] == [ledger.buffer_start, 500]
    assert len(doc["sealed"]) == 3


def test_wcss_nonnegative(trace, cfg):
    ledger = build_prefill_index_head(trace.keys[0], trace.values[0], 500, cfg, 0)
    semantic = wcss(ledger, trace.keys[0])
    positional = wcss(
        build_positional_index_head(trace.keys[0], trace.values[0], 500, cfg),
        trace.keys[0],
    )
    assert 0 <= semantic
    # semantic clustering should fit the planted mixture far better than pages
    assert semantic < positional
