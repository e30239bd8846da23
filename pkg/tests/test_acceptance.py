"""Acceptance suite: each test derives its oracle values first, then
asserts, and prints a single pass/fail line for the criterion."""

import math
import time

import numpy as np
import pytest

from multipole_attn import (
    EngineConfig,
    HeadLayout,
    HierarchyConfig,
    gen_synthetic,
)
from multipole_attn.attention import (
    centroid_replacement_partial,
    centroid_scores,
    exact_attention,
    exact_partial,
    flat_lookup,
    hierarchical_lookup,
    merge_partials,
)
from multipole_attn.bench import (
    count_memops,
    mean_error,
    mean_memop_ratio,
    mean_recall,
    microbench,
    sweep,
    sweep_csv,
)
from multipole_attn.clustering import Cluster, build_prefill_index_head
from multipole_attn.pipeline import run
from multipole_attn.rope import RopeParams


def _verdict(name: str, ok: bool, detail: str):
    print(f"[{name}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Shared workloads


@pytest.fixture(scope="module")
def mixture_workload():
    """Planted-mixture trace whose queries target known clusters: 256 true
    clusters (~32 tokens each, below the 128-token budget), low noise, and
    peaked queries so exact attention concentrates on the target cluster."""
    layout = HeadLayout(num_q_heads=8, num_kv_heads=2, head_dim=64)
    trace = gen_synthetic(
        num_clusters_true=256,
        seq_len=8192,
        layout=layout,
        noise_sigma=0.02,
        seed=42,
        decode_steps=100,
        query_gain=128.0,
    )
    cfg = EngineConfig(token_budget=128, seed=42, rope_theta=1e8)
    return trace, cfg


def _table2_reports(context: int, budget: int, hierarchical: bool):
    layout = HeadLayout(num_q_heads=8, num_kv_heads=2, head_dim=64)
    trace = gen_synthetic(64, context, layout, 0.05, seed=7, decode_steps=40)
    cfg = EngineConfig(
        token_budget=budget,
        hierarchy=HierarchyConfig(r1=64, r2=8, promote_fraction=0.25)
        if hierarchical
        else None,
        seed=7,
    )
    return run(trace, cfg)


@pytest.fixture(scope="module")
def table2_16k_flat():
    return _table2_reports(16384, 128, hierarchical=False)


@pytest.fixture(scope="module")
def table2_16k_hier():
    return _table2_reports(16384, 128, hierarchical=True)


# ---------------------------------------------------------------------------
# Criteria


def test_criterion_1_full_budget_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        rng = np.random.default_rng(1000 + i)
        d = int(rng.choice([16, 64]))
        group = int(rng.choice([1, 4]))
        nkv = int(rng.integers(1, 3))
        seq = int(rng.integers(64, 4097))
        layout = HeadLayout(num_q_heads=nkv * group, num_kv_heads=nkv, head_dim=d)
        trace = gen_synthetic(
            int(rng.integers(2, 17)),
            seq,
            layout,
            float(rng.uniform(0.01, 0.3)),
            seed=int(rng.integers(0, 2**31)),
            decode_steps=3,
        )
        cfg = EngineConfig(
            block_size=512,
            alpha=256,
            local_buffer=32,
            sink_tokens=10,
            token_budget=seq + 10,  # B >= total cached tokens
            seed=i,
        )
        approx = run(trace, cfg, mode="multipole", max_steps=3, collect_outputs=True)
        exact = run(trace, cfg, mode="oracle", max_steps=3, collect_outputs=True)
        for ra, rb in zip(approx, exact):
            err = np.linalg.norm(ra.outputs - rb.outputs, axis=1) / np.linalg.norm(
                rb.outputs, axis=1
            )
            worst = max(worst, float(err.max()))
    wall = time.perf_counter() - t0
    _verdict(
        "criterion 1",
        worst < 1e-5 and wall < 120,
        f"worst relative error {worst:.3e} (tol 1e-5), {wall:.1f}s (< 120s)",
    )


def test_criterion_2_reference_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_score = 0.0
    worst_replace = 0.0
    for _ in range(1000):
        d = int(rng.choice([8, 16, 64]))
        k = int(rng.integers(1, 12))
        clusters = [
            Cluster(
                key_centroid=rng.standard_normal(d),
                value_centroid=rng.standard_normal(d),
                size=int(rng.integers(1, 40)),
                member_indices=np.zeros(0, dtype=np.int64),
            )
            for _ in range(k)
        ]
        q = rng.standard_normal(d)

        # naive Eq. 1: S_i = exp(q.Kc_i/sqrt(d)) / sum_j N_j exp(q.Kc_j/sqrt(d))
        exps = [math.exp(float(q @ c.key_centroid) / math.sqrt(d)) for c in clusters]
        denom = sum(c.size * e for c, e in zip(clusters, exps))
        naive_scores = [e / denom for e in exps]

        scores = centroid_scores(q, clusters, head_dim=d)
        for s, n in zip(scores, naive_scores):
            worst_score = max(worst_score, abs(s.score - n) / max(abs(n), 1e-300))

        # naive Eq. 2: output = sum_i N_i exp(.) Vc_i / sum_i N_i exp(.)
        num = sum(
            c.size * e * np.asarray(c.value_centroid) for c, e in zip(clusters, exps)
        )
        den = sum(c.size * e for c, e in zip(clusters, exps))
        naive_out = num / den
        got = centroid_replacement_partial(q, clusters, head_dim=d).finalize()
        rel = float(
            np.max(np.abs(got - naive_out)) / max(float(np.max(np.abs(naive_out))), 1e-300)
        )
        worst_replace = max(worst_replace, rel)
    wall = time.perf_counter() - t0
    ok = worst_score < 1e-8 and worst_replace < 1e-8 and wall < 30
    _verdict(
        "criterion 2",
        ok,
        f"Eq.1 max rel dev {worst_score:.3e}, Eq.2 {worst_replace:.3e} "
        f"(tol 1e-8), {wall:.1f}s (< 30s)",
    )


def test_criterion_3_merge_partition_invariance():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.choice([8, 16]))
        n = int(rng.integers(4, 80))
        params = RopeParams(head_dim=d)
        keys = rng.standard_normal((n, d))
        values = rng.standard_normal((n, d))
        positions = np.sort(rng.choice(8 * n, size=n, replace=False))
        q = rng.standard_normal(d)
        whole = exact_attention(q, 8 * n, keys, values, positions, params)
        pieces = np.array_split(rng.permutation(n), int(rng.integers(2, 9)))
        parts = [
            exact_partial(q, 8 * n, keys[p], values[p], positions[p], params)
            for p in pieces
        ]
        merged = merge_partials(parts).finalize()
        rel = float(np.linalg.norm(merged - whole) / np.linalg.norm(whole))
        worst = max(worst, rel)
    _verdict("criterion 3", worst < 1e-6, f"worst merge deviation {worst:.3e} (tol 1e-6)")


def test_criterion_4_memory_ratio_table(table2_16k_flat, table2_16k_hier):
    t0 = time.perf_counter()
    cases = [
        ("flat 8K B=128", _table2_reports(8192, 128, False), 0.11),
        ("flat 8K B=512", _table2_reports(8192, 512, False), 0.16),
        ("flat 16K B=128", table2_16k_flat, 0.09),
        ("flat 16K B=512", _table2_reports(16384, 512, False), 0.11),
        ("hier 8K B=128", _table2_reports(8192, 128, True), 0.08),
        ("hier 16K B=128", table2_16k_hier, 0.05),
    ]
    details = []
    ok = True
    for name, reports, target in cases:
        ratio = mean_memop_ratio(reports)
        ok = ok and abs(ratio - target) <= 0.02
        details.append(f"{name}: {ratio:.4f} (target {target} +- 0.02)")
    wall = time.perf_counter() - t0
    ok = ok and wall < 60
    _verdict("criterion 4", ok, "; ".join(details) + f"; {wall:.1f}s (< 60s)")


def test_criterion_5_accuracy_ordering(mixture_workload):
    trace, cfg = mixture_workload
    t0 = time.perf_counter()
    results = {}
    for mode in ("multipole", "flat-no-replacement", "positional-baseline"):
        reports = run(trace, cfg, mode=mode, oracle=True)
        results[mode] = (mean_error(reports), mean_recall(reports))
    wall = time.perf_counter() - t0
    e_multi, r_multi = results["multipole"]
    e_norep, _ = results["flat-no-replacement"]
    e_pos, r_pos = results["positional-baseline"]
    ok = e_multi < e_norep < e_pos and r_multi >= r_pos and wall < 300
    _verdict(
        "criterion 5",
        ok,
        f"error multipole {e_multi:.4f} < no-replacement {e_norep:.4f} "
        f"< positional {e_pos:.4f}; recall {r_multi:.3f} >= {r_pos:.3f}; "
        f"{wall:.1f}s (< 300s)",
    )


def test_criterion_6_sliding_window_bookkeeping():
    layout = HeadLayout(num_q_heads=1, num_kv_heads=1, head_dim=16)
    trace = gen_synthetic(8, 64, layout, 0.05, seed=6, decode_steps=10000)
    cfg = EngineConfig(
        block_size=64,
        alpha=32,
        local_buffer=8,
        sink_tokens=10,
        token_budget=64,
        seed=6,
    )
    t0 = time.perf_counter()
    reports = run(trace, cfg, mode="multipole", audit=True)  # raises on violation
    wall = time.perf_counter() - t0
    updates = sum(r.update_occurred for r in reports)
    ok = updates > 1000 and wall < 120
    _verdict(
        "criterion 6",
        ok,
        f"10000 steps, {updates} audited updates, all invariants held, "
        f"{wall:.1f}s (< 120s)",
    )


def test_criterion_7_budget_monotonicity(mixture_workload):
    trace, cfg = mixture_workload
    rows = sweep(trace, cfg, "budget", [32, 512])
    csv_a = sweep_csv(rows)
    csv_b = sweep_csv(sweep(trace, cfg, "budget", [32, 512]))
    e32 = rows[0]["mean_error"]
    e512 = rows[1]["mean_error"]
    ok = e512 < e32 and csv_a == csv_b
    _verdict(
        "criterion 7",
        ok,
        f"error(B=512)={e512:.4f} < error(B=32)={e32:.4f}; "
        f"CSV bit-identical={csv_a == csv_b}",
    )


def test_criterion_8_hierarchy_consistency(table2_16k_flat, table2_16k_hier):
    # part 1: p=1 hierarchical selection equals flat selection
    mismatches = 0
    for i in range(20):
        rng = np.random.default_rng(800 + i)
        d = int(rng.choice([16, 64]))
        seq = int(rng.integers(300, 1500))
        layout = HeadLayout(num_q_heads=1, num_kv_heads=1, head_dim=d)
        trace = gen_synthetic(
            int(rng.integers(4, 20)),
            seq,
            layout,
            0.05,
            seed=int(rng.integers(0, 2**31)),
            decode_steps=0,
        )
        cfg = EngineConfig(
            block_size=256,
            alpha=128,
            local_buffer=16,
            sink_tokens=10,
            token_budget=int(rng.integers(16, 128)),
            hierarchy=HierarchyConfig(r1=32, r2=8, promote_fraction=1.0),
            seed=i,
        )
        ledger = build_prefill_index_head(trace.keys[0], trace.values[0], seq, cfg, 0)
        q = rng.standard_normal(d)
        _, h_refs, _, h_coarse_rej, _ = hierarchical_lookup(q, ledger, cfg, d)
        _, f_refs, _, _, _ = flat_lookup(q, ledger, cfg, d)
        if set(h_refs) != set(f_refs) or h_coarse_rej:
            mismatches += 1

    # part 2: hierarchical centroid loads < flat at p=0.25, 16K context
    flat_loads = sum(count_memops(r).key_centroid_loads for r in table2_16k_flat)
    hier_loads = sum(count_memops(r).key_centroid_loads for r in table2_16k_hier)
    ok = mismatches == 0 and hier_loads < flat_loads
    _verdict(
        "criterion 8",
        ok,
        f"p=1 selection mismatches {mismatches}/20; centroid loads "
        f"hier {hier_loads} < flat {flat_loads}",
    )


def test_criterion_9_update_overhead():
    layout = HeadLayout(num_q_heads=8, num_kv_heads=1, head_dim=64)
    trace = gen_synthetic(64, 16384, layout, 0.05, seed=17, decode_steps=300)
    cfg = EngineConfig(
        block_size=1024,
        alpha=512,
        local_buffer=128,
        sink_tokens=10,
        token_budget=128,
        seed=17,
    )
    result = microbench(trace, cfg, repeats=290)
    median_step = result["total"]["median"]
    amortized = result["update"]["amortized_per_step"]
    ratio = amortized / median_step
    _verdict(
        "criterion 9",
        ratio < 0.10,
        f"amortized update {amortized * 1e3:.3f} ms per step is "
        f"{ratio:.1%} of median step {median_step * 1e3:.3f} ms (< 10%)",
    )
