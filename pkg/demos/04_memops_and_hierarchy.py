"""Memory-operation accounting, flat versus hierarchical lookup.

The point of budgeted attention is loading less from the KV cache.  We
count head-dim vector loads per step (scored key centroids, rejected
value centroids, selected keys/values, sinks, buffer) against the dense
baseline of two loads per cached token.  At long contexts the flat
centroid scan itself becomes the dominant cost; the two-level hierarchy
scores coarse centroids first and descends only into the promoted ones.
"""

from multipole_attn import EngineConfig, HeadLayout, HierarchyConfig, gen_synthetic
from multipole_attn.bench import count_memops, mean_memop_ratio
from multipole_attn.pipeline import run

layout = HeadLayout(num_q_heads=8, num_kv_heads=2, head_dim=64)

print(f"{'context':>8} {'budget':>7} {'index':>14} {'memop ratio':>12}")
for context in (8192, 16384):
    trace = gen_synthetic(64, context, layout, 0.05, seed=7, decode_steps=40)
    for budget in (128, 512):
        cfg = EngineConfig(token_budget=budget, seed=7)
        ratio = mean_memop_ratio(run(trace, cfg))
        print(f"{context:>8} {budget:>7} {'flat':>14} {ratio:>12.4f}")
    hier_cfg = EngineConfig(
        token_budget=128,
        hierarchy=HierarchyConfig(r1=64, r2=8, promote_fraction=0.25),
        seed=7,
    )
    ratio = mean_memop_ratio(run(trace, hier_cfg))
    print(f"{context:>8} {128:>7} {'hierarchical':>14} {ratio:>12.4f}")

# Where do the loads go?  Break one step down.
trace = gen_synthetic(64, 16384, layout, 0.05, seed=7, decode_steps=1)
reports = run(trace, EngineConfig(token_budget=128, seed=7))
mem = count_memops(reports[0])
print("\nload breakdown for one flat 16K step (vector loads):")
for name in (
    "key_centroid_loads",
    "value_centroid_loads",
    "exact_key_loads",
    "exact_value_loads",
    "sink_loads",
    "buffer_loads",
):
    print(f"  {name:<22} {getattr(mem, name):>7}")
print(f"  {'dense baseline':<22} {mem.baseline_loads:>7}")
