"""Anatomy of the clustered key index.

Keys are clustered block by block: attention sinks stay exact, sealed
W-token blocks hold frozen clusters, the final block keeps growing, and
the newest tokens wait in an unclustered buffer.  Semantic clusters fit
the key distribution far better than positional pages of the same size,
which is what makes centroid lookup informative.
"""

import numpy as np

from multipole_attn import EngineConfig, HeadLayout, gen_synthetic
from multipole_attn.clustering import (
    audit_ledger,
    build_positional_index_head,
    build_prefill_index_head,
    wcss,
)

layout = HeadLayout(num_q_heads=1, num_kv_heads=1, head_dim=32)
trace = gen_synthetic(
    num_clusters_true=24,
    seq_len=3000,
    layout=layout,
    noise_sigma=0.05,
    seed=2,
    decode_steps=0,
)
cfg = EngineConfig(
    block_size=1024,
    alpha=512,
    local_buffer=64,
    sink_tokens=10,
    tokens_per_centroid=16,
    seed=2,
)

keys, values = trace.keys[0], trace.values[0]
ledger = build_prefill_index_head(keys, values, trace.prompt_len, cfg, head=0)

print(f"tokens: {ledger.total}")
print(f"  sinks   [0, {ledger.sink_end})  always attended exactly")
for i, block in enumerate(ledger.blocks()):
    kind = "final " if block is ledger.final else "sealed"
    sizes = sorted((c.size for c in block.clusters), reverse=True)
    print(
        f"  {kind} [{block.start}, {block.end})  {len(block.clusters)} clusters, "
        f"sizes {sizes[:6]}{'...' if len(sizes) > 6 else ''}"
    )
print(f"  buffer  [{ledger.buffer_start}, {ledger.total})  not yet clustered")

# The audit re-derives every invariant from raw keys: the partition of
# token indices, centroid-equals-member-mean, and nearest assignment.
audit_ledger(ledger, keys, cfg, values=values)
print("\naudit: all ledger invariants hold")

positional = build_positional_index_head(keys, values, trace.prompt_len, cfg)
print(f"\nwithin-cluster sum of squares (lower fits the keys better):")
print(f"  semantic clusters : {wcss(ledger, keys):10.1f}")
print(f"  positional pages  : {wcss(positional, keys):10.1f}")
