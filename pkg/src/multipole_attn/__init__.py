"""Decode-time attention engine built on semantic key clustering.

The engine keeps the full KV cache but only loads a budgeted set of
important tokens for exact attention each step; every remaining cluster
contributes an approximate term through its key/value centroids.  Blocks
of keys are clustered with k-means, the final block slides as generation
appends tokens, and an optional two-level hierarchy cuts centroid-lookup
cost at long contexts.
"""

from .core import (
    EngineConfig,
    HeadLayout,
    HierarchyConfig,
    KvTrace,
    gen_synthetic,
    load_trace,
    write_trace,
)
from .pipeline import EngineState, prefill, run, step

__all__ = [
    "EngineConfig",
    "EngineState",
    "HeadLayout",
    "HierarchyConfig",
    "KvTrace",
    "gen_synthetic",
    "load_trace",
    "prefill",
    "run",
    "step",
    "write_trace",
]
