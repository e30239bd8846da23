"""Domain types, engine configuration, and the binary KV trace format.

A trace is a recording (or synthetic construction) of everything the
attention engine consumes at decode time: per-head key/value vectors for
the prompt and for every generated token, plus one query vector per query
head per decode step.  Keys and queries are stored *pre-rotation*; the
rope module applies positional rotation on demand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MPKV"
VERSION = 1
HEADER_SIZE = 40


class TraceFormatError(ValueError):
    """Malformed trace file (bad magic, version, or truncated payload)."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TraceValidationError(ValueError):
    """Structurally valid file whose contents violate a trace invariant."""

    def __init__(self, message: str, fieldname: str):
        super().__init__(f"{fieldname}: {message}")
        self.fieldname = fieldname


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HeadLayout:
    """Attention head geometry, including the grouped-query sharing factor."""

    num_q_heads: int
    num_kv_heads: int
    head_dim: int

    def __post_init__(self):
        if self.num_kv_heads < 1 or self.num_q_heads < 1:
            raise TraceValidationError("head counts must be >= 1", "num_q_heads")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise TraceValidationError(
                "num_q_heads must be an exact multiple of num_kv_heads",
                "num_q_heads",
            )
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise TraceValidationError(
                "head_dim must be even and >= 2 (rotary pairing)", "head_dim"
            )

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def q_heads_of(self, kv_head: int) -> range:
        """Query heads sharing the given key/value head."""
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)


@dataclass(frozen=True)
class KvTrace:
    """A replayable stream of keys, values, and decode-step queries.

    Shapes: keys/values are (num_kv_heads, prompt_len + decode_steps, d),
    queries are (num_q_heads, decode_steps, d).  Token positions are the
    implicit indices 0..T-1.  All vectors are stored pre-rotation.
    """

    layout: HeadLayout
    prompt_len: int
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray

    def __post_init__(self):
        lay = self.layout
        for name in ("keys", "values", "queries"):
            arr = getattr(self, name)
            if not isinstance(arr, np.ndarray) or arr.dtype != np.float32:
                object.__setattr__(self, name, np.asarray(arr, dtype=np.float32))
        if self.keys.ndim != 3 or self.keys.shape[0] != lay.num_kv_heads:
            raise TraceValidationError(
                f"expected shape (num_kv_heads, T, head_dim), got {self.keys.shape}",
                "keys",
            )
        if self.values.shape != self.keys.shape:
            raise TraceValidationError(
                f"shape {self.values.shape} does not match keys {self.keys.shape}",
                "values",
            )
        if self.keys.shape[2] != lay.head_dim:
            raise TraceValidationError(
                f"last dim {self.keys.shape[2]} != head_dim {lay.head_dim}", "keys"
            )
        if (
            self.queries.ndim != 3
            or self.queries.shape[0] != lay.num_q_heads
            or self.queries.shape[2] != lay.head_dim
        ):
            raise TraceValidationError(
                f"expected shape (num_q_heads, steps, head_dim), got {self.queries.shape}",
                "queries",
            )
        if self.prompt_len < 0 or self.prompt_len > self.keys.shape[1]:
            raise TraceValidationError(
                f"prompt_len {self.prompt_len} outside [0, {self.keys.shape[1]}]",
                "prompt_len",
            )
        if self.keys.shape[1] != self.prompt_len + self.queries.shape[1]:
            raise TraceValidationError(
                f"key length {self.keys.shape[1]} != prompt_len + decode_steps "
                f"({self.prompt_len} + {self.queries.shape[1]})",
                "keys",
            )

    @property
    def decode_steps(self) -> int:
        return self.queries.shape[1]

    @property
    def total_len(self) -> int:
        return self.keys.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KvTrace):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.prompt_len == other.prompt_len
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.queries, other.queries)
        )


@dataclass(frozen=True)
class HierarchyConfig:
    """Two-level clustering: coarse clusters of fine clusters."""

    r1: int = 64  # tokens per coarse centroid
    r2: int = 8  # tokens per fine centroid
    promote_fraction: float = 0.25

    def __post_init__(self):
        if not (self.r1 > self.r2 >= 1):
            raise ConfigError("hierarchy requires r1 > r2 >= 1")
        if self.r1 % self.r2 != 0:
            raise ConfigError("r1 must be a multiple of r2")
        if not (0.0 < self.promote_fraction <= 1.0):
            raise ConfigError("promote_fraction must be in (0, 1]")


@dataclass(frozen=True)
class EngineConfig:
    block_size: int = 8192  # W
    alpha: int | None = None  # defaults to W // 2
    local_buffer: int = 128  # L
    sink_tokens: int = 10
    token_budget: int = 128  # B
    tokens_per_centroid: int = 16  # r
    prefill_kmeans_iters: int = 10
    refine_kmeans_iters: int = 3
    hierarchy: HierarchyConfig | None = None
    rope_theta: float = 10000.0
    window_offset: int = 64  # fixed lookup-rotation position for queries
    seed: int = 0

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.block_size // 2)
        if self.alpha > self.block_size:
            raise ConfigError("alpha must be <= block_size")
        if self.local_buffer < 1:
            raise ConfigError("local_buffer must be >= 1")
        if self.token_budget < 0:
            raise ConfigError("token_budget must be >= 0")
        if self.tokens_per_centroid < 1:
            raise ConfigError("tokens_per_centroid must be >= 1")
        if self.sink_tokens < 0:
            raise ConfigError("sink_tokens must be >= 0")
        if self.window_offset < 0:
            raise ConfigError("window_offset must be >= 0")
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be > 0")

    @property
    def fine_ratio(self) -> int:
        """Tokens per finest-level centroid (r2 when hierarchy is on)."""
        return self.hierarchy.r2 if self.hierarchy else self.tokens_per_centroid


def write_trace(trace: KvTrace, path) -> None:
    """Serialize a trace: 40-byte header then keys, values, queries as
    little-endian f32, row-major [head][position][dim]."""
    lay = trace.layout
    header = struct.pack(
        "<4sIIIIII12x",
        MAGIC,
        VERSION,
        lay.num_q_heads,
        lay.num_kv_heads,
        lay.head_dim,
        trace.prompt_len,
        trace.decode_steps,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(trace.keys, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(trace.values, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(trace.queries, dtype="<f4").tobytes())


def load_trace(path) -> KvTrace:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER_SIZE:
        raise TraceFormatError("file shorter than header", len(data))
    if data[:4] != MAGIC:
        raise TraceFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    (version, nq, nkv, d, prompt_len, steps) = struct.unpack_from("<IIIIII", data, 4)
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}", 4)
    layout = HeadLayout(num_q_heads=nq, num_kv_heads=nkv, head_dim=d)
    total = prompt_len + steps
    n_key = nkv * total * d
    n_query = nq * steps * d
    expected = HEADER_SIZE + 4 * (2 * n_key + n_query)
    if len(data) != expected:
        raise TraceFormatError(
            f"payload size {len(data)} != expected {expected}", HEADER_SIZE
        )
    off = HEADER_SIZE

    def take(n, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        off += 4 * n
        return arr.reshape(shape).astype(np.float32)

    keys = take(n_key, (nkv, total, d))
    values = take(n_key, (nkv, total, d))
    queries = take(n_query, (nq, steps, d))
    return KvTrace(
        layout=layout, prompt_len=prompt_len, keys=keys, values=values, queries=queries
    )


def gen_synthetic(
    num_clusters_true: int,
    seq_len: int,
    layout: HeadLayout,
    noise_sigma: float,
    seed: int,
    decode_steps: int = 32,
    query_gain: float | None = None,
) -> KvTrace:
    """Synthetic trace with planted semantic structure.

    Keys are drawn from a mixture of ``num_clusters_true`` isotropic
    Gaussians with unit-norm means and std ``noise_sigma``; cluster labels
    are interleaved uniformly over positions, so positional pages mix
    clusters.  Queries are drawn near a random subset of the mixture means
    (scaled by ``query_gain``), giving each decode step a ground-truth set
    of important clusters.  Values are standard Gaussian.  Fully
    deterministic under ``seed``.
    """
    if not (1 <= num_clusters_true <= seq_len):
        raise ValueError("require seq_len >= num_clusters_true >= 1")
    if decode_steps < 0:
        raise ValueError("decode_steps must be >= 0")
    d = layout.head_dim
    if query_gain is None:
        # peaked enough that a query's target cluster dominates the softmax
        query_gain = 12.0 * np.sqrt(d)
    rng = np.random.default_rng(seed)
    total = seq_len + decode_steps
    keys = np.empty((layout.num_kv_heads, total, d), dtype=np.float32)
    values = rng.standard_normal((layout.num_kv_heads, total, d)).astype(np.float32)
    queries = np.empty((layout.num_q_heads, decode_steps, d), dtype=np.float32)

    for h in range(layout.num_kv_heads):
        means = rng.standard_normal((num_clusters_true, d))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        labels = rng.integers(0, num_clusters_true, size=total)
        noise = rng.standard_normal((total, d)) * noise_sigma
        keys[h] = (means[labels] + noise).astype(np.float32)
        # each group of query heads targets a small subset of this head's means
        n_imp = max(1, num_clusters_true // 4)
        important = rng.choice(num_clusters_true, size=n_imp, replace=False)
        for q in layout.q_heads_of(h):
            picks = rng.choice(important, size=decode_steps)
            qnoise = rng.standard_normal((decode_steps, d)) * noise_sigma
            queries[q] = (query_gain * (means[picks] + qnoise)).astype(np.float32)

    return KvTrace(
        layout=layout, prompt_len=seq_len, keys=keys, values=values, queries=queries
    )
