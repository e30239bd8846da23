"""Rotary positional embedding and the two lookup-side views.

Exact attention rotates queries and keys at their true sequence
positions.  Clustering and centroid scoring instead use a windowed view:
keys as if at position 0 (the identity, since traces store pre-rotation
vectors) and the query rotated at a fixed offset.  Mixing the two views
inside one score is a bug; callers keep them separate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    theta: float = 10000.0
    window_offset: int = 64

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even and >= 2")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.window_offset < 0:
            raise ValueError("window_offset must be >= 0")

    @property
    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.theta ** (-2.0 * i / self.head_dim)


def rotate(v: np.ndarray, position, params: RopeParams) -> np.ndarray:
    """Rotate vector(s) by the angles of the given position(s).

    ``v`` is (..., d); ``position`` is scalar or broadcasts against the
    leading dimensions.  Dimension pairs (2i, 2i+1) are rotated by
    position * theta**(-2i/d).  Norm-preserving; computed in float64.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.head_dim:
        raise ValueError(f"last dim {v.shape[-1]} != head_dim {params.head_dim}")
    angles = np.multiply.outer(np.asarray(position, dtype=np.float64), params.inv_freq)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def windowed_key_view(keys: np.ndarray) -> np.ndarray:
    """Keys as seen by clustering and centroid lookup.

    Traces store keys pre-rotation, so the position-0 view is the stored
    vector itself.  Kept as an explicit call site so the convention is
    visible where clustering consumes keys.
    """
    return np.asarray(keys, dtype=np.float64)


def lookup_query_view(q: np.ndarray, params: RopeParams) -> np.ndarray:
    """Query rotated at the fixed window offset, for centroid scoring only."""
    return rotate(q, params.window_offset, params)
