import numpy as np
import pytest

from multipole_attn import EngineConfig, HeadLayout, gen_synthetic


@pytest.fixture(scope="session")
def small_layout():
    return HeadLayout(num_q_heads=8, num_kv_heads=2, head_dim=16)


@pytest.fixture(scope="session")
def small_trace(small_layout):
    return gen_synthetic(
        num_clusters_true=8,
        seq_len=600,
        layout=small_layout,
        noise_sigma=0.05,
        seed=11,
        decode_steps=20,
    )


@pytest.fixture(scope="session")
def small_cfg():
    return EngineConfig(
        block_size=256,
        alpha=128,
        local_buffer=16,
        sink_tokens=5,
        token_budget=64,
        seed=11,
    )


def random_trace(seed, seq_len=None, d=None, group_size=None, decode_steps=4):
    """Randomized trace helper used across suites."""
    rng = np.random.default_rng(seed)
    seq_len = seq_len or int(rng.integers(80, 800))
    d = d or int(rng.choice([16, 64]))
    group_size = group_size or int(rng.choice([1, 4]))
    nkv = int(rng.choice([1, 2]))
    layout = HeadLayout(num_q_heads=nkv * group_size, num_kv_heads=nkv, head_dim=d)
    return gen_synthetic(
        num_clusters_true=int(rng.integers(2, 12)),
        seq_len=seq_len,
        layout=layout,
        noise_sigma=float(rng.uniform(0.01, 0.3)),
        seed=int(rng.integers(0, 2**31)),
        decode_steps=decode_steps,
    )
