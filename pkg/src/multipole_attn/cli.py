"""Command-line interface: gen, decode, oracle, bench, sweep, audit.

Configuration is a flat key=value file plus --set overrides; every
EngineConfig field is addressable (hierarchy via hierarchy=two-level,
r1=, r2=, promote_fraction=).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench, clustering, pipeline
from .core import (
    EngineConfig,
    HeadLayout,
    HierarchyConfig,
    gen_synthetic,
    load_trace,
    write_trace,
)

_INT_FIELDS = {
    "block_size",
    "alpha",
    "local_buffer",
    "sink_tokens",
    "token_budget",
    "tokens_per_centroid",
    "prefill_kmeans_iters",
    "refine_kmeans_iters",
    "window_offset",
    "seed",
}
_FLOAT_FIELDS = {"rope_theta"}
_HIER_FIELDS = {"r1": int, "r2": int, "promote_fraction": float}


def parse_config(path: str | None, overrides: list[str]) -> EngineConfig:
    raw: dict[str, str] = {}
    if path:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                raw[key.strip()] = value.strip()
    for item in overrides:
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()

    kwargs: dict = {}
    hier: dict = {}
    hier_on = False
    for key, value in raw.items():
        if key == "hierarchy":
            hier_on = value in ("two-level", "on", "true", "1")
        elif key in _HIER_FIELDS:
            hier[key] = _HIER_FIELDS[key](value)
            hier_on = True
        elif key in _INT_FIELDS:
            kwargs[key] = int(value)
        elif key in _FLOAT_FIELDS:
            kwargs[key] = float(value)
        else:
            raise SystemExit(f"unknown config key: {key}")
    if hier_on:
        kwargs["hierarchy"] = HierarchyConfig(**hier)
    return EngineConfig(**kwargs)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field (repeatable)",
    )


def cmd_gen(args) -> int:
    layout = HeadLayout(
        num_q_heads=args.q_heads, num_kv_heads=args.kv_heads, head_dim=args.head_dim
    )
    trace = gen_synthetic(
        num_clusters_true=args.clusters,
        seq_len=args.seq_len,
        layout=layout,
        noise_sigma=args.noise,
        seed=args.seed,
        decode_steps=args.decode_steps,
    )
    write_trace(trace, args.out)
    print(
        f"wrote {args.out}: prompt={trace.prompt_len} steps={trace.decode_steps} "
        f"q_heads={layout.num_q_heads} kv_heads={layout.num_kv_heads} d={layout.head_dim}"
    )
    return 0


def cmd_decode(args) -> int:
    trace = load_trace(args.trace)
    cfg = parse_config(args.config, args.overrides)
    reports = pipeline.run(
        trace, cfg, mode=args.mode, oracle=args.oracle, max_steps=args.max_steps
    )
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for report in reports:
            out.write(bench.report_to_json_line(report) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_oracle(args) -> int:
    trace = load_trace(args.trace)
    cfg = parse_config(args.config, args.overrides)
    reports = pipeline.run(
        trace, cfg, mode="oracle", max_steps=args.max_steps, collect_outputs=True
    )
    outputs = np.stack([r.outputs for r in reports])
    np.savez(args.out, outputs=outputs.astype(np.float32))
    print(f"wrote {args.out}: outputs shape {outputs.shape}")
    return 0


def cmd_bench(args) -> int:
    trace = load_trace(args.trace)
    cfg = parse_config(args.config, args.overrides)
    result = bench.microbench(trace, cfg, repeats=args.repeats)
    print(bench.microbench_table(result))
    return 0


def cmd_sweep(args) -> int:
    trace = load_trace(args.trace)
    cfg = parse_config(args.config, args.overrides)
    caster = float if args.axis == "p" else int
    values = [caster(v) for v in args.values.split(",")]
    rows = bench.sweep(trace, cfg, args.axis, values, max_steps=args.max_steps)
    text = bench.sweep_csv(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_audit(args) -> int:
    trace = load_trace(args.trace)
    cfg = parse_config(args.config, args.overrides)
    try:
        pipeline.run(trace, cfg, mode="multipole", audit=True, max_steps=args.max_steps)
    except clustering.LedgerAuditError as exc:
        print(f"AUDIT FAILED: {exc}", file=sys.stderr)
        return 1
    print("audit passed: all ledger invariants held at every update")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="multipole-attn",
        description="Centroid-based approximate decode attention engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic trace file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--seq-len", type=int, default=4096)
    p.add_argument("--decode-steps", type=int, default=64)
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--q-heads", type=int, default=8)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=64)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("decode", help="replay a trace, emitting JSONL reports")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=pipeline.MODES, default="multipole")
    p.add_argument("--oracle", action="store_true", help="record error vs exact attention")
    p.add_argument("--out")
    p.add_argument("--max-steps", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("oracle", help="exact attention outputs to an .npz file")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="per-stage wall-clock micro-benchmark")
    p.add_argument("--trace", required=True)
    p.add_argument("--repeats", type=int, default=50)
    _add_config_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="parameter sweep to CSV")
    p.add_argument("--trace", required=True)
    p.add_argument("--axis", choices=["budget", "r", "W", "p"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out")
    p.add_argument("--max-steps", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit", help="replay with ledger invariant audits")
    p.add_argument("--trace", required=True)
    p.add_argument("--max-steps", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_audit)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
