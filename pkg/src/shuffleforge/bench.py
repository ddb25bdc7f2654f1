"""Benchmark matrix and command line front end.

Runs the fused engine, the disaggregated baseline and any requested
ablations over a grid of traffic patterns and sequence lengths, then emits
one row per (pattern, seq_len, variant) as CSV, JSON or a markdown table.
Analytic rows are deterministic for a fixed seed, byte for byte, which the
JSON config fingerprint makes easy to verify.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import (
    ABLATIONS,
    CostModel,
    run_baseline,
    run_exchange,
)
from .planner import dedup_ratio, plan_to_json
from .routing import GENERATORS, RoutingAssignment, generate, load_trace
from .topology import ClusterTopology, ExpertPlacement, load_topology, preset

SCHEMA_ID = "shuffleforge/bench-result/1"
THREADS_ENV = "SHUFFLEFORGE_THREADS"

DEFAULT_SEQ_LENS = (4096, 8192, 16384, 32768)
DEFAULT_TOKEN_BYTES = 14336
DEFAULT_TOPK = 8

VARIANT_ABLATE = {
    "dcomm_off": "dcomm",
    "planner_off": "planner",
    "balancer_off": "balancer",
}

ROW_FIELDS = (
    "pattern",
    "seq_len",
    "variant",
    "mode",
    "balancer",
    "preprocess_s",
    "rearrange_s",
    "communicate_s",
    "total_s",
    "inter_node_bytes",
    "intra_node_bytes",
    "intra_gpu_bytes",
    "rearrange_bytes",
    "dedup_ratio",
)


@dataclass
class BenchConfig:
    topo: ClusterTopology
    placement: ExpertPlacement
    patterns: tuple[str, ...] = tuple(sorted(GENERATORS))
    seq_lens: tuple[int, ...] = DEFAULT_SEQ_LENS
    topk: int = DEFAULT_TOPK
    token_bytes: int = DEFAULT_TOKEN_BYTES
    balancer: str = "greedy"
    mode: str = "analytic"
    ablations: tuple[str, ...] = ()
    seed: int = 0
    cost: CostModel = field(default_factory=CostModel)
    trace: RoutingAssignment | None = None
    trace_label: str = "trace"

    def fingerprint_doc(self) -> dict:
        doc = {
            "num_nodes": self.topo.num_nodes,
            "gpus_per_node": self.topo.gpus_per_node,
            "intra_bw": self.topo.intra_bw,
            "inter_bw": self.topo.inter_bw,
            "inter_latency": self.topo.inter_latency,
            "gpu_prep_bw": self.topo.gpu_prep_bw,
            "slice_bytes": self.topo.slice_bytes,
            "num_experts": self.placement.num_experts,
            "placement": self.placement.owner.tolist(),
            "patterns": list(self.patterns),
            "seq_lens": list(self.seq_lens),
            "topk": self.topk,
            "token_bytes": self.token_bytes,
            "balancer": self.balancer,
            "mode": self.mode,
            "ablations": list(self.ablations),
            "seed": self.seed,
            "k0": self.cost.k0,
            "ring_capacity": self.cost.ring_capacity,
            "trace": self.trace_label if self.trace is not None else None,
        }
        return doc

    def fingerprint(self) -> str:
        blob = json.dumps(self.fingerprint_doc(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _variants(cfg: BenchConfig) -> list[str]:
    out = ["fused", "baseline"]
    for name, ablate in VARIANT_ABLATE.items():
        if ablate in cfg.ablations:
            if cfg.mode == "wallclock" and ablate == "dcomm":
                continue
            out.append(name)
    return out


def _cells(cfg: BenchConfig) -> list[tuple[str, int]]:
    if cfg.trace is not None:
        return [(cfg.trace_label, cfg.trace.num_tokens)]
    return [(p, s) for p in cfg.patterns for s in cfg.seq_lens]


def _cell_assignment(cfg: BenchConfig, index: int, pattern: str, seq_len: int):
    if cfg.trace is not None:
        return cfg.trace
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    return generate(pattern, seq_len, cfg.topk, cfg.topo, cfg.placement, rng)


def _phase_row(pattern, seq_len, variant, balancer_label, ratio, d_rep, c_rep) -> dict:
    return {
        "pattern": pattern,
        "seq_len": seq_len,
        "variant": variant,
        "mode": d_rep.mode,
        "balancer": balancer_label,
        "preprocess_s": d_rep.preprocess_s + c_rep.preprocess_s,
        "rearrange_s": d_rep.rearrange_s + c_rep.rearrange_s,
        "communicate_s": d_rep.communicate_s + c_rep.communicate_s,
        "total_s": d_rep.total_s + c_rep.total_s,
        "inter_node_bytes": d_rep.inter_node_bytes + c_rep.inter_node_bytes,
        "intra_node_bytes": d_rep.intra_node_bytes + c_rep.intra_node_bytes,
        "intra_gpu_bytes": d_rep.intra_gpu_bytes + c_rep.intra_gpu_bytes,
        "rearrange_bytes": d_rep.rearrange_bytes + c_rep.rearrange_bytes,
        "dedup_ratio": ratio,
    }


def run_cell(cfg: BenchConfig, index: int, pattern: str, seq_len: int) -> list[dict]:
    """All variant rows for one (pattern, seq_len) cell, same routing."""
    assignment = _cell_assignment(cfg, index, pattern, seq_len)
    ratio = dedup_ratio(assignment, cfg.topo, cfg.placement)
    materialize = cfg.mode == "wallclock"
    rows = []
    for variant in _variants(cfg):
        if variant == "baseline":
            res = run_baseline(
                assignment,
                cfg.topo,
                cfg.placement,
                cfg.token_bytes,
                mode=cfg.mode,
                cost=cfg.cost,
                materialize=False,
                payload_seed=cfg.seed,
            )
            rows.append(
                _phase_row(pattern, seq_len, variant, "-", ratio,
                           res.dispatch_report, res.combine_report)
            )
            continue
        ablate = ()
        balancer_label = cfg.balancer
        if variant in VARIANT_ABLATE:
            ablate = (VARIANT_ABLATE[variant],)
            if variant == "planner_off":
                balancer_label = "-"
            elif variant == "balancer_off":
                balancer_label = "static"
        res = run_exchange(
            assignment,
            cfg.topo,
            cfg.placement,
            cfg.token_bytes,
            balancer=cfg.balancer,
            mode=cfg.mode,
            cost=cfg.cost,
            ablate=ablate,
            materialize=materialize,
            payload_seed=cfg.seed,
        )
        rows.append(
            _phase_row(pattern, seq_len, variant, balancer_label, ratio,
                       res.dispatch_report, res.combine_report)
        )
    return rows


def run_matrix(cfg: BenchConfig) -> dict:
    """The full grid; cells run in a thread pool, assembly is ordered.

    ``SHUFFLEFORGE_THREADS`` caps the pool.  Wallclock cells run one at a
    time regardless, since their timings are measurements.
    """
    cells = _cells(cfg)
    if cfg.mode == "wallclock":
        threads = 1
    else:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else min(4, max(1, len(cells)))
        threads = max(1, threads)
    if threads == 1:
        per_cell = [run_cell(cfg, i, p, s) for i, (p, s) in enumerate(cells)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(run_cell, cfg, i, p, s)
                for i, (p, s) in enumerate(cells)
            ]
            per_cell = [f.result() for f in futures]
    rows = [row for cell_rows in per_cell for row in cell_rows]
    return {
        "schema": SCHEMA_ID,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.fingerprint_doc(),
        "rows": rows,
    }


def emit_json(doc: dict, fh) -> None:
    json.dump(doc, fh, indent=2, sort_keys=True)
    fh.write("\n")


def emit_csv(doc: dict, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in doc["rows"]:
        writer.writerow(row)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_md(doc: dict, fh) -> None:
    fields = ROW_FIELDS
    rows = doc["rows"]
    baseline_total = {
        (r["pattern"], r["seq_len"]): r["total_s"]
        for r in rows
        if r["variant"] == "baseline"
    }
    header = list(fields) + ["vs_baseline"]
    cells = []
    for r in rows:
        base = baseline_total.get((r["pattern"], r["seq_len"]))
        if base and r["total_s"] > 0:
            speedup = f"{base / r['total_s']:.3f}x"
        else:
            speedup = "-"
        cells.append([_fmt(r[f]) for f in fields] + [speedup])
    widths = [
        max(len(header[i]), *(len(c[i]) for c in cells)) if cells else len(header[i])
        for i in range(len(header))
    ]
    def line(parts):
        return "| " + " | ".join(p.ljust(widths[i]) for i, p in enumerate(parts)) + " |\n"
    fh.write(line(header))
    fh.write("|" + "|".join("-" * (w + 2) for w in widths) + "|\n")
    for c in cells:
        fh.write(line(c))
    fh.write(f"\nconfig fingerprint: {doc['fingerprint']}\n")


EMITTERS = {"json": emit_json, "csv": emit_csv, "md": emit_md}


def render(doc: dict, fmt: str) -> str:
    buf = io.StringIO()
    EMITTERS[fmt](doc, buf)
    return buf.getvalue()


def _load_topology_arg(arg: str) -> tuple[ClusterTopology, ExpertPlacement]:
    if arg in ("test", "large"):
        return preset(arg)
    path = Path(arg)
    if not path.exists():
        raise FileNotFoundError(f"topology {arg!r}: no such preset or file")
    return load_topology(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shuffleforge-bench",
        description="Benchmark fused token shuffling against a disaggregated"
        " baseline on a simulated GPU cluster.",
    )
    parser.add_argument(
        "--pattern",
        choices=sorted(GENERATORS) + ["all"],
        default="all",
        help="traffic pattern to run (default: all)",
    )
    parser.add_argument(
        "--seq-len",
        type=int,
        action="append",
        help=f"tokens per run; repeatable (default: {list(DEFAULT_SEQ_LENS)})",
    )
    parser.add_argument(
        "--topology",
        default="large",
        help="preset name (test, large) or path to a topology JSON file",
    )
    parser.add_argument(
        "--balancer",
        choices=["greedy", "static", "optimal"],
        default="greedy",
        help="group assignment scheme for the fused engine",
    )
    parser.add_argument(
        "--mode",
        choices=["analytic", "wallclock"],
        default="analytic",
        help="cost-model times, or threaded execution with measured times",
    )
    parser.add_argument(
        "--ablate",
        action="append",
        choices=list(ABLATIONS),
        default=None,
        help="add an ablated variant to the matrix; repeatable",
    )
    parser.add_argument(
        "--trace",
        help="routing trace JSON; replaces the generated patterns",
    )
    parser.add_argument("--out", help="output path (default: stdout)")
    parser.add_argument(
        "--format",
        choices=sorted(EMITTERS),
        default="md",
        help="output format",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--dump-plan",
        help="also write the first cell's dispatch/combine plans as JSON",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        topo, placement = _load_topology_arg(args.topology)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    patterns = tuple(sorted(GENERATORS)) if args.pattern == "all" else (args.pattern,)
    seq_lens = tuple(args.seq_len) if args.seq_len else DEFAULT_SEQ_LENS
    token_bytes = DEFAULT_TOKEN_BYTES

    trace = None
    trace_label = "trace"
    if args.trace:
        try:
            trace, token_bytes = load_trace(args.trace)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: trace {args.trace!r}: {exc}", file=sys.stderr)
            return 2
        trace_label = Path(args.trace).name

    cfg = BenchConfig(
        topo=topo,
        placement=placement,
        patterns=patterns,
        seq_lens=seq_lens,
        token_bytes=token_bytes,
        balancer=args.balancer,
        mode=args.mode,
        ablations=tuple(dict.fromkeys(args.ablate)) if args.ablate else (),
        seed=args.seed,
        trace=trace,
        trace_label=trace_label,
    )

    try:
        if args.dump_plan:
            first = _cells(cfg)[0]
            assignment = _cell_assignment(cfg, 0, *first)
            res = run_exchange(
                assignment,
                cfg.topo,
                cfg.placement,
                cfg.token_bytes,
                balancer=cfg.balancer,
                cost=cfg.cost,
                materialize=False,
            )
            with open(args.dump_plan, "w") as fh:
                json.dump(
                    {
                        "dispatch": plan_to_json(res.dispatch_plan),
                        "combine": plan_to_json(res.combine_plan),
                    },
                    fh,
                    indent=2,
                    sort_keys=True,
                )
                fh.write("\n")
        doc = run_matrix(cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    text = render(doc, args.format)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
