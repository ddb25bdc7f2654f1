"""The benchmark matrix end to end, without the command line.

One cell per (pattern, sequence length); all variants of a cell share the
same routing, so their rows are directly comparable.  The same grid is
available as ``shuffleforge-bench`` with identical output.
"""

import sys

from shuffleforge.bench import BenchConfig, render, run_matrix
from shuffleforge.engine import run_baseline, run_exchange
from shuffleforge.routing import gen_imbalanced
from shuffleforge.topology import preset

topo, placement = preset("large")

# A single exchange first: the fused engine against the disaggregated
# baseline on the balancer's favorite regime.
a = gen_imbalanced(8192, 8, topo, placement, seed=2026)
fused = run_exchange(a, topo, placement, 14336, materialize=False)
base = run_baseline(a, topo, placement, 14336, materialize=False)
print(f"fused:    {fused.total_s * 1e3:8.3f} ms "
      f"({fused.dispatch_report.inter_node_bytes >> 20} MiB inter-node dispatch)")
print(f"baseline: {base.total_s * 1e3:8.3f} ms "
      f"({base.standalone_rearrange_bytes >> 20} MiB of pure rearrangement)")
print(f"speedup:  {base.total_s / fused.total_s:8.3f}x\n")

# Now the grid.  Markdown output lands on stdout; --format csv/json are a
# flag away on the CLI.
cfg = BenchConfig(
    topo=topo,
    placement=placement,
    patterns=("imbalanced", "single_node"),
    seq_lens=(4096, 8192),
    ablations=("planner", "balancer"),
)
sys.stdout.write(render(run_matrix(cfg), "md"))
