"""Two-level plans: how deduplication shrinks inter-node traffic.

A token routed to several experts on the same remote node crosses the wire
once, lands at one forwarder GPU, and fans out over the intra-node fabric.
The effect is largest when expert choices cluster: with all of a token's
experts on a single remote node, the dispatch volume drops by a factor of
exactly topk.
"""

from shuffleforge.planner import (
    build_plan_pair,
    dedup_ratio,
    dispatch_loads,
    naive_inter_node_bytes,
)
from shuffleforge.routing import gen_realworld, gen_single_node
from shuffleforge.topology import preset

topo, placement = preset("test")
token_bytes = 2048

for gen, label in ((gen_realworld, "realworld"), (gen_single_node, "single_node")):
    a = gen(512, 4, topo, placement, seed=0)
    naive = naive_inter_node_bytes(a, placement, topo, token_bytes)
    dedup = int(dispatch_loads(a, placement, topo, token_bytes).sum())
    print(f"{label}: naive {naive >> 10} KiB, dedup {dedup >> 10} KiB, "
          f"ratio {dedup_ratio(a, topo, placement):.2f}")

# The plan itself: node-level transfers funnel through forwarders, the
# expert level distributes rows inside each node.
a = gen_single_node(512, 4, topo, placement, seed=0)
dispatch, combine, groups = build_plan_pair(a, topo, placement, token_bytes)
print("\ngroup table (rows are nodes, columns are groups):")
print(groups)
print(f"dispatch: {len(dispatch.node_transfers)} node transfers, "
      f"{sum(len(v) for v in dispatch.local_edges.values())} local edges")
fwd = dispatch.node_transfers[0]
print(f"first transfer: GPU {fwd.src_flat} -> forwarder {fwd.dst_flat} "
      f"on node {fwd.dest_node}, {fwd.bytes >> 10} KiB on channel {fwd.channel}")

# Combine carries every expert output home, so its volume matches the
# naive count: distinct results cannot be deduplicated.
print(f"combine inter-node volume: {combine.inter_bytes_total >> 10} KiB "
      f"(naive {naive_inter_node_bytes(a, placement, topo, token_bytes) >> 10} KiB)")
