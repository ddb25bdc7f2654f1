"""The two-stage transfer pipeline and what overlap buys.

Every transfer is cut into slices; each slice is gathered at preparation
bandwidth, parked in a bounded ring, and transmitted in order.  After the
first slice the wire never waits, so against serial execution the overlap
hides the preparation of every slice but one.
"""

import numpy as np

from shuffleforge.engine import CostModel, pipeline_time, slice_sizes, unpipelined_wire_time
from shuffleforge.topology import preset

topo, _ = preset("large")
cost = CostModel()

print(f"slice {topo.slice_bytes >> 20} MiB, prep {topo.gpu_prep_bw / 1e9:.0f} GB/s, "
      f"wire {topo.inter_bw / 1e9:.0f} GB/s, latency {topo.inter_latency * 1e6:.0f} us\n")

print(f"{'size':>8} {'slices':>6} {'pipelined':>11} {'serial':>11} {'hidden':>8}")
for mib in (1, 4, 16, 64):
    nbytes = mib << 20
    sizes = slice_sizes(nbytes, topo.slice_bytes)
    prep = sizes / topo.gpu_prep_bw + cost.k0
    wire = sizes / topo.inter_bw + topo.inter_latency
    serial = float(prep.sum() + wire.sum())
    piped = pipeline_time(nbytes, topo, cost)
    print(f"{mib:>4} MiB {sizes.size:>6} {piped * 1e6:>9.1f}us {serial * 1e6:>9.1f}us "
          f"{(serial - piped) * 1e6:>6.1f}us")

# With uniform slices and preparation faster than the wire the recurrence
# collapses to one preparation plus back-to-back wire slots.
nbytes = 32 << 20
s = nbytes // topo.slice_bytes
p = topo.slice_bytes / topo.gpu_prep_bw + cost.k0
c = topo.slice_bytes / topo.inter_bw + topo.inter_latency
print(f"\nclosed form p + S*c: {(p + s * c) * 1e6:.1f} us")
print(f"recurrence:          {pipeline_time(nbytes, topo, cost) * 1e6:.1f} us")

print(f"\nunpipelined single message, 32 MiB: "
      f"{unpipelined_wire_time(nbytes, topo) * 1e6:.1f} us on the wire alone")
