"""Event-driven oracle for the two-stage slice pipeline.

Independent of the closed recurrence in the engine: two stations (prepare,
transmit) are simulated with an event queue, a bounded pool of slice slots
between them, and strictly in-order service at both stations.  Used to
cross-check ``pipeline_time`` on arbitrary parameter combinations.
"""

from __future__ import annotations

import heapq


def pipeline_des(
    sizes: list[int],
    prep_bw: float,
    k0: float,
    wire_bw: float,
    latency: float,
    ring_capacity: int,
) -> float:
    sizes = list(sizes)
    if not sizes:
        return 0.0
    prep = [s / prep_bw + k0 for s in sizes]
    wire = [s / wire_bw + latency for s in sizes]
    n = len(sizes)

    events: list[tuple[float, int, str, int]] = []
    seq = 0
    prep_idle = True
    wire_idle = True
    awaiting: list[int] = []  # prepared slices queued for the wire, in order
    slots_used = 0  # prepared or in-preparation slices whose slot is not yet free
    next_slice = 0
    finished_at = 0.0

    def push(t: float, kind: str, idx: int) -> None:
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, idx))
        seq += 1

    def start_prep(t: float) -> None:
        nonlocal prep_idle, slots_used, next_slice
        if prep_idle and next_slice < n and slots_used < ring_capacity:
            i = next_slice
            next_slice += 1
            slots_used += 1
            prep_idle = False
            push(t + prep[i], "prep_done", i)

    def start_wire(t: float) -> None:
        nonlocal wire_idle
        if wire_idle and awaiting:
            i = awaiting.pop(0)
            wire_idle = False
            push(t + wire[i], "wire_done", i)

    start_prep(0.0)
    while events:
        t, _, kind, i = heapq.heappop(events)
        if kind == "prep_done":
            prep_idle = True
            awaiting.append(i)
        else:
            wire_idle = True
            slots_used -= 1
            finished_at = t
        start_wire(t)
        start_prep(t)
    return finished_at
