"""Transfer engine: execute plans, model their cost, or both.

Two execution modes share the same plans and produce the same bytes:

* ``analytic``: copies run sequentially on the host; phase times come from
  a two-stage pipeline model (slice preparation overlapped with wire
  transfer through a bounded ring of slice buffers).
* ``wallclock``: one worker thread per simulated GPU drives its own sends,
  receives and local copies through bounded rings with token-bucket rate
  limits, all polling non-blocking, so the run finishes without any global
  barrier and the elapsed time is measured rather than modeled.

The disaggregated baseline executes the same traffic as separate pack,
all-to-all and unpack stages, the way a shuffle built from a generic
collective has to, and charges the two extra memory passes per direction
that fusion removes.
"""

from __future__ import annotations

import functools
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .descriptor import DescriptorList
from .planner import (
    CommPlan,
    build_direct_plans,
    build_plan_pair,
    buffer_name,
)
from .routing import RoutingAssignment
from .topology import ClusterTopology, ExpertPlacement

ABLATIONS = ("dcomm", "planner", "balancer")

# Fixed per-descriptor-list overhead, and how many slices may sit prepared
# but not yet transmitted.
DEFAULT_K0 = 2e-6
DEFAULT_RING_CAPACITY = 8


@dataclass(frozen=True)
class CostModel:
    k0: float = DEFAULT_K0
    ring_capacity: int = DEFAULT_RING_CAPACITY

    def __post_init__(self) -> None:
        if self.k0 < 0:
            raise ValueError("k0 must be non-negative")
        if self.ring_capacity < 2:
            raise ValueError("pipelining needs a ring of at least two slices")


@dataclass
class PhaseReport:
    """Cost summary of one direction (dispatch or combine)."""

    direction: str
    mode: str
    preprocess_s: float
    rearrange_s: float
    communicate_s: float
    inter_node_bytes: int
    intra_node_bytes: int
    intra_gpu_bytes: int
    rearrange_bytes: int

    @property
    def total_s(self) -> float:
        return self.preprocess_s + self.rearrange_s + self.communicate_s

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "mode": self.mode,
            "preprocess_s": self.preprocess_s,
            "rearrange_s": self.rearrange_s,
            "communicate_s": self.communicate_s,
            "total_s": self.total_s,
            "inter_node_bytes": self.inter_node_bytes,
            "intra_node_bytes": self.intra_node_bytes,
            "intra_gpu_bytes": self.intra_gpu_bytes,
            "rearrange_bytes": self.rearrange_bytes,
        }


def slice_sizes(total_bytes: int, slice_bytes: int) -> np.ndarray:
    """Sizes of the wire chunks covering ``total_bytes``: full slices, then
    whatever remains."""
    if total_bytes == 0:
        return np.zeros(0, dtype=np.int64)
    full, rem = divmod(total_bytes, slice_bytes)
    sizes = np.full(full + (1 if rem else 0), slice_bytes, dtype=np.int64)
    if rem:
        sizes[-1] = rem
    return sizes


def pipeline_time(total_bytes: int, topo: ClusterTopology, cost: CostModel) -> float:
    """Completion time of one pipelined transfer.

    Slice ``i`` is prepared (gathered at ``gpu_prep_bw``, plus ``k0``) and
    then transmitted (at ``inter_bw``, plus ``inter_latency``).  Preparation
    of slice ``i`` may start once slice ``i-1`` left the preparation stage
    and slice ``i - ring_capacity`` has left the wire, freeing its ring
    slot; the wire sends slices in order, one at a time.  When all slices
    are equal and preparation is not the bottleneck this telescopes to
    ``p + S*c``: one preparation, then the wire runs back to back.
    """
    sizes = slice_sizes(total_bytes, topo.slice_bytes)
    if sizes.size == 0:
        return 0.0
    r = cost.ring_capacity
    prep = sizes / topo.gpu_prep_bw + cost.k0
    wire = sizes / topo.inter_bw + topo.inter_latency
    end1 = np.empty(sizes.size)
    end2 = np.empty(sizes.size)
    for i in range(sizes.size):
        s1 = end1[i - 1] if i > 0 else 0.0
        if i >= r:
            s1 = max(s1, end2[i - r])
        end1[i] = s1 + prep[i]
        s2 = max(end1[i], end2[i - 1]) if i > 0 else end1[i]
        end2[i] = s2 + wire[i]
    return float(end2[-1])


def unpipelined_wire_time(total_bytes: int, topo: ClusterTopology) -> float:
    """One message on the wire, no slicing, no overlap."""
    if total_bytes == 0:
        return 0.0
    return total_bytes / topo.inter_bw + topo.inter_latency


def _critical(totals: dict, extras: dict) -> tuple[float, float]:
    """Max total over keys, with the extra value of the argmax.

    Ties break on the smallest key so results never depend on dict order.
    """
    best = None
    for k in sorted(totals):
        if best is None or totals[k] > totals[best]:
            best = k
    if best is None:
        return 0.0, 0.0
    return totals[best], extras.get(best, 0.0)


def node_phase_times(
    plan: CommPlan, topo: ClusterTopology, cost: CostModel, pipelined: bool
) -> tuple[float, float]:
    """(phase time, rearrange share) of the inter-node phase.

    Transfers on the same channel serialize; channels run concurrently, so
    the phase lasts as long as its slowest channel.  Without fusion each
    transfer pays an explicit gather pass before and a scatter pass after
    the wire, which is the rearrange share.
    """
    totals: dict[tuple[str, int], float] = {}
    passes: dict[tuple[str, int], float] = {}
    for t in plan.node_transfers:
        if pipelined:
            took = pipeline_time(t.bytes, topo, cost)
            spent = 0.0
        else:
            spent = 2.0 * (t.bytes / topo.gpu_prep_bw + cost.k0)
            took = unpipelined_wire_time(t.bytes, topo) + spent
        totals[t.channel] = totals.get(t.channel, 0.0) + took
        passes[t.channel] = passes.get(t.channel, 0.0) + spent
    return _critical(totals, passes)


def expert_phase_times(
    plan: CommPlan, topo: ClusterTopology, cost: CostModel, fused: bool
) -> tuple[float, float]:
    """(phase time, rearrange share) of the intra-node phase.

    Each GPU serializes the copies it drives; GPUs proceed concurrently
    over the intra-node fabric.  Fused copies move straight between the
    endpoint buffers; unfused ones stage through a gather and a scatter
    pass at preparation bandwidth.
    """
    totals: dict[int, float] = {}
    passes: dict[int, float] = {}
    for node in sorted(plan.local_edges):
        for e in plan.local_edges[node]:
            same_gpu = e.src_flat == e.dst_flat
            if fused:
                bw = topo.gpu_prep_bw if same_gpu else min(topo.intra_bw, topo.gpu_prep_bw)
                took = e.bytes / bw + cost.k0
                spent = 0.0
            else:
                copy_bw = topo.gpu_prep_bw if same_gpu else topo.intra_bw
                spent = 2.0 * (e.bytes / topo.gpu_prep_bw + cost.k0)
                took = spent + e.bytes / copy_bw
            totals[e.src_flat] = totals.get(e.src_flat, 0.0) + took
            passes[e.src_flat] = passes.get(e.src_flat, 0.0) + spent
    return _critical(totals, passes)


def preprocess_time(plan: CommPlan, cost: CostModel) -> float:
    """Descriptor preparation: ``k0`` per descriptor list the plan carries."""
    lists = 2 * len(plan.node_transfers)
    lists += 2 * sum(len(edges) for edges in plan.local_edges.values())
    return cost.k0 * lists


def analytic_report(
    plan: CommPlan, topo: ClusterTopology, cost: CostModel, fused: bool
) -> PhaseReport:
    node_t, node_pass = node_phase_times(plan, topo, cost, pipelined=fused)
    expert_t, expert_pass = expert_phase_times(plan, topo, cost, fused=fused)
    rearrange_bytes = 0
    if not fused:
        rearrange_bytes = 2 * (
            plan.inter_bytes_total + plan.intra_bytes_total + plan.intra_gpu_bytes
        )
    rearrange_s = node_pass + expert_pass
    return PhaseReport(
        direction=plan.direction,
        mode="analytic",
        preprocess_s=preprocess_time(plan, cost),
        rearrange_s=rearrange_s,
        communicate_s=node_t + expert_t - rearrange_s,
        inter_node_bytes=plan.inter_bytes_total,
        intra_node_bytes=plan.intra_bytes_total,
        intra_gpu_bytes=plan.intra_gpu_bytes,
        rearrange_bytes=rearrange_bytes,
    )


def make_token_payloads(num_tokens: int, token_bytes: int, seed: int) -> np.ndarray:
    """Per-token payload bytes: packed float32 rows, so weighted combination
    is meaningful and content checks catch any misrouted segment."""
    if token_bytes % 4:
        raise ValueError("token_bytes must be a multiple of 4 (float32 payloads)")
    rng = np.random.default_rng(seed)
    width = token_bytes // 4
    vals = rng.standard_normal((num_tokens, width)).astype(np.float32)
    return vals.view(np.uint8).reshape(num_tokens, token_bytes)


def allocate_buffers(*plans: CommPlan) -> dict[str, np.ndarray]:
    sizes: dict[str, int] = {}
    for plan in plans:
        for name, nbytes in plan.buffer_bytes.items():
            sizes[name] = max(sizes.get(name, 0), nbytes)
    return {name: np.zeros(nbytes, dtype=np.uint8) for name, nbytes in sizes.items()}


def fill_token_buffers(
    plan: CommPlan, buffers: dict[str, np.ndarray], payloads: np.ndarray
) -> None:
    tb = plan.token_bytes
    for s, ids in plan.local_tokens.items():
        if ids.size:
            buffers[buffer_name("token", s)].reshape(ids.size, tb)[:] = payloads[ids]


def apply_node_level(plan: CommPlan, buffers: dict[str, np.ndarray]) -> None:
    for t in plan.node_transfers:
        data = t.send.gather(buffers[t.send.buffer_id])
        t.recv.scatter(data, buffers[t.recv.buffer_id])


def apply_expert_level(plan: CommPlan, buffers: dict[str, np.ndarray]) -> None:
    for node in sorted(plan.local_edges):
        for e in plan.local_edges[node]:
            data = e.send.gather(buffers[e.send.buffer_id])
            e.recv.scatter(data, buffers[e.recv.buffer_id])


def identity_expert(activations: np.ndarray, expert_ids: np.ndarray) -> np.ndarray:
    return activations


def scaled_expert(num_experts: int) -> "callable":
    """A cheap per-expert transform that makes mixups detectable: expert
    ``e`` scales by ``e + 2`` and shifts by ``e``."""

    def fn(activations: np.ndarray, expert_ids: np.ndarray) -> np.ndarray:
        scale = (expert_ids[:, None] + 2).astype(np.float32)
        shift = expert_ids[:, None].astype(np.float32)
        return activations * scale + shift

    return fn


def run_experts(
    plan: CommPlan, buffers: dict[str, np.ndarray], expert_fn
) -> None:
    """activation -> act_out on every GPU, via the row-aligned expert map."""
    tb = plan.token_bytes
    width = tb // 4
    for g, lay in sorted(plan.layouts.items()):
        dst = buffers[buffer_name("act_out", g)]
        if lay.num_rows == 0:
            continue
        act = buffers[buffer_name("activation", g)].view(np.float32)
        act = act.reshape(lay.num_rows, width)
        out = np.ascontiguousarray(expert_fn(act, lay.expert_ids), dtype=np.float32)
        if out.shape != (lay.num_rows, width):
            raise ValueError("expert function changed the activation shape")
        dst[:] = out.reshape(-1).view(np.uint8)


def _reduce_one(
    plan: CommPlan, buffers: dict[str, np.ndarray], s: int
) -> None:
    count = plan.local_tokens[s].size
    if count == 0:
        return
    tb = plan.token_bytes
    width = tb // 4
    k = plan.topk
    stag = buffers[buffer_name("staging", s)].view(np.float32).reshape(count, k, width)
    w = plan.reduce_weights[s]
    # Accumulate in float64, ascending k, so the result is reproducible
    # bit for bit no matter which mode produced the staging bytes.
    acc = np.zeros((count, width), dtype=np.float64)
    for col in range(k):
        acc += w[:, col, None] * stag[:, col, :].astype(np.float64)
    buffers[buffer_name("output", s)][:] = (
        acc.astype(np.float32).reshape(-1).view(np.uint8)
    )


def reduce_outputs(plan: CommPlan, buffers: dict[str, np.ndarray]) -> None:
    if plan.reduce_weights is None:
        raise ValueError("not a combine plan")
    for s in sorted(plan.local_tokens):
        _reduce_one(plan, buffers, s)


@dataclass
class ExchangeResult:
    """Everything a fused dispatch+combine run produced."""

    mode: str
    groups: np.ndarray | None
    dispatch_plan: CommPlan
    combine_plan: CommPlan
    dispatch_report: PhaseReport
    combine_report: PhaseReport
    payloads: np.ndarray | None
    buffers: dict[str, np.ndarray] | None

    def _buf(self, kind: str, g: int) -> np.ndarray:
        if self.buffers is None:
            raise ValueError("run was not materialized; no buffer contents")
        return self.buffers[buffer_name(kind, g)]

    def activation(self, g: int) -> np.ndarray:
        return self._buf("activation", g)

    def output(self, s: int) -> np.ndarray:
        return self._buf("output", s)

    def output_f32(self, s: int) -> np.ndarray:
        width = self.combine_plan.token_bytes // 4
        return self.output(s).view(np.float32).reshape(-1, width)

    @property
    def total_s(self) -> float:
        return self.dispatch_report.total_s + self.combine_report.total_s


def run_exchange(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    token_bytes: int,
    *,
    payload_seed: int = 0,
    balancer: str = "greedy",
    mode: str = "analytic",
    cost: CostModel | None = None,
    ablate: frozenset[str] | set[str] | tuple[str, ...] = (),
    expert_fn=identity_expert,
    materialize: bool = True,
) -> ExchangeResult:
    """Plan and execute one dispatch/combine exchange.

    ``ablate`` may contain ``"dcomm"`` (no fusion or pipelining: explicit
    rearrange passes around unpipelined messages), ``"planner"`` (no dedup
    or forwarding: per-(token, expert) point-to-point traffic) and
    ``"balancer"`` (static same-local-index groups).  With ``materialize``
    false only plans and cost reports are produced; nothing is copied.
    """
    cost = cost or CostModel()
    ablate = frozenset(ablate)
    unknown = ablate - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablations: {sorted(unknown)}")
    if mode not in ("analytic", "wallclock"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "wallclock" and "dcomm" in ablate:
        raise ValueError(
            "the dcomm ablation redefines the cost model only; wallclock mode"
            " measures elapsed time, so the combination is meaningless"
        )
    if token_bytes % 4 or token_bytes <= 0:
        raise ValueError("token_bytes must be a positive multiple of 4")
    assignment.validate(topo, placement)

    if "planner" in ablate:
        dispatch, combine = build_direct_plans(assignment, topo, placement, token_bytes)
        groups = None
    else:
        scheme = "static" if "balancer" in ablate else balancer
        dispatch, combine, groups = build_plan_pair(
            assignment, topo, placement, token_bytes, balancer=scheme
        )
    fused = "dcomm" not in ablate

    dispatch_report = analytic_report(dispatch, topo, cost, fused)
    combine_report = analytic_report(combine, topo, cost, fused)

    payloads = None
    buffers = None
    if mode == "wallclock" or materialize:
        payloads = make_token_payloads(assignment.num_tokens, token_bytes, payload_seed)
        buffers = allocate_buffers(dispatch, combine)
        fill_token_buffers(dispatch, buffers, payloads)
        if mode == "analytic":
            apply_node_level(dispatch, buffers)
            apply_expert_level(dispatch, buffers)
            run_experts(combine, buffers, expert_fn)
            apply_expert_level(combine, buffers)
            apply_node_level(combine, buffers)
            reduce_outputs(combine, buffers)
        else:
            elapsed_d = _wallclock_dispatch(dispatch, buffers, topo, cost)
            run_experts(combine, buffers, expert_fn)
            elapsed_c = _wallclock_combine(combine, buffers, topo, cost)
            dispatch_report = replace(
                dispatch_report, mode="wallclock", communicate_s=elapsed_d,
                rearrange_s=0.0,
            )
            combine_report = replace(
                combine_report, mode="wallclock", communicate_s=elapsed_c,
                rearrange_s=0.0,
            )

    return ExchangeResult(
        mode=mode,
        groups=groups,
        dispatch_plan=dispatch,
        combine_plan=combine,
        dispatch_report=dispatch_report,
        combine_report=combine_report,
        payloads=payloads,
        buffers=buffers,
    )


# ---------------------------------------------------------------------------
# Disaggregated baseline


@dataclass
class BaselineResult:
    dispatch_report: PhaseReport
    combine_report: PhaseReport
    payloads: np.ndarray | None
    buffers: dict[str, np.ndarray] | None
    combine_plan: CommPlan

    def activation(self, g: int) -> np.ndarray:
        if self.buffers is None:
            raise ValueError("run was not materialized; no buffer contents")
        return self.buffers[buffer_name("activation", g)]

    def output(self, s: int) -> np.ndarray:
        if self.buffers is None:
            raise ValueError("run was not materialized; no buffer contents")
        return self.buffers[buffer_name("output", s)]

    @property
    def total_s(self) -> float:
        return self.dispatch_report.total_s + self.combine_report.total_s

    @property
    def standalone_rearrange_bytes(self) -> int:
        return self.dispatch_report.rearrange_bytes + self.combine_report.rearrange_bytes


def _baseline_direction_report(
    direction: str,
    plan: CommPlan,
    topo: ClusterTopology,
    cost: CostModel,
) -> PhaseReport:
    """Stage times for one disaggregated direction.

    Pack and unpack are full passes over every routed row on each GPU (no
    dedup, so a row per (token, expert) pair); the all-to-all in between is
    unpipelined, each sender's messages serialized on its NIC.
    """
    tb = plan.token_bytes
    m = topo.gpus_per_node
    pack_bytes: dict[int, int] = {}
    unpack_bytes: dict[int, int] = {}
    wire: dict[int, float] = {}
    inter = intra = intra_gpu = 0
    for t in plan.node_transfers:
        pack_bytes[t.src_flat] = pack_bytes.get(t.src_flat, 0) + t.bytes
        unpack_bytes[t.dst_flat] = unpack_bytes.get(t.dst_flat, 0) + t.bytes
        wire[t.src_flat] = wire.get(t.src_flat, 0.0) + unpipelined_wire_time(t.bytes, topo)
        inter += t.bytes
    for node in sorted(plan.local_edges):
        for e in plan.local_edges[node]:
            pack_bytes[e.src_flat] = pack_bytes.get(e.src_flat, 0) + e.bytes
            unpack_bytes[e.dst_flat] = unpack_bytes.get(e.dst_flat, 0) + e.bytes
            if e.src_flat == e.dst_flat:
                wire[e.src_flat] = wire.get(e.src_flat, 0.0) + e.bytes / topo.gpu_prep_bw
                intra_gpu += e.bytes
            else:
                wire[e.src_flat] = wire.get(e.src_flat, 0.0) + e.bytes / topo.intra_bw
                intra += e.bytes

    pack_t = max(
        (b / topo.gpu_prep_bw + cost.k0 for b in pack_bytes.values()), default=0.0
    )
    unpack_t = max(
        (b / topo.gpu_prep_bw + cost.k0 for b in unpack_bytes.values()), default=0.0
    )
    comm_t = max(wire.values(), default=0.0)
    total_rows_bytes = inter + intra + intra_gpu
    lists = 2 * topo.num_gpus + len(plan.node_transfers) + sum(
        len(v) for v in plan.local_edges.values()
    )
    return PhaseReport(
        direction=direction,
        mode="analytic",
        preprocess_s=cost.k0 * lists,
        rearrange_s=pack_t + unpack_t,
        communicate_s=comm_t,
        inter_node_bytes=inter,
        intra_node_bytes=intra,
        intra_gpu_bytes=intra_gpu,
        rearrange_bytes=2 * total_rows_bytes,
    )


def run_baseline(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    token_bytes: int,
    *,
    payload_seed: int = 0,
    mode: str = "analytic",
    cost: CostModel | None = None,
    expert_fn=identity_expert,
    materialize: bool = True,
) -> BaselineResult:
    """Disaggregated shuffle: pack, all-to-all, unpack, in both directions.

    Moves the same rows as the direct (no-dedup) plan into the very same
    activation and staging layouts, so outputs are interchangeable with the
    fused engine's; only the cost differs.  Every direction pays two full
    memory passes (pack to device-major wire order, unpack to the expert's
    row order) that the fused engine does not.  In wallclock mode the pack
    and unpack passes really run and their elapsed time is measured.
    """
    cost = cost or CostModel()
    if mode not in ("analytic", "wallclock"):
        raise ValueError(f"unknown mode {mode!r}")
    if token_bytes % 4 or token_bytes <= 0:
        raise ValueError("token_bytes must be a positive multiple of 4")
    assignment.validate(topo, placement)
    dispatch, combine = build_direct_plans(assignment, topo, placement, token_bytes)
    dispatch_report = _baseline_direction_report("dispatch", dispatch, topo, cost)
    combine_report = _baseline_direction_report("combine", combine, topo, cost)

    payloads = None
    buffers = None
    if mode == "wallclock" or materialize:
        payloads = make_token_payloads(assignment.num_tokens, token_bytes, payload_seed)
        buffers = allocate_buffers(dispatch, combine)
        fill_token_buffers(dispatch, buffers, payloads)
        if mode == "analytic":
            # The staging detour adds copies but lands identical bytes, so
            # the execution reuses the direct plan's moves.
            apply_node_level(dispatch, buffers)
            apply_expert_level(dispatch, buffers)
            run_experts(combine, buffers, expert_fn)
            apply_expert_level(combine, buffers)
            apply_node_level(combine, buffers)
            reduce_outputs(combine, buffers)
        else:
            d_pack, d_comm, d_unpack = _wallclock_baseline_direction(
                dispatch, buffers, topo, cost
            )
            run_experts(combine, buffers, expert_fn)
            c_pack, c_comm, c_unpack = _wallclock_baseline_direction(
                combine, buffers, topo, cost
            )
            # The fused engine reduces inside its measured combine window,
            # so the weighted reduction is timed into this one as well.
            t0 = time.perf_counter()
            reduce_outputs(combine, buffers)
            c_comm += time.perf_counter() - t0
            dispatch_report = replace(
                dispatch_report, mode="wallclock",
                rearrange_s=d_pack + d_unpack, communicate_s=d_comm,
            )
            combine_report = replace(
                combine_report, mode="wallclock",
                rearrange_s=c_pack + c_unpack, communicate_s=c_comm,
            )
    return BaselineResult(
        dispatch_report=dispatch_report,
        combine_report=combine_report,
        payloads=payloads,
        buffers=buffers,
        combine_plan=combine,
    )


def standalone_rearrange_bytes(num_tokens: int, topk: int, token_bytes: int) -> int:
    """Four full passes over the routed rows: pack and unpack, twice."""
    return 4 * num_tokens * topk * token_bytes


# ---------------------------------------------------------------------------
# Wallclock machinery


class RingBuffer:
    """Bounded FIFO of slices between one sender and one receiver."""

    def __init__(self, capacity: int) -> None:
        self._items: deque = deque()
        self._capacity = capacity
        self._lock = threading.Lock()

    def try_push(self, item) -> bool:
        with self._lock:
            if len(self._items) >= self._capacity:
                return False
            self._items.append(item)
            return True

    def try_pop(self):
        with self._lock:
            return self._items.popleft() if self._items else None

    def full(self) -> bool:
        with self._lock:
            return len(self._items) >= self._capacity


class TokenBucket:
    """Non-blocking rate limiter: ``take`` succeeds once enough budget has
    accrued at ``rate`` bytes per second."""

    def __init__(self, rate: float, capacity: float) -> None:
        self._rate = rate
        self._capacity = capacity
        self._tokens = capacity
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def take(self, n: int) -> bool:
        with self._lock:
            now = time.monotonic()
            self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
            self._last = now
            if self._tokens >= n:
                self._tokens -= n
                return True
            return False


class _Counter:
    def __init__(self) -> None:
        self._value = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self._value += n

    def value(self) -> int:
        with self._lock:
            return self._value


# Poll discipline: yield the GIL a few times, then back off exponentially.
# A timed sleep under GIL contention wakes about a switch interval late,
# which swamps sub-millisecond transfers, so short waits spin; but an idle
# poller that keeps spinning steals the only core from workers that are
# copying, so long waits must really sleep.
_POLL_SLEEP = 2e-5
_POLL_SLEEP_MAX = 1.28e-3
_SPIN_POLLS = 4


def _poll_wait(idle: int) -> None:
    if idle < _SPIN_POLLS:
        time.sleep(0.0)
    else:
        time.sleep(min(_POLL_SLEEP * (1 << min(idle - _SPIN_POLLS, 6)), _POLL_SLEEP_MAX))


class _SlipSender:
    """Slice cursor over one outgoing transfer."""

    def __init__(self, transfer, ring: RingBuffer, bucket: TokenBucket, slice_bytes: int):
        self.transfer = transfer
        self.ring = ring
        self.bucket = bucket
        self.slice_bytes = slice_bytes
        self.pos = 0
        self.total = transfer.send.total_bytes

    def done(self) -> bool:
        return self.pos >= self.total

    def pump(self, buffers: dict[str, np.ndarray]) -> bool:
        if self.done() or self.ring.full():
            return False
        n = min(self.slice_bytes, self.total - self.pos)
        if not self.bucket.take(n):
            return False
        data = self.transfer.send.gather_range(
            self.pos, n, buffers[self.transfer.send.buffer_id]
        )
        self.ring.try_push((self.pos, data))
        self.pos += n
        return True


class _SlipReceiver:
    def __init__(self, transfer, ring: RingBuffer, counter: _Counter | None):
        self.transfer = transfer
        self.ring = ring
        self.counter = counter
        self.received = 0
        self.total = transfer.recv.total_bytes

    def done(self) -> bool:
        return self.received >= self.total

    def drain(self, buffers: dict[str, np.ndarray]) -> bool:
        got = False
        while (item := self.ring.try_pop()) is not None:
            pos, data = item
            self.transfer.recv.write_range(pos, data, buffers[self.transfer.recv.buffer_id])
            self.received += data.size
            if self.counter is not None:
                self.counter.add(data.size)
            got = True
        return got


def _run_edge(edge, buffers: dict[str, np.ndarray]) -> None:
    data = edge.send.gather(buffers[edge.send.buffer_id])
    edge.recv.scatter(data, buffers[edge.recv.buffer_id])


def _spawn_workers(workers) -> float:
    errors: list[BaseException] = []

    def wrap(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # propagate to the caller
                errors.append(exc)

        return run

    threads = [threading.Thread(target=wrap(fn), name=name) for name, fn in workers]
    interval = sys.getswitchinterval()
    sys.setswitchinterval(2e-4)
    try:
        start = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - start
    finally:
        sys.setswitchinterval(interval)
    if errors:
        raise errors[0]
    return elapsed


def _wallclock_dispatch(
    plan: CommPlan,
    buffers: dict[str, np.ndarray],
    topo: ClusterTopology,
    cost: CostModel,
) -> float:
    rings = [RingBuffer(cost.ring_capacity) for _ in plan.node_transfers]
    burst = max(float(topo.slice_bytes), topo.inter_bw * 1e-3)
    buckets: dict[tuple[str, int], TokenBucket] = {}
    for t in plan.node_transfers:
        buckets.setdefault(t.channel, TokenBucket(topo.inter_bw, burst))

    edges_by_src: dict[int, list] = {g: [] for g in range(topo.num_gpus)}
    for node in sorted(plan.local_edges):
        for e in plan.local_edges[node]:
            edges_by_src[e.src_flat].append(e)

    def worker(g: int):
        senders = [
            _SlipSender(t, rings[i], buckets[t.channel], topo.slice_bytes)
            for i, t in enumerate(plan.node_transfers)
            if t.src_flat == g
        ]
        receivers = [
            _SlipReceiver(t, rings[i], None)
            for i, t in enumerate(plan.node_transfers)
            if t.dst_flat == g
        ]
        early = [e for e in edges_by_src[g] if not e.send.buffer_id.startswith("fwd_recv/")]
        late = [e for e in edges_by_src[g] if e.send.buffer_id.startswith("fwd_recv/")]
        # Token-sourced rows are ready before any traffic moves.
        for e in early:
            _run_edge(e, buffers)
        idle = 0
        while not (all(s.done() for s in senders) and all(r.done() for r in receivers)):
            progressed = False
            for s in senders:
                while s.pump(buffers):
                    progressed = True
            for r in receivers:
                progressed |= r.drain(buffers)
            if progressed:
                idle = 0
            else:
                idle += 1
                _poll_wait(idle)
        # Everything this forwarder will ever hold has landed; fan it out.
        for e in late:
            _run_edge(e, buffers)

    return _spawn_workers(
        [(f"gpu-{g}", functools.partial(worker, g)) for g in range(topo.num_gpus)]
    )


class _ChunkSender:
    """Slice cursor over one packed wire chunk."""

    def __init__(self, data: np.ndarray, ring: RingBuffer, bucket: TokenBucket, slice_bytes: int):
        self.data = data
        self.ring = ring
        self.bucket = bucket
        self.slice_bytes = slice_bytes
        self.pos = 0

    def done(self) -> bool:
        return self.pos >= self.data.size

    def pump(self) -> bool:
        if self.done() or self.ring.full():
            return False
        n = min(self.slice_bytes, self.data.size - self.pos)
        if not self.bucket.take(n):
            return False
        self.ring.try_push((self.pos, self.data[self.pos : self.pos + n]))
        self.pos += n
        return True


class _ChunkReceiver:
    def __init__(self, out: np.ndarray, ring: RingBuffer):
        self.out = out
        self.ring = ring
        self.received = 0

    def done(self) -> bool:
        return self.received >= self.out.size

    def drain(self) -> bool:
        got = False
        while (item := self.ring.try_pop()) is not None:
            pos, data = item
            self.out[pos : pos + data.size] = data
            self.received += data.size
            got = True
        return got


def _wallclock_baseline_direction(
    plan: CommPlan,
    buffers: dict[str, np.ndarray],
    topo: ClusterTopology,
    cost: CostModel,
) -> tuple[float, float, float]:
    """Measured pack, all-to-all, unpack for one disaggregated direction.

    Pack copies every message into a contiguous wire chunk and unpack
    scatters the landed chunks back out, so the two full passes the fused
    engine skips really execute here and show up in the measured times.
    The all-to-all in between moves only the packed chunks, inter-node
    ones through the same rate-limited rings the fused engine uses.
    Direct plans never chain one message's payload off another's arrival,
    so a single round suffices.
    """
    transfers = list(plan.node_transfers)
    edges = [e for node in sorted(plan.local_edges) for e in plan.local_edges[node]]
    moves = transfers + edges

    start = time.perf_counter()
    chunks = [m.send.gather(buffers[m.send.buffer_id]) for m in moves]
    pack_s = time.perf_counter() - start

    landed: list[np.ndarray] = [np.empty(t.bytes, dtype=np.uint8) for t in transfers]
    # Intra-node chunks are already where the unpack pass needs them.
    landed.extend(chunks[len(transfers) :])

    rings = [RingBuffer(cost.ring_capacity) for _ in transfers]
    burst = max(float(topo.slice_bytes), topo.inter_bw * 1e-3)
    buckets: dict[tuple[str, int], TokenBucket] = {}
    for t in transfers:
        buckets.setdefault(t.channel, TokenBucket(topo.inter_bw, burst))

    def worker(g: int):
        senders = [
            _ChunkSender(chunks[i], rings[i], buckets[t.channel], topo.slice_bytes)
            for i, t in enumerate(transfers)
            if t.src_flat == g
        ]
        receivers = [
            _ChunkReceiver(landed[i], rings[i])
            for i, t in enumerate(transfers)
            if t.dst_flat == g
        ]
        idle = 0
        while not (all(s.done() for s in senders) and all(r.done() for r in receivers)):
            progressed = False
            for s in senders:
                while s.pump():
                    progressed = True
            for r in receivers:
                progressed |= r.drain()
            if progressed:
                idle = 0
            else:
                idle += 1
                _poll_wait(idle)

    comm_s = _spawn_workers(
        [(f"gpu-{g}", functools.partial(worker, g)) for g in range(topo.num_gpus)]
    )

    start = time.perf_counter()
    for m, data in zip(moves, landed):
        m.recv.scatter(data, buffers[m.recv.buffer_id])
    unpack_s = time.perf_counter() - start
    return pack_s, comm_s, unpack_s


def _wallclock_combine(
    plan: CommPlan,
    buffers: dict[str, np.ndarray],
    topo: ClusterTopology,
    cost: CostModel,
) -> float:
    rings = [RingBuffer(cost.ring_capacity) for _ in plan.node_transfers]
    burst = max(float(topo.slice_bytes), topo.inter_bw * 1e-3)
    buckets: dict[tuple[str, int], TokenBucket] = {}
    for t in plan.node_transfers:
        buckets.setdefault(t.channel, TokenBucket(topo.inter_bw, burst))

    comb_expected = {
        g: plan.buffer_bytes.get(buffer_name("comb_recv", g), 0)
        for g in range(topo.num_gpus)
    }
    stage_expected = {
        g: plan.buffer_bytes.get(buffer_name("staging", g), 0)
        for g in range(topo.num_gpus)
    }
    comb_count = {g: _Counter() for g in range(topo.num_gpus)}
    stage_count = {g: _Counter() for g in range(topo.num_gpus)}

    edges_by_src: dict[int, list] = {g: [] for g in range(topo.num_gpus)}
    for node in sorted(plan.local_edges):
        for e in plan.local_edges[node]:
            edges_by_src[e.src_flat].append(e)

    def counter_for(buffer_id: str) -> _Counter:
        kind, flat = buffer_id.split("/")
        table = comb_count if kind == "comb_recv" else stage_count
        return table[int(flat)]

    def worker(g: int):
        my_out = [
            _SlipSender(t, rings[i], buckets[t.channel], topo.slice_bytes)
            for i, t in enumerate(plan.node_transfers)
            if t.src_flat == g
        ]
        my_in = [
            _SlipReceiver(t, rings[i], stage_count[g])
            for i, t in enumerate(plan.node_transfers)
            if t.dst_flat == g
        ]
        # Expert outputs exist from the start; push them toward staging
        # buffers and forwarder landing areas right away.
        for e in edges_by_src[g]:
            _run_edge(e, buffers)
            counter_for(e.recv.buffer_id).add(e.bytes)
        forward_ready = False
        reduced = stage_expected[g] == 0
        idle = 0
        while True:
            progressed = False
            if not forward_ready and comb_count[g].value() >= comb_expected[g]:
                forward_ready = True
                progressed = True
            if forward_ready:
                for s in my_out:
                    while s.pump(buffers):
                        progressed = True
            for r in my_in:
                progressed |= r.drain(buffers)
            if not reduced and stage_count[g].value() >= stage_expected[g]:
                _reduce_one(plan, buffers, g)
                reduced = True
                progressed = True
            if (
                forward_ready
                and reduced
                and all(s.done() for s in my_out)
                and all(r.done() for r in my_in)
            ):
                break
            if progressed:
                idle = 0
            else:
                idle += 1
                _poll_wait(idle)

    return _spawn_workers(
        [(f"gpu-{g}", functools.partial(worker, g)) for g in range(topo.num_gpus)]
    )
