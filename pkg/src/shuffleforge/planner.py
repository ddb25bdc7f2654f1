"""Two-level communication plans for expert dispatch and combine.

A plan turns a routing assignment into descriptor lists over named buffers,
split into a node-level phase (inter-node, deduplicated) and an expert-level
phase (intra-node distribution).  Dispatch ships each token at most once to
any node, to a single forwarder GPU there; the forwarder's peers then pull
the rows they need over the intra-node fabric.  Combine runs the mirror
image, but with no deduplication: every expert output is distinct data and
must travel back to the token's source.

Buffers are named ``kind/flat_gpu``.  Kinds:

==============  ======================================================
``token``       source-side tokens, ascending global id
``fwd_recv``    forwarder landing area, dispatch direction
``activation``  per-expert-GPU input rows (expert, source GPU, token)
``act_out``     expert outputs, same row layout as ``activation``
``comb_recv``   forwarder landing area, combine direction
``staging``     per-source (token, k) expert outputs awaiting reduction
``output``      reduced per-token result on the source GPU
==============  ======================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import balancer as _balancer
from .descriptor import DescriptorList
from .routing import RoutingAssignment, derive_token_node
from .topology import ClusterTopology, ExpertPlacement

BUFFER_KINDS = (
    "token",
    "fwd_recv",
    "activation",
    "act_out",
    "comb_recv",
    "staging",
    "output",
)


def buffer_name(kind: str, flat_gpu: int) -> str:
    if kind not in BUFFER_KINDS:
        raise ValueError(f"unknown buffer kind {kind!r}")
    return f"{kind}/{flat_gpu}"


@dataclass(frozen=True)
class NodeTransfer:
    """One inter-node hop: a send list and the matching receive list.

    ``channel`` names the serialization domain ``("group", g)``: the
    cluster offers one independent inter-node channel per local rank, a
    hierarchical plan keys it by the forwarder's group, a direct plan by
    the destination GPU's local rank.
    """

    src_flat: int
    dst_flat: int
    dest_node: int
    send: DescriptorList
    recv: DescriptorList
    token_ids: np.ndarray = field(repr=False)
    channel: tuple[str, int] = ("group", 0)

    @property
    def bytes(self) -> int:
        return self.send.total_bytes


@dataclass(frozen=True)
class CopyEdge:
    """Intra-node (possibly intra-GPU) descriptor-driven copy."""

    src_flat: int
    dst_flat: int
    send: DescriptorList
    recv: DescriptorList

    @property
    def bytes(self) -> int:
        return self.send.total_bytes


@dataclass(frozen=True)
class ActivationLayout:
    """Row order of one expert GPU's activation buffer.

    Rows sort by (expert id, source GPU, token id); the arrays here give
    the provenance of each row.
    """

    expert_ids: np.ndarray = field(repr=False)
    token_ids: np.ndarray = field(repr=False)
    src_flat: np.ndarray = field(repr=False)
    k_col: np.ndarray = field(repr=False)

    @property
    def num_rows(self) -> int:
        return self.token_ids.size


@dataclass(frozen=True)
class CommPlan:
    direction: str
    token_bytes: int
    num_tokens: int
    topk: int
    groups: np.ndarray | None
    node_transfers: list[NodeTransfer]
    local_edges: dict[int, list[CopyEdge]]
    buffer_bytes: dict[str, int]
    layouts: dict[int, ActivationLayout]
    local_tokens: dict[int, np.ndarray]
    reduce_weights: dict[int, np.ndarray] | None
    inter_bytes_total: int
    inter_bytes_by_channel: dict[tuple[str, int], int]
    intra_bytes_total: int
    intra_gpu_bytes: int


def _token_ranks(
    source: np.ndarray, num_gpus: int
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    local_rank = np.empty(source.size, dtype=np.int64)
    local_tokens: dict[int, np.ndarray] = {}
    for s in range(num_gpus):
        ids = np.flatnonzero(source == s)
        local_rank[ids] = np.arange(ids.size)
        local_tokens[s] = ids
    return local_rank, local_tokens


def _activation_layouts(
    assignment: RoutingAssignment,
    placement: ExpertPlacement,
    topo: ClusterTopology,
) -> tuple[dict[int, ActivationLayout], np.ndarray]:
    """Per-GPU activation row order plus the inverse map (t, k) -> row."""
    owner = placement.owner[assignment.experts]
    layouts: dict[int, ActivationLayout] = {}
    row_of = np.full(owner.shape, -1, dtype=np.int64)
    for g in range(topo.num_gpus):
        ts, ks = np.nonzero(owner == g)
        e = assignment.experts[ts, ks]
        order = np.lexsort((ts, assignment.source[ts], e))
        ts, ks, e = ts[order], ks[order], e[order]
        layouts[g] = ActivationLayout(
            expert_ids=e,
            token_ids=ts,
            src_flat=assignment.source[ts],
            k_col=ks,
        )
        row_of[ts, ks] = np.arange(ts.size)
    return layouts, row_of


def _runs(*keys: np.ndarray) -> list[tuple[int, int]]:
    """Half-open runs of equal key tuples over pre-sorted arrays."""
    n = keys[0].size
    if n == 0:
        return []
    change = np.zeros(n - 1, dtype=bool)
    for k in keys:
        change |= k[1:] != k[:-1]
    starts = np.concatenate(([0], np.flatnonzero(change) + 1, [n]))
    return [(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]


def _full_lengths(count: int, width: int) -> np.ndarray:
    return np.full(count, width, dtype=np.int64)


def dispatch_loads(
    assignment: RoutingAssignment,
    placement: ExpertPlacement,
    topo: ClusterTopology,
    token_bytes: int,
) -> np.ndarray:
    """Per-GPU inter-node send bytes under deduplication.

    This is what the group balancer balances.  It depends only on the
    routing, not on the grouping: a sender ships one copy of a token per
    distinct remote destination node no matter which forwarder receives it.
    """
    tnm = derive_token_node(assignment, placement, topo)
    src_node = assignment.source // topo.gpus_per_node
    remote_first = tnm.first_mask & (tnm.nodes != src_node[:, None])
    per_token = remote_first.sum(axis=1)
    loads = np.zeros(topo.num_gpus, dtype=np.int64)
    np.add.at(loads, assignment.source, per_token)
    return loads * token_bytes


def naive_inter_node_bytes(
    assignment: RoutingAssignment,
    placement: ExpertPlacement,
    topo: ClusterTopology,
    token_bytes: int,
) -> int:
    """Inter-node volume of a per-(token, expert) exchange: no dedup."""
    owner_node = placement.owner[assignment.experts] // topo.gpus_per_node
    src_node = assignment.source // topo.gpus_per_node
    return int((owner_node != src_node[:, None]).sum()) * token_bytes


def build_dispatch_plan(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    token_bytes: int,
    groups: np.ndarray,
) -> CommPlan:
    """Deduplicated two-level dispatch plan for a fixed group assignment."""
    _balancer.validate_groups(groups, topo)
    tb = token_bytes
    m = topo.gpus_per_node
    num_nodes = topo.num_nodes
    source = assignment.source
    src_node = source // m
    tnm = derive_token_node(assignment, placement, topo)
    group_of = _balancer.group_of_flat(groups, topo)
    local_rank, local_tokens = _token_ranks(source, topo.num_gpus)
    layouts, _ = _activation_layouts(assignment, placement, topo)

    # Node level: one run per (sender, destination node), tokens ascending.
    ts, ks = np.nonzero(tnm.first_mask & (tnm.nodes != src_node[:, None]))
    senders = source[ts]
    dnodes = tnm.nodes[ts, ks]
    order = np.lexsort((ts, dnodes, senders))
    ts, senders, dnodes = ts[order], senders[order], dnodes[order]

    transfers: list[NodeTransfer] = []
    fwd_fill = np.zeros(topo.num_gpus, dtype=np.int64)
    fwd_row = np.full((assignment.num_tokens, num_nodes), -1, dtype=np.int64)
    inter_by_channel: dict[tuple[str, int], int] = {}
    for a, b in _runs(senders, dnodes):
        s = int(senders[a])
        n = int(dnodes[a])
        tokens = ts[a:b]
        fwd = topo.flat_id(n, int(groups[n, group_of[s]]))
        rows = fwd_fill[fwd] + np.arange(tokens.size, dtype=np.int64)
        fwd_fill[fwd] += tokens.size
        fwd_row[tokens, n] = rows
        channel = ("group", int(group_of[s]))
        transfers.append(
            NodeTransfer(
                src_flat=s,
                dst_flat=fwd,
                dest_node=n,
                send=DescriptorList(
                    buffer_name("token", s),
                    local_rank[tokens] * tb,
                    _full_lengths(tokens.size, tb),
                ),
                recv=DescriptorList(
                    buffer_name("fwd_recv", fwd),
                    rows * tb,
                    _full_lengths(tokens.size, tb),
                ),
                token_ids=tokens,
                channel=channel,
            )
        )
        inter_by_channel[channel] = inter_by_channel.get(channel, 0) + tokens.size * tb

    # Expert level: every activation row pulls from a token buffer on its
    # own node or from the forwarder that received it.
    local_edges: dict[int, list[CopyEdge]] = {n: [] for n in range(num_nodes)}
    intra_total = 0
    intra_gpu = 0
    for node in range(num_nodes):
        for g in range(topo.flat_id(node, 0), topo.flat_id(node, 0) + m):
            lay = layouts[g]
            if lay.num_rows == 0:
                continue
            t = lay.token_ids
            s_flat = lay.src_flat
            remote = (s_flat // m) != node
            src_gpu = np.where(
                remote,
                node * m + groups[node, group_of[s_flat]],
                s_flat,
            )
            src_off = np.where(remote, fwd_row[t, node], local_rank[t]) * tb
            kind = remote.astype(np.int64)
            rows = np.arange(lay.num_rows, dtype=np.int64)
            eorder = np.lexsort((rows, kind, src_gpu))
            for a, b in _runs(src_gpu[eorder], kind[eorder]):
                sel = eorder[a:b]
                sg = int(src_gpu[sel[0]])
                src_kind = "fwd_recv" if kind[sel[0]] else "token"
                edge = CopyEdge(
                    src_flat=sg,
                    dst_flat=g,
                    send=DescriptorList(
                        buffer_name(src_kind, sg),
                        src_off[sel],
                        _full_lengths(sel.size, tb),
                    ),
                    recv=DescriptorList(
                        buffer_name("activation", g),
                        rows[sel] * tb,
                        _full_lengths(sel.size, tb),
                    ),
                )
                local_edges[node].append(edge)
                if sg == g:
                    intra_gpu += edge.bytes
                else:
                    intra_total += edge.bytes

    buffer_bytes: dict[str, int] = {}
    for g in range(topo.num_gpus):
        buffer_bytes[buffer_name("token", g)] = local_tokens[g].size * tb
        buffer_bytes[buffer_name("fwd_recv", g)] = int(fwd_fill[g]) * tb
        buffer_bytes[buffer_name("activation", g)] = layouts[g].num_rows * tb

    return CommPlan(
        direction="dispatch",
        token_bytes=tb,
        num_tokens=assignment.num_tokens,
        topk=assignment.topk,
        groups=groups,
        node_transfers=transfers,
        local_edges=local_edges,
        buffer_bytes=buffer_bytes,
        layouts=layouts,
        local_tokens=local_tokens,
        reduce_weights=None,
        inter_bytes_total=sum(t.bytes for t in transfers),
        inter_bytes_by_channel=inter_by_channel,
        intra_bytes_total=intra_total,
        intra_gpu_bytes=intra_gpu,
    )


def build_combine_plan(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    token_bytes: int,
    groups: np.ndarray,
) -> CommPlan:
    """Return path: expert outputs back to source GPUs, no deduplication.

    Uses the same channel pairing as dispatch, reversed: outputs for source
    ``s`` produced on node ``n`` funnel through the member of ``s``'s group
    on ``n``, then cross to ``s`` on the group's channel.
    """
    _balancer.validate_groups(groups, topo)
    tb = token_bytes
    m = topo.gpus_per_node
    num_nodes = topo.num_nodes
    topk = assignment.topk
    source = assignment.source
    src_node = source // m
    group_of = _balancer.group_of_flat(groups, topo)
    local_rank, local_tokens = _token_ranks(source, topo.num_gpus)
    layouts, row_of = _activation_layouts(assignment, placement, topo)
    owner_node = placement.owner[assignment.experts] // m
    staging_row = local_rank[:, None] * topk + np.arange(topk, dtype=np.int64)

    # Forwarder landing areas: remote (t, k) grouped by destination source
    # GPU ascending, then (t, k) ascending, per forwarder.
    ts, ks = np.nonzero(owner_node != src_node[:, None])
    dest_s = source[ts]
    fwds = owner_node[ts, ks] * m + groups[owner_node[ts, ks], group_of[dest_s]]
    order = np.lexsort((ks, ts, dest_s, fwds))
    ts, ks, dest_s, fwds = ts[order], ks[order], dest_s[order], fwds[order]

    comb_row = np.full((assignment.num_tokens, topk), -1, dtype=np.int64)
    comb_fill = np.zeros(topo.num_gpus, dtype=np.int64)
    transfers: list[NodeTransfer] = []
    inter_by_channel: dict[tuple[str, int], int] = {}
    for a, b in _runs(fwds, dest_s):
        f = int(fwds[a])
        s = int(dest_s[a])
        rows = comb_fill[f] + np.arange(b - a, dtype=np.int64)
        comb_fill[f] += b - a
        comb_row[ts[a:b], ks[a:b]] = rows
        channel = ("group", int(group_of[s]))
        transfers.append(
            NodeTransfer(
                src_flat=f,
                dst_flat=s,
                dest_node=int(src_node[ts[a]]),
                send=DescriptorList(
                    buffer_name("comb_recv", f),
                    rows * tb,
                    _full_lengths(rows.size, tb),
                ),
                recv=DescriptorList(
                    buffer_name("staging", s),
                    staging_row[ts[a:b], ks[a:b]] * tb,
                    _full_lengths(rows.size, tb),
                ),
                token_ids=ts[a:b],
                channel=channel,
            )
        )
        inter_by_channel[channel] = inter_by_channel.get(channel, 0) + (b - a) * tb

    # Expert level: act_out rows fan out to local staging buffers or to the
    # forwarder that will carry them home.
    local_edges: dict[int, list[CopyEdge]] = {n: [] for n in range(num_nodes)}
    intra_total = 0
    intra_gpu = 0
    for node in range(num_nodes):
        for g in range(topo.flat_id(node, 0), topo.flat_id(node, 0) + m):
            lay = layouts[g]
            if lay.num_rows == 0:
                continue
            t = lay.token_ids
            k = lay.k_col
            s_flat = lay.src_flat
            remote = (s_flat // m) != node
            dst_gpu = np.where(
                remote,
                node * m + groups[node, group_of[s_flat]],
                s_flat,
            )
            dst_off = np.where(remote, comb_row[t, k], staging_row[t, k]) * tb
            kind = remote.astype(np.int64)
            rows = np.arange(lay.num_rows, dtype=np.int64)
            eorder = np.lexsort((dst_off, kind, dst_gpu))
            for a, b in _runs(dst_gpu[eorder], kind[eorder]):
                sel = eorder[a:b]
                dg = int(dst_gpu[sel[0]])
                dst_kind = "comb_recv" if kind[sel[0]] else "staging"
                edge = CopyEdge(
                    src_flat=g,
                    dst_flat=dg,
                    send=DescriptorList(
                        buffer_name("act_out", g),
                        rows[sel] * tb,
                        _full_lengths(sel.size, tb),
                    ),
                    recv=DescriptorList(
                        buffer_name(dst_kind, dg),
                        dst_off[sel],
                        _full_lengths(sel.size, tb),
                    ),
                )
                local_edges[node].append(edge)
                if dg == g:
                    intra_gpu += edge.bytes
                else:
                    intra_total += edge.bytes

    reduce_weights = {
        s: assignment.weights[local_tokens[s]] for s in range(topo.num_gpus)
    }
    buffer_bytes: dict[str, int] = {}
    for g in range(topo.num_gpus):
        count = local_tokens[g].size
        buffer_bytes[buffer_name("act_out", g)] = layouts[g].num_rows * tb
        buffer_bytes[buffer_name("comb_recv", g)] = int(comb_fill[g]) * tb
        buffer_bytes[buffer_name("staging", g)] = count * topk * tb
        buffer_bytes[buffer_name("output", g)] = count * tb

    return CommPlan(
        direction="combine",
        token_bytes=tb,
        num_tokens=assignment.num_tokens,
        topk=topk,
        groups=groups,
        node_transfers=transfers,
        local_edges=local_edges,
        buffer_bytes=buffer_bytes,
        layouts=layouts,
        local_tokens=local_tokens,
        reduce_weights=reduce_weights,
        inter_bytes_total=sum(t.bytes for t in transfers),
        inter_bytes_by_channel=inter_by_channel,
        intra_bytes_total=intra_total,
        intra_gpu_bytes=intra_gpu,
    )


def build_plan_pair(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    token_bytes: int,
    balancer: str = "greedy",
) -> tuple[CommPlan, CommPlan, np.ndarray]:
    """Loads, then groups, then both directions of the plan."""
    loads = dispatch_loads(assignment, placement, topo, token_bytes)
    groups = _balancer.build_groups(balancer, loads, topo)
    dispatch = build_dispatch_plan(assignment, topo, placement, token_bytes, groups)
    combine = build_combine_plan(assignment, topo, placement, token_bytes, groups)
    return dispatch, combine, groups


def _direct_transfers_and_edges(
    pairs: tuple[np.ndarray, np.ndarray],
    src_gpu: np.ndarray,
    dst_gpu: np.ndarray,
    send_off: np.ndarray,
    recv_off: np.ndarray,
    send_kind: str,
    recv_kind: str,
    tb: int,
    topo: ClusterTopology,
) -> tuple[list[NodeTransfer], dict[int, list[CopyEdge]], dict, int, int, int]:
    """Shared grouping for the no-planner baselines, one run per GPU pair.

    With no forwarder choice every inter-node message rides the fixed
    channel of its destination's local rank, so the full no-dedup volume
    crowds the same per-rank channels the grouped plan keeps light."""
    ts, _ = pairs
    m = topo.gpus_per_node
    same_node = (src_gpu // m) == (dst_gpu // m)
    order = np.lexsort((recv_off, dst_gpu, src_gpu))
    transfers: list[NodeTransfer] = []
    local_edges: dict[int, list[CopyEdge]] = {n: [] for n in range(topo.num_nodes)}
    inter_by_channel: dict[tuple[str, int], int] = {}
    inter_total = 0
    intra_total = 0
    intra_gpu = 0
    for a, b in _runs(src_gpu[order], dst_gpu[order]):
        sel = order[a:b]
        sg = int(src_gpu[sel[0]])
        dg = int(dst_gpu[sel[0]])
        send = DescriptorList(
            buffer_name(send_kind, sg), send_off[sel], _full_lengths(sel.size, tb)
        )
        recv = DescriptorList(
            buffer_name(recv_kind, dg), recv_off[sel], _full_lengths(sel.size, tb)
        )
        if same_node[sel[0]]:
            edge = CopyEdge(src_flat=sg, dst_flat=dg, send=send, recv=recv)
            local_edges[sg // m].append(edge)
            if sg == dg:
                intra_gpu += edge.bytes
            else:
                intra_total += edge.bytes
        else:
            channel = ("group", dg % m)
            transfers.append(
                NodeTransfer(
                    src_flat=sg,
                    dst_flat=dg,
                    dest_node=dg // m,
                    send=send,
                    recv=recv,
                    token_ids=ts[sel],
                    channel=channel,
                )
            )
            inter_by_channel[channel] = (
                inter_by_channel.get(channel, 0) + sel.size * tb
            )
            inter_total += sel.size * tb
    return transfers, local_edges, inter_by_channel, inter_total, intra_total, intra_gpu


def build_direct_plans(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    token_bytes: int,
) -> tuple[CommPlan, CommPlan]:
    """Per-(token, expert) point-to-point plans: no dedup, no forwarding.

    Every routed pair moves straight from source to expert GPU and back on
    the destination's per-rank channel.  Same activation and staging
    layouts as the hierarchical plan, so results are interchangeable; only
    the traffic differs.
    """
    tb = token_bytes
    topk = assignment.topk
    source = assignment.source
    local_rank, local_tokens = _token_ranks(source, topo.num_gpus)
    layouts, row_of = _activation_layouts(assignment, placement, topo)
    owner = placement.owner[assignment.experts]
    staging_row = local_rank[:, None] * topk + np.arange(topk, dtype=np.int64)

    ts, ks = np.nonzero(np.ones_like(owner, dtype=bool))
    src_gpu = source[ts]
    dst_gpu = owner[ts, ks]

    d_transfers, d_edges, d_by_ch, d_inter, d_intra, d_gpu = _direct_transfers_and_edges(
        (ts, ks),
        src_gpu,
        dst_gpu,
        local_rank[ts] * tb,
        row_of[ts, ks] * tb,
        "token",
        "activation",
        tb,
        topo,
    )
    c_transfers, c_edges, c_by_ch, c_inter, c_intra, c_gpu = _direct_transfers_and_edges(
        (ts, ks),
        dst_gpu,
        src_gpu,
        row_of[ts, ks] * tb,
        staging_row[ts, ks] * tb,
        "act_out",
        "staging",
        tb,
        topo,
    )

    buffer_bytes_d: dict[str, int] = {}
    buffer_bytes_c: dict[str, int] = {}
    for g in range(topo.num_gpus):
        count = local_tokens[g].size
        rows = layouts[g].num_rows
        buffer_bytes_d[buffer_name("token", g)] = count * tb
        buffer_bytes_d[buffer_name("activation", g)] = rows * tb
        buffer_bytes_c[buffer_name("act_out", g)] = rows * tb
        buffer_bytes_c[buffer_name("staging", g)] = count * topk * tb
        buffer_bytes_c[buffer_name("output", g)] = count * tb

    reduce_weights = {
        s: assignment.weights[local_tokens[s]] for s in range(topo.num_gpus)
    }
    dispatch = CommPlan(
        direction="dispatch",
        token_bytes=tb,
        num_tokens=assignment.num_tokens,
        topk=topk,
        groups=None,
        node_transfers=d_transfers,
        local_edges=d_edges,
        buffer_bytes=buffer_bytes_d,
        layouts=layouts,
        local_tokens=local_tokens,
        reduce_weights=None,
        inter_bytes_total=d_inter,
        inter_bytes_by_channel=d_by_ch,
        intra_bytes_total=d_intra,
        intra_gpu_bytes=d_gpu,
    )
    combine = CommPlan(
        direction="combine",
        token_bytes=tb,
        num_tokens=assignment.num_tokens,
        topk=topk,
        groups=None,
        node_transfers=c_transfers,
        local_edges=c_edges,
        buffer_bytes=buffer_bytes_c,
        layouts=layouts,
        local_tokens=local_tokens,
        reduce_weights=reduce_weights,
        inter_bytes_total=c_inter,
        inter_bytes_by_channel=c_by_ch,
        intra_bytes_total=c_intra,
        intra_gpu_bytes=c_gpu,
    )
    return dispatch, combine


def dedup_ratio(
    assignment: RoutingAssignment,
    topo: ClusterTopology,
    placement: ExpertPlacement,
) -> float:
    """Naive over deduplicated inter-node volume; equals topk when every
    token's experts share one remote node."""
    naive = naive_inter_node_bytes(assignment, placement, topo, 1)
    dedup = dispatch_loads(assignment, placement, topo, 1).sum()
    if dedup == 0:
        return 1.0 if naive == 0 else float("inf")
    return naive / dedup


def plan_to_json(plan: CommPlan) -> dict:
    """Serializable dump of a plan; descriptor tables as base64 wire blobs."""
    import base64

    def blob(d: DescriptorList) -> dict:
        return {
            "buffer": d.buffer_id,
            "table": base64.b64encode(d.to_bytes()).decode("ascii"),
        }

    return {
        "direction": plan.direction,
        "token_bytes": plan.token_bytes,
        "num_tokens": plan.num_tokens,
        "topk": plan.topk,
        "groups": None if plan.groups is None else plan.groups.tolist(),
        "inter_bytes_total": plan.inter_bytes_total,
        "intra_bytes_total": plan.intra_bytes_total,
        "intra_gpu_bytes": plan.intra_gpu_bytes,
        "buffer_bytes": dict(sorted(plan.buffer_bytes.items())),
        "node_transfers": [
            {
                "src_flat": t.src_flat,
                "dst_flat": t.dst_flat,
                "dest_node": t.dest_node,
                "channel": list(t.channel),
                "bytes": t.bytes,
                "send": blob(t.send),
                "recv": blob(t.recv),
            }
            for t in plan.node_transfers
        ],
        "local_edges": {
            str(node): [
                {
                    "src_flat": e.src_flat,
                    "dst_flat": e.dst_flat,
                    "bytes": e.bytes,
                    "send": blob(e.send),
                    "recv": blob(e.recv),
                }
                for e in edges
            ]
            for node, edges in plan.local_edges.items()
        },
        "layouts": {
            str(g): {
                "expert_ids": lay.expert_ids.tolist(),
                "token_ids": lay.token_ids.tolist(),
                "src_flat": lay.src_flat.tolist(),
                "k_col": lay.k_col.tolist(),
            }
            for g, lay in plan.layouts.items()
        },
    }
