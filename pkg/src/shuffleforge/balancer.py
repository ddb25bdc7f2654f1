"""Communication-group assignment.

A communication group contains exactly one GPU per node; each GPU belongs
to exactly one group.  All inter-node traffic of a group is serialized on
that group's channel, so the slowest group sets the pace and the objective
is to minimize the maximum per-group load.

The greedy assignment needs only each node's own loads: sort the node's
GPUs by descending load, then shift the sorted order circularly by the node
index.  Heavy GPUs of different nodes land in different groups, without any
coordination beyond knowing one's node index.
"""

from __future__ import annotations

import itertools

import numpy as np

from .topology import ClusterTopology


def _as_load_matrix(loads: np.ndarray, topo: ClusterTopology) -> np.ndarray:
    arr = np.asarray(loads, dtype=np.float64)
    if arr.shape == (topo.num_gpus,):
        arr = arr.reshape(topo.num_nodes, topo.gpus_per_node)
    if arr.shape != (topo.num_nodes, topo.gpus_per_node):
        raise ValueError("loads must be per-GPU, flat or (nodes, gpus_per_node)")
    if arr.size and arr.min() < 0:
        raise ValueError("loads are byte counts, must be non-negative")
    return arr


def validate_groups(groups: np.ndarray, topo: ClusterTopology) -> None:
    """Every row must be a permutation: one GPU per node in every group."""
    groups = np.asarray(groups)
    if groups.shape != (topo.num_nodes, topo.gpus_per_node):
        raise ValueError("group table must be (num_nodes, gpus_per_node)")
    want = np.arange(topo.gpus_per_node)
    for n in range(topo.num_nodes):
        if not np.array_equal(np.sort(groups[n]), want):
            raise ValueError(f"node {n} row is not a permutation of local indices")


def group_of_flat(groups: np.ndarray, topo: ClusterTopology) -> np.ndarray:
    """Invert the group table: flat GPU id to group id."""
    out = np.empty(topo.num_gpus, dtype=np.int64)
    for n in range(topo.num_nodes):
        for g in range(topo.gpus_per_node):
            out[topo.flat_id(n, int(groups[n, g]))] = g
    return out


def member_flat(groups: np.ndarray, topo: ClusterTopology, node: int, group: int) -> int:
    """Flat id of the GPU representing ``group`` on ``node``."""
    return topo.flat_id(node, int(groups[node, group]))


def group_load(loads: np.ndarray, groups: np.ndarray, topo: ClusterTopology) -> np.ndarray:
    """Total load per group: sum of member loads."""
    mat = _as_load_matrix(loads, topo)
    out = np.zeros(topo.gpus_per_node, dtype=np.float64)
    for n in range(topo.num_nodes):
        out += mat[n, groups[n]]
    return out


def static_groups(topo: ClusterTopology) -> np.ndarray:
    """Load-oblivious baseline: group g holds local index g of every node."""
    return np.tile(np.arange(topo.gpus_per_node, dtype=np.int64), (topo.num_nodes, 1))


def greedy_groups(loads: np.ndarray, topo: ClusterTopology) -> np.ndarray:
    """Sorted-and-shifted groups; runs per node with local information only.

    Node ``n`` sorts its GPUs by descending load (ties: ascending local
    index) and shifts the order right by ``n % gpus_per_node``, so its
    heaviest GPU joins group ``n % gpus_per_node``, the next-heaviest the
    following group, and so on.  Consecutive nodes stagger their heavy GPUs
    across different groups, keeping per-group sums close.
    """
    mat = _as_load_matrix(loads, topo)
    m = topo.gpus_per_node
    groups = np.empty((topo.num_nodes, m), dtype=np.int64)
    for n in range(topo.num_nodes):
        # Stable argsort of -load keeps equal loads in ascending local order.
        ranked = np.argsort(-mat[n], kind="stable")
        shift = n % m
        groups[n] = np.roll(ranked, shift)
    return groups


def optimal_groups(
    loads: np.ndarray, topo: ClusterTopology, cap: int = 1_000_000
) -> tuple[np.ndarray, float]:
    """Exhaustive minimax assignment, for small instances and as test oracle.

    Group labels carry no meaning, so node 0 is pinned to the identity row;
    the remaining nodes range over all ``(M!)**(N-1)`` permutations.  Raises
    if that count exceeds ``cap``.
    """
    mat = _as_load_matrix(loads, topo)
    n_nodes, m = mat.shape
    perms = np.array(list(itertools.permutations(range(m))), dtype=np.int64)
    total = len(perms) ** (n_nodes - 1)
    if total > cap:
        raise ValueError(f"{total} assignments exceed cap={cap}")

    best_max = np.inf
    best_combo: tuple[int, ...] = ()
    for combo in itertools.product(range(len(perms)), repeat=n_nodes - 1):
        sums = mat[0].copy()
        for node, pidx in enumerate(combo, start=1):
            sums += mat[node, perms[pidx]]
        worst = float(sums.max())
        if worst < best_max:
            best_max = worst
            best_combo = combo

    groups = np.empty((n_nodes, m), dtype=np.int64)
    groups[0] = np.arange(m)
    for node, pidx in enumerate(best_combo, start=1):
        groups[node] = perms[pidx]
    return groups, best_max


def build_groups(
    scheme: str, loads: np.ndarray, topo: ClusterTopology, cap: int = 1_000_000
) -> np.ndarray:
    if scheme == "greedy":
        return greedy_groups(loads, topo)
    if scheme == "static":
        return static_groups(topo)
    if scheme == "optimal":
        return optimal_groups(loads, topo, cap=cap)[0]
    raise ValueError(f"unknown balancer scheme {scheme!r}")
