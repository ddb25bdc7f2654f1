"""Cluster topology and expert placement.

The simulated cluster is a grid of ``num_nodes`` nodes with ``gpus_per_node``
GPUs each.  GPUs on the same node talk over a full-bandwidth intra-node
fabric; each GPU owns one NIC for inter-node traffic.  A GPU is addressed
either by the pair ``(node, local)`` or by its flat index
``node * gpus_per_node + local``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Link defaults, bytes per second.  intra_bw is the per-GPU share of the
# intra-node fabric, inter_bw the line rate of a single 400 Gbps NIC.
DEFAULT_INTRA_BW = 480e9
DEFAULT_INTER_BW = 50e9
DEFAULT_INTER_LATENCY = 5e-6
DEFAULT_GPU_PREP_BW = 800e9
DEFAULT_SLICE_BYTES = 1 << 20


@dataclass(frozen=True)
class ClusterTopology:
    """Static description of the cluster the simulator runs against."""

    num_nodes: int
    gpus_per_node: int
    intra_bw: float = DEFAULT_INTRA_BW
    inter_bw: float = DEFAULT_INTER_BW
    inter_latency: float = DEFAULT_INTER_LATENCY
    gpu_prep_bw: float = DEFAULT_GPU_PREP_BW
    slice_bytes: int = DEFAULT_SLICE_BYTES

    def __post_init__(self) -> None:
        if self.num_nodes < 1 or self.gpus_per_node < 1:
            raise ValueError("topology needs at least one node and one GPU per node")
        for name in ("intra_bw", "inter_bw", "inter_latency", "gpu_prep_bw"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.intra_bw == 0 or self.inter_bw == 0 or self.gpu_prep_bw == 0:
            raise ValueError("bandwidths must be positive")
        if self.slice_bytes < 1:
            raise ValueError("slice_bytes must be positive")

    @property
    def num_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def flat_id(self, node: int, local: int) -> int:
        if not (0 <= node < self.num_nodes and 0 <= local < self.gpus_per_node):
            raise ValueError(f"GPU ({node}, {local}) outside topology")
        return node * self.gpus_per_node + local

    def gpu_of(self, flat: int) -> tuple[int, int]:
        """Inverse of :meth:`flat_id`: flat index back to ``(node, local)``."""
        if not 0 <= flat < self.num_gpus:
            raise ValueError(f"flat GPU id {flat} outside topology")
        return divmod(flat, self.gpus_per_node)

    def node_of(self, flat: int) -> int:
        return self.gpu_of(flat)[0]


@dataclass(frozen=True)
class ExpertPlacement:
    """Maps every expert id to the flat id of the GPU hosting it."""

    num_experts: int
    owner: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        owner = np.asarray(self.owner, dtype=np.int64)
        object.__setattr__(self, "owner", owner)
        if owner.shape != (self.num_experts,):
            raise ValueError("owner array must have one entry per expert")

    def owner_of(self, expert: int) -> int:
        if not 0 <= expert < self.num_experts:
            raise ValueError(f"expert {expert} out of range")
        return int(self.owner[expert])

    def experts_on(self, flat_gpu: int) -> np.ndarray:
        """Expert ids hosted on ``flat_gpu``, ascending."""
        return np.flatnonzero(self.owner == flat_gpu)

    def validate(self, topo: ClusterTopology) -> None:
        if self.num_experts and not (
            0 <= self.owner.min() and self.owner.max() < topo.num_gpus
        ):
            raise ValueError("placement references a GPU outside the topology")


def round_robin_placement(num_experts: int, topo: ClusterTopology) -> ExpertPlacement:
    """Expert ``e`` lives on flat GPU ``e % num_gpus``.

    With the expert count a multiple of the GPU count this is the standard
    balanced layout: every GPU hosts the same number of experts.
    """
    owner = np.arange(num_experts, dtype=np.int64) % topo.num_gpus
    return ExpertPlacement(num_experts=num_experts, owner=owner)


def to_json(topo: ClusterTopology, placement: ExpertPlacement) -> dict:
    return {
        "num_nodes": topo.num_nodes,
        "gpus_per_node": topo.gpus_per_node,
        "intra_bw": topo.intra_bw,
        "inter_bw": topo.inter_bw,
        "inter_latency": topo.inter_latency,
        "gpu_prep_bw": topo.gpu_prep_bw,
        "slice_bytes": topo.slice_bytes,
        "experts": {
            "count": placement.num_experts,
            "placement": [int(g) for g in placement.owner],
        },
    }


def from_json(doc: dict) -> tuple[ClusterTopology, ExpertPlacement]:
    topo = ClusterTopology(
        num_nodes=int(doc["num_nodes"]),
        gpus_per_node=int(doc["gpus_per_node"]),
        intra_bw=float(doc.get("intra_bw", DEFAULT_INTRA_BW)),
        inter_bw=float(doc.get("inter_bw", DEFAULT_INTER_BW)),
        inter_latency=float(doc.get("inter_latency", DEFAULT_INTER_LATENCY)),
        gpu_prep_bw=float(doc.get("gpu_prep_bw", DEFAULT_GPU_PREP_BW)),
        slice_bytes=int(doc.get("slice_bytes", DEFAULT_SLICE_BYTES)),
    )
    experts = doc["experts"]
    count = int(experts["count"])
    if "placement" in experts and experts["placement"] is not None:
        owner = np.asarray(experts["placement"], dtype=np.int64)
        placement = ExpertPlacement(num_experts=count, owner=owner)
    else:
        placement = round_robin_placement(count, topo)
    placement.validate(topo)
    return topo, placement


def load_topology(path: str | Path) -> tuple[ClusterTopology, ExpertPlacement]:
    """Read a topology JSON file.  See ``from_json`` for the layout."""
    with open(path) as fh:
        return from_json(json.load(fh))


def save_topology(
    path: str | Path, topo: ClusterTopology, placement: ExpertPlacement
) -> None:
    with open(path, "w") as fh:
        json.dump(to_json(topo, placement), fh, indent=2)
        fh.write("\n")


def preset(name: str) -> tuple[ClusterTopology, ExpertPlacement]:
    """Built-in topologies: ``test`` (4x4, 32 experts) and ``large`` (8x8, 256)."""
    if name == "test":
        topo = ClusterTopology(num_nodes=4, gpus_per_node=4)
        return topo, round_robin_placement(32, topo)
    if name == "large":
        topo = ClusterTopology(num_nodes=8, gpus_per_node=8)
        return topo, round_robin_placement(256, topo)
    raise ValueError(f"unknown preset {name!r}")
