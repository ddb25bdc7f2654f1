"""Fused data-transformation-and-communication shuffling, simulated.

The package models the token exchange of expert-parallel MoE layers on a
multi-node GPU cluster: segment descriptors drive gather and scatter fused
with transfer, a two-level plan deduplicates inter-node traffic through
per-node forwarders, a load balancer spreads heavy GPUs across
communication groups, and a pipelined engine prices or actually executes
the whole exchange against a disaggregated pack/all-to-all/unpack baseline.
"""

from .balancer import (
    greedy_groups,
    group_load,
    optimal_groups,
    static_groups,
)
from .descriptor import DescriptorList, Slice
from .engine import (
    CostModel,
    ExchangeResult,
    PhaseReport,
    make_token_payloads,
    pipeline_time,
    run_baseline,
    run_exchange,
)
from .planner import (
    CommPlan,
    build_combine_plan,
    build_direct_plans,
    build_dispatch_plan,
    build_plan_pair,
    dedup_ratio,
    dispatch_loads,
)
from .routing import (
    RoutingAssignment,
    derive_token_node,
    gen_imbalanced,
    gen_realworld,
    gen_single_node,
    load_trace,
    save_trace,
)
from .topology import (
    ClusterTopology,
    ExpertPlacement,
    load_topology,
    preset,
    round_robin_placement,
    save_topology,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterTopology",
    "CommPlan",
    "CostModel",
    "DescriptorList",
    "ExchangeResult",
    "ExpertPlacement",
    "PhaseReport",
    "RoutingAssignment",
    "Slice",
    "build_combine_plan",
    "build_direct_plans",
    "build_dispatch_plan",
    "build_plan_pair",
    "dedup_ratio",
    "derive_token_node",
    "dispatch_loads",
    "gen_imbalanced",
    "gen_realworld",
    "gen_single_node",
    "greedy_groups",
    "group_load",
    "load_topology",
    "load_trace",
    "make_token_payloads",
    "optimal_groups",
    "pipeline_time",
    "preset",
    "round_robin_placement",
    "run_baseline",
    "run_exchange",
    "save_topology",
    "save_trace",
    "static_groups",
    "__version__",
]
