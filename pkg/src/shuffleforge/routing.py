"""Token-to-expert routing and synthetic traffic generators.

Routing is captured as two aligned ``(num_tokens, topk)`` matrices: expert
ids and combine weights.  From those and an expert placement we derive the
per-token node matrix, whose first-appearance structure is what the
communication planner deduplicates against.

Three generators cover the interesting regimes: skewed real-world-like
popularity, single-node routing (every token's experts on one node), and a
bimodal load imbalance across GPUs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .topology import ClusterTopology, ExpertPlacement

_CHUNK = 8192


@dataclass(frozen=True)
class RoutingAssignment:
    """Where every token goes: experts, combine weights, and source GPU."""

    num_tokens: int
    topk: int
    experts: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    source: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        experts = np.ascontiguousarray(self.experts, dtype=np.int64)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        source = np.ascontiguousarray(self.source, dtype=np.int64)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "source", source)
        shape = (self.num_tokens, self.topk)
        if experts.shape != shape or weights.shape != shape:
            raise ValueError(f"experts and weights must have shape {shape}")
        if source.shape != (self.num_tokens,):
            raise ValueError("one source GPU per token")
        if self.num_tokens:
            if experts.min() < 0:
                raise ValueError("negative expert id")
            for row in range(0, self.num_tokens, _CHUNK):
                chunk = np.sort(experts[row : row + _CHUNK], axis=1)
                if self.topk > 1 and bool((chunk[:, 1:] == chunk[:, :-1]).any()):
                    raise ValueError("a token routes to the same expert twice")
            if weights.min() < 0:
                raise ValueError("negative combine weight")
            sums = weights.sum(axis=1)
            if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-6):
                raise ValueError("combine weights of a token must sum to 1")

    def validate(self, topo: ClusterTopology, placement: ExpertPlacement) -> None:
        if self.num_tokens == 0:
            return
        if self.experts.max() >= placement.num_experts:
            raise ValueError("expert id outside placement")
        if self.source.min() < 0 or self.source.max() >= topo.num_gpus:
            raise ValueError("source GPU outside topology")


@dataclass(frozen=True)
class TokenNodeMatrix:
    """Node of each routed expert, plus the first-appearance mask.

    ``first_mask[t, k]`` is True iff ``nodes[t, k]`` has not occurred
    earlier in row ``t``; exactly the entries a deduplicating plan ships.
    """

    nodes: np.ndarray = field(repr=False)
    first_mask: np.ndarray = field(repr=False)

    def distinct_nodes(self, token: int) -> np.ndarray:
        """Destination nodes of one token, in first-appearance order."""
        return self.nodes[token][self.first_mask[token]]


def derive_token_node(
    assignment: RoutingAssignment,
    placement: ExpertPlacement,
    topo: ClusterTopology,
) -> TokenNodeMatrix:
    owner = placement.owner[assignment.experts]
    nodes = owner // topo.gpus_per_node
    k = assignment.topk
    # first_mask[t, i]: no j < i with the same node in row t.
    eq = nodes[:, :, None] == nodes[:, None, :]
    earlier = np.tril(np.ones((k, k), dtype=bool), -1)
    first_mask = ~(eq & earlier).any(axis=2)
    return TokenNodeMatrix(nodes=nodes, first_mask=first_mask)


def default_sources(num_tokens: int, topo: ClusterTopology) -> np.ndarray:
    """Token ``t`` originates on flat GPU ``t % num_gpus``."""
    return np.arange(num_tokens, dtype=np.int64) % topo.num_gpus


def _dirichlet_weights(rng: np.random.Generator, num_tokens: int, topk: int) -> np.ndarray:
    if topk == 1:
        return np.ones((num_tokens, 1), dtype=np.float64)
    return rng.dirichlet(np.ones(topk), size=num_tokens)


def _as_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _gumbel_topk(
    rng: np.random.Generator, log_prob: np.ndarray, num_rows: int, topk: int
) -> np.ndarray:
    """Sample ``topk`` distinct indices per row, probabilities ``exp(log_prob)``.

    Perturbing log-probabilities with Gumbel noise and keeping the largest k
    draws without replacement, so no rejection loop is needed even for very
    skewed distributions.
    """
    out = np.empty((num_rows, topk), dtype=np.int64)
    for row in range(0, num_rows, _CHUNK):
        n = min(_CHUNK, num_rows - row)
        scores = log_prob[None, :] + rng.gumbel(size=(n, log_prob.size))
        top = np.argpartition(-scores, topk - 1, axis=1)[:, :topk]
        order = np.argsort(-np.take_along_axis(scores, top, axis=1), axis=1)
        out[row : row + n] = np.take_along_axis(top, order, axis=1)
    return out


def gen_realworld(
    num_tokens: int,
    topk: int,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    seed: int | np.random.Generator,
    zipf_s: float = 1.1,
) -> RoutingAssignment:
    """Skewed expert popularity, as captured from real serving traffic.

    Expert popularity follows a Zipf law with exponent ``zipf_s``; a seeded
    permutation assigns ranks to expert ids so the hot experts are not all
    clustered on low GPU indices.
    """
    rng = _as_rng(seed)
    num_experts = placement.num_experts
    if topk > num_experts:
        raise ValueError("topk exceeds expert count")
    ranks = np.empty(num_experts, dtype=np.int64)
    ranks[rng.permutation(num_experts)] = np.arange(num_experts)
    log_prob = -zipf_s * np.log(ranks + 1.0)
    log_prob -= np.log(np.exp(log_prob).sum())
    experts = _gumbel_topk(rng, log_prob, num_tokens, topk)
    return RoutingAssignment(
        num_tokens=num_tokens,
        topk=topk,
        experts=experts,
        weights=_dirichlet_weights(rng, num_tokens, topk),
        source=default_sources(num_tokens, topo),
    )


def _experts_per_node(
    placement: ExpertPlacement, topo: ClusterTopology, topk: int
) -> list[np.ndarray]:
    owner_node = placement.owner // topo.gpus_per_node
    per_node = [np.flatnonzero(owner_node == n) for n in range(topo.num_nodes)]
    for n, ids in enumerate(per_node):
        if ids.size < topk:
            raise ValueError(f"node {n} hosts {ids.size} experts, need {topk}")
    return per_node


def _node_local_experts(
    rng: np.random.Generator,
    per_node: list[np.ndarray],
    target: np.ndarray,
    topk: int,
) -> np.ndarray:
    """For each token, a uniform ``topk``-subset of its target node's experts."""
    experts = np.empty((target.size, topk), dtype=np.int64)
    for n, pool in enumerate(per_node):
        rows = np.flatnonzero(target == n)
        if rows.size == 0:
            continue
        # Random keys give a uniform k-subset of the node's experts per row.
        keys = rng.random((rows.size, pool.size))
        top = np.argpartition(keys, topk - 1, axis=1)[:, :topk]
        experts[rows] = pool[top]
    return experts


def gen_single_node(
    num_tokens: int,
    topk: int,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    seed: int | np.random.Generator,
    remote_only: bool = False,
) -> RoutingAssignment:
    """Every token routes all of its experts to a single node.

    The extreme dedup case: a naive exchange ships ``topk`` copies of every
    token across the network, a deduplicated one ships exactly one.  With
    ``remote_only`` the chosen node is never the token's own, so all traffic
    crosses node boundaries.
    """
    rng = _as_rng(seed)
    per_node = _experts_per_node(placement, topo, topk)
    if remote_only and topo.num_nodes < 2:
        raise ValueError("remote_only needs at least two nodes")

    source = default_sources(num_tokens, topo)
    if remote_only:
        own = source // topo.gpus_per_node
        pick = rng.integers(0, topo.num_nodes - 1, size=num_tokens)
        target = pick + (pick >= own)
    else:
        target = rng.integers(0, topo.num_nodes, size=num_tokens)

    return RoutingAssignment(
        num_tokens=num_tokens,
        topk=topk,
        experts=_node_local_experts(rng, per_node, target, topk),
        weights=_dirichlet_weights(rng, num_tokens, topk),
        source=source,
    )


def sample_bimodal_loads(num_gpus: int, rng: np.random.Generator) -> np.ndarray:
    """Per-GPU relative load: even mixture of Beta(2, 8) and Beta(8, 2).

    Half the GPUs sit in a cold mode near 0.2, half in a hot mode near 0.8,
    which is the shape of the measured imbalance this generator mimics.
    """
    cold = rng.beta(2.0, 8.0, size=num_gpus)
    hot = rng.beta(8.0, 2.0, size=num_gpus)
    return np.where(rng.random(num_gpus) < 0.5, cold, hot)


def gen_imbalanced(
    num_tokens: int,
    topk: int,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    seed: int | np.random.Generator,
) -> RoutingAssignment:
    """Bimodal per-GPU communication load: hot senders, nearly idle ones.

    Each source GPU draws a target remote fraction from the Beta mixture.
    A token goes remote with its GPU's fraction (all ``topk`` experts on
    one uniformly chosen other node) and stays on its own node otherwise,
    so per-GPU inter-node volume mirrors the bimodal draw.  GPUs of the
    same node end up with very different loads, which is exactly the
    situation group balancing is for.
    """
    rng = _as_rng(seed)
    per_node = _experts_per_node(placement, topo, topk)
    lam = sample_bimodal_loads(topo.num_gpus, rng)
    source = default_sources(num_tokens, topo)
    own = source // topo.gpus_per_node
    if topo.num_nodes > 1:
        goes_remote = rng.random(num_tokens) < lam[source]
        pick = rng.integers(0, topo.num_nodes - 1, size=num_tokens)
        target = np.where(goes_remote, pick + (pick >= own), own)
    else:
        target = own
    return RoutingAssignment(
        num_tokens=num_tokens,
        topk=topk,
        experts=_node_local_experts(rng, per_node, target, topk),
        weights=_dirichlet_weights(rng, num_tokens, topk),
        source=source,
    )


GENERATORS = {
    "realworld": gen_realworld,
    "single_node": gen_single_node,
    "imbalanced": gen_imbalanced,
}


def generate(
    pattern: str,
    num_tokens: int,
    topk: int,
    topo: ClusterTopology,
    placement: ExpertPlacement,
    seed: int | np.random.Generator,
) -> RoutingAssignment:
    try:
        gen = GENERATORS[pattern]
    except KeyError:
        raise ValueError(f"unknown traffic pattern {pattern!r}") from None
    return gen(num_tokens, topk, topo, placement, seed)


def save_trace(
    path: str | Path, assignment: RoutingAssignment, token_bytes: int
) -> None:
    """Write a routing trace as JSON, one entry per token."""
    entries = [
        {
            "token": t,
            "source_flat_gpu": int(assignment.source[t]),
            "experts": assignment.experts[t].tolist(),
            "weights": assignment.weights[t].tolist(),
        }
        for t in range(assignment.num_tokens)
    ]
    doc = {
        "num_tokens": assignment.num_tokens,
        "topk": assignment.topk,
        "token_bytes": int(token_bytes),
        "entries": entries,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_trace(path: str | Path) -> tuple[RoutingAssignment, int]:
    """Read a trace written by :func:`save_trace`; entries may be unordered."""
    with open(path) as fh:
        doc = json.load(fh)
    num_tokens = int(doc["num_tokens"])
    topk = int(doc["topk"])
    experts = np.full((num_tokens, topk), -1, dtype=np.int64)
    weights = np.zeros((num_tokens, topk), dtype=np.float64)
    source = np.full(num_tokens, -1, dtype=np.int64)
    for entry in doc["entries"]:
        t = int(entry["token"])
        if not 0 <= t < num_tokens:
            raise ValueError(f"trace entry for token {t} outside [0, {num_tokens})")
        experts[t] = entry["experts"]
        weights[t] = entry["weights"]
        source[t] = int(entry["source_flat_gpu"])
    if bool((source < 0).any()):
        missing = int(np.flatnonzero(source < 0)[0])
        raise ValueError(f"trace is missing an entry for token {missing}")
    assignment = RoutingAssignment(
        num_tokens=num_tokens,
        topk=topk,
        experts=experts,
        weights=weights,
        source=source,
    )
    return assignment, int(doc["token_bytes"])
