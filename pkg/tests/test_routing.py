import numpy as np
import pytest
from scipy import stats

from shuffleforge.routing import (
    RoutingAssignment,
    default_sources,
    derive_token_node,
    gen_imbalanced,
    gen_realworld,
    gen_single_node,
    generate,
    load_trace,
    sample_bimodal_loads,
    save_trace,
)
from shuffleforge.topology import preset


def first_mask_oracle(nodes_row):
    seen = set()
    out = []
    for n in nodes_row:
        out.append(n not in seen)
        seen.add(n)
    return out


def test_default_sources():
    topo, _ = preset("test")
    src = default_sources(40, topo)
    assert src.tolist() == [t % 16 for t in range(40)]


def test_token_node_first_mask_oracle():
    topo, placement = preset("test")
    for seed in range(5):
        a = gen_realworld(200, 4, topo, placement, seed=seed)
        tnm = derive_token_node(a, placement, topo)
        owner_node = placement.owner[a.experts] // topo.gpus_per_node
        assert np.array_equal(tnm.nodes, owner_node)
        for t in range(a.num_tokens):
            assert tnm.first_mask[t].tolist() == first_mask_oracle(tnm.nodes[t])


def test_distinct_nodes_first_appearance_order():
    topo, placement = preset("test")
    a = gen_realworld(100, 4, topo, placement, seed=3)
    tnm = derive_token_node(a, placement, topo)
    for t in range(100):
        expect = list(dict.fromkeys(tnm.nodes[t].tolist()))
        assert tnm.distinct_nodes(t).tolist() == expect


def test_assignment_validation():
    with pytest.raises(ValueError):  # duplicate expert in a row
        RoutingAssignment(
            num_tokens=1,
            topk=2,
            experts=np.array([[3, 3]]),
            weights=np.array([[0.5, 0.5]]),
            source=np.array([0]),
        )
    with pytest.raises(ValueError):  # weights not normalized
        RoutingAssignment(
            num_tokens=1,
            topk=2,
            experts=np.array([[0, 1]]),
            weights=np.array([[0.9, 0.2]]),
            source=np.array([0]),
        )
    with pytest.raises(ValueError):  # negative weight
        RoutingAssignment(
            num_tokens=1,
            topk=2,
            experts=np.array([[0, 1]]),
            weights=np.array([[1.2, -0.2]]),
            source=np.array([0]),
        )
    topo, placement = preset("test")
    a = RoutingAssignment(
        num_tokens=1,
        topk=2,
        experts=np.array([[0, 99]]),
        weights=np.array([[0.5, 0.5]]),
        source=np.array([0]),
    )
    with pytest.raises(ValueError):  # expert outside placement
        a.validate(topo, placement)


def test_weights_dirichlet():
    topo, placement = preset("test")
    a = gen_realworld(500, 4, topo, placement, seed=1)
    sums = a.weights.sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-9)
    assert a.weights.min() >= 0
    # not degenerate: spread over the simplex
    assert a.weights.std() > 0.05
    one = gen_realworld(50, 1, topo, placement, seed=1)
    assert np.all(one.weights == 1.0)


def test_rows_have_distinct_experts():
    topo, placement = preset("test")
    for gen, kw in [
        (gen_realworld, {}),
        (gen_single_node, {}),
        (gen_single_node, {"remote_only": True}),
        (gen_imbalanced, {}),
    ]:
        a = gen(300, 4, topo, placement, seed=8, **kw)
        srt = np.sort(a.experts, axis=1)
        assert not (srt[:, 1:] == srt[:, :-1]).any()


def test_single_node_routes_one_node():
    topo, placement = preset("test")
    a = gen_single_node(1000, 4, topo, placement, seed=5)
    tnm = derive_token_node(a, placement, topo)
    assert np.all(tnm.first_mask.sum(axis=1) == 1)
    # chosen node is uniform over all nodes
    chi = stats.chisquare(np.bincount(tnm.nodes[:, 0], minlength=4))
    assert chi.pvalue > 0.01


def test_single_node_remote_only():
    topo, placement = preset("test")
    a = gen_single_node(800, 4, topo, placement, seed=6, remote_only=True)
    tnm = derive_token_node(a, placement, topo)
    src_node = a.source // topo.gpus_per_node
    assert np.all(tnm.first_mask.sum(axis=1) == 1)
    assert np.all(tnm.nodes[:, 0] != src_node)


def test_single_node_needs_enough_experts():
    topo, placement = preset("test")
    with pytest.raises(ValueError):
        gen_single_node(10, 9, topo, placement, seed=0)


def test_realworld_popularity_is_zipf_ranked():
    topo, placement = preset("test")
    a = gen_realworld(4000, 4, topo, placement, seed=11)
    # The generator's first draw on the seeded stream is the rank permutation.
    rng = np.random.default_rng(11)
    perm = rng.permutation(placement.num_experts)
    ranks = np.empty(placement.num_experts, dtype=np.int64)
    ranks[perm] = np.arange(placement.num_experts)
    counts = np.bincount(a.experts.ravel(), minlength=placement.num_experts)
    rho = stats.spearmanr(counts, -ranks).statistic
    assert rho > 0.9
    assert counts.max() / counts.sum() > 3.0 / placement.num_experts


def test_bimodal_load_sample_shape():
    rng = np.random.default_rng(123)
    vals = sample_bimodal_loads(4000, rng)
    assert vals.min() >= 0 and vals.max() <= 1
    kde = stats.gaussian_kde(vals)
    lo, mid, hi = kde([0.125, 0.5, 0.875])
    # two modes near the Beta(2,8) and Beta(8,2) peaks, a valley between
    assert lo > 2.0 * mid
    assert hi > 2.0 * mid


def test_imbalanced_tracks_per_gpu_targets():
    topo, placement = preset("test")
    a = gen_imbalanced(8000, 4, topo, placement, seed=21)
    tnm = derive_token_node(a, placement, topo)
    src_node = a.source // topo.gpus_per_node
    remote = tnm.nodes[:, 0] != src_node
    assert np.all(tnm.first_mask.sum(axis=1) == 1)
    # The generator's draws start with the two Beta arrays and the mixture
    # pick, exactly as sample_bimodal_loads makes them.
    lam = sample_bimodal_loads(topo.num_gpus, np.random.default_rng(21))
    frac = np.zeros(topo.num_gpus)
    for g in range(topo.num_gpus):
        mine = a.source == g
        frac[g] = remote[mine].mean()
    assert np.abs(frac - lam).max() < 0.1
    assert stats.pearsonr(frac, lam).statistic > 0.95


def test_generate_dispatch():
    topo, placement = preset("test")
    a = generate("single_node", 50, 2, topo, placement, seed=0)
    assert a.num_tokens == 50
    with pytest.raises(ValueError):
        generate("nope", 50, 2, topo, placement, seed=0)


def test_trace_round_trip(tmp_path):
    topo, placement = preset("test")
    a = gen_realworld(60, 4, topo, placement, seed=2)
    path = tmp_path / "trace.json"
    save_trace(path, a, token_bytes=512)
    b, tb = load_trace(path)
    assert tb == 512
    assert b.num_tokens == a.num_tokens and b.topk == a.topk
    assert np.array_equal(b.experts, a.experts)
    assert np.array_equal(b.source, a.source)
    assert np.array_equal(b.weights, a.weights)


def test_trace_unordered_and_missing(tmp_path):
    import json

    topo, placement = preset("test")
    a = gen_realworld(5, 2, topo, placement, seed=4)
    path = tmp_path / "trace.json"
    save_trace(path, a, token_bytes=64)
    doc = json.loads(path.read_text())
    doc["entries"] = doc["entries"][::-1]
    path.write_text(json.dumps(doc))
    b, _ = load_trace(path)
    assert np.array_equal(b.experts, a.experts)

    doc["entries"] = doc["entries"][1:]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_trace(path)
