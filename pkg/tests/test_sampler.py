import itertools
import random

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from kgworlds.kg_store import KnowledgeGraph
from kgworlds.sampler import (ConfigError, SamplerConfig, SamplingError, Universe, expand_frontier, k_core,
                              largest_component, largest_connected_component, relation_distribution,
                              sample_universe)

from conftest import ent, fact, graph_from_edges, lit_fact


def oracle_distribution(sizes, uniformity):
    mpmath.mp.dps = 50
    alpha = 1 - mpmath.mpf(uniformity)
    w = {r: mpmath.mpf(n) ** alpha for r, n in sizes.items() if n > 0}
    total = mpmath.fsum(w.values())
    return {r: x / total for r, x in w.items()}


def peel_oracle(adj, k):
    """Remove any node of degree < k until none is left; no queue, no bookkeeping."""
    alive = set(adj)
    while True:
        low = [v for v in alive if len(adj[v] & alive) < k]
        if not low:
            return alive
        alive -= set(low)


def test_distribution_limits():
    assert relation_distribution({"r1": 4, "r2": 1}, 1.0) == {"r1": 0.5, "r2": 0.5}
    assert relation_distribution({"r1": 4, "r2": 1}, 0.0) == {"r1": 0.8, "r2": 0.2}


def test_distribution_intermediate_against_oracle():
    got = relation_distribution({"r1": 4, "r2": 1}, 0.6)
    want = oracle_distribution({"r1": 4, "r2": 1}, 0.6)
    assert abs(got["r1"] - float(want["r1"])) < 1e-12
    assert round(got["r1"], 4) == 0.6352 and round(got["r2"], 4) == 0.3648


def test_distribution_accepts_groups_and_skips_empty():
    assert relation_distribution({"a": [1, 2], "b": []}, 0.5) == {"a": 1.0}
    assert relation_distribution({"a": 0}, 0.5) == {}


@settings(max_examples=200)
@given(st.dictionaries(st.sampled_from("abcdefgh"), st.integers(1, 10_000), min_size=1),
       st.floats(0, 1, allow_nan=False))
def test_distribution_is_a_probability_vector(sizes, u):
    p = relation_distribution(sizes, u)
    assert abs(sum(p.values()) - 1) < 1e-12
    # larger groups never get less mass
    order = sorted(sizes, key=sizes.get)
    for a, b in zip(order, order[1:]):
        assert p[a] <= p[b] + 1e-15


def test_config_validation():
    SamplerConfig(seeds=["Q1"], iterations=11, uniformity=0.6, k=19)
    for bad in ({"seeds": []}, {"seeds": ["Q1"], "k": 0}, {"seeds": ["Q1"], "uniformity": 1.5},
                {"seeds": ["Q1"], "iterations": 0}, {"seeds": ["Q1"], "rng_seed": -1}):
        with pytest.raises(ConfigError):
            SamplerConfig(**bad)
    with pytest.raises(ConfigError):
        SamplerConfig.from_mapping({"seeds": ["Q1"], "colour": 3})


def test_star_one_full_expansion():
    kg = graph_from_edges([("Q0", f"Q{i}") for i in range(1, 9)] + [("Q1", "Q2")])
    out = expand_frontier(kg, SamplerConfig(seeds=["Q0"], iterations=1, per_node_cap=None))
    assert set(out.entities) == set(kg.entities)


def test_path_with_cap_one_reaches_three_nodes():
    kg = graph_from_edges([("Q1", "Q2"), ("Q2", "Q3"), ("Q3", "Q4"), ("Q4", "Q5")])
    out = expand_frontier(kg, SamplerConfig(seeds=["Q1"], iterations=2, per_node_cap=1, k=1))
    assert sorted(out.entities) == ["Q1", "Q2", "Q3"]


def test_unknown_seed_is_a_config_error():
    with pytest.raises(ConfigError, match="Q404"):
        expand_frontier(graph_from_edges([("Q1", "Q2")]), SamplerConfig(seeds=["Q404"]))


def _random_graph(rng, n, p):
    nodes = [f"Q{i}" for i in range(n)]
    edges = [(a, b) for a, b in itertools.combinations(nodes, 2) if rng.random() < p]
    return KnowledgeGraph.build([ent(x, f"Node {x}") for x in nodes],
                                [fact(a, rng.choice(["r1", "r2", "r3"]), b) for a, b in edges])


def test_expansion_is_deterministic_and_independent_of_workers():
    kg = _random_graph(random.Random(5), 60, 0.08)
    cfg = dict(seeds=["Q0", "Q7"], iterations=4, per_node_cap=3, rng_seed=11)
    a = expand_frontier(kg, SamplerConfig(**cfg))
    b = expand_frontier(kg, SamplerConfig(**cfg))
    c = expand_frontier(kg, SamplerConfig(**cfg, workers=4))
    assert a.dumps() == b.dumps() == c.dumps()
    d = expand_frontier(kg, SamplerConfig(**{**cfg, "rng_seed": 12}))
    assert d.dumps() != a.dumps()


def test_k_core_small_cases():
    tri_pendant = graph_from_edges([("Q1", "Q2"), ("Q2", "Q3"), ("Q1", "Q3"), ("Q3", "Q4")])
    assert sorted(k_core(tri_pendant, 2).entities) == ["Q1", "Q2", "Q3"]
    assert not k_core(graph_from_edges([("Q1", "Q2"), ("Q2", "Q3"), ("Q1", "Q3")]), 4).entities


def test_petersen_is_its_own_3_core():
    outer = [(f"Q{i}", f"Q{(i + 1) % 5}") for i in range(5)]
    spokes = [(f"Q{i}", f"Q{i + 5}") for i in range(5)]
    inner = [(f"Q{i + 5}", f"Q{(i + 2) % 5 + 5}") for i in range(5)]
    g = graph_from_edges(outer + spokes + inner)
    assert set(k_core(g, 3).entities) == set(g.entities) == peel_oracle(
        {k: set(v) for k, v in g.adjacency.items()}, 3)


def test_parallel_facts_and_self_loops_do_not_count_as_degree():
    g = KnowledgeGraph.build([ent("Q1", "A"), ent("Q2", "B")],
                             [fact("Q1", "r1", "Q2"), fact("Q1", "r2", "Q2"), fact("Q1", "r3", "Q1")])
    assert not k_core(g, 2).entities


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 30), st.integers(1, 5))
def test_k_core_matches_peeling_oracle(seed, n, k):
    g = _random_graph(random.Random(seed), n, 0.2)
    assert set(k_core(g, k).entities) == peel_oracle({a: set(b) for a, b in g.adjacency.items()}, k)


def test_largest_component_size_then_tie_break():
    g = graph_from_edges([("Q1", "Q2"), ("Q2", "Q3"), ("Q4", "Q5"), ("Q5", "Q6"), ("Q6", "Q7"), ("Q7", "Q8")])
    assert sorted(largest_connected_component(g).entities) == ["Q4", "Q5", "Q6", "Q7", "Q8"]
    tie = {"Q2": {"Q3"}, "Q3": {"Q2", "Q4"}, "Q4": {"Q3"}, "Q1": {"Q5"}, "Q5": {"Q1", "Q6"}, "Q6": {"Q5"}}
    assert largest_component(tie) == {"Q1", "Q5", "Q6"}
    conn = graph_from_edges([("Q1", "Q2"), ("Q2", "Q3")])
    assert largest_connected_component(conn).dumps() == conn.dumps()


def test_k1_keeps_connected_expansion():
    kg = _random_graph(random.Random(2), 40, 0.1)
    lcc = largest_connected_component(kg)
    seed = sorted(lcc.entities)[0]
    exp = expand_frontier(kg, SamplerConfig(seeds=[seed], iterations=3, per_node_cap=4))
    assert k_core(exp, 1).dumps() == exp.dumps()


def test_dense_graph_core_then_lcc_matches_oracle():
    kg = _random_graph(random.Random(9), 30, 0.3)
    seed = "Q0"
    cfg = SamplerConfig(seeds=[seed], iterations=3, per_node_cap=None, k=5)
    u = sample_universe(kg, cfg)
    exp = expand_frontier(kg, cfg)
    alive = peel_oracle({a: set(b) for a, b in exp.adjacency.items()}, 5)
    sub = {a: set(b) & alive for a, b in exp.adjacency.items() if a in alive}
    comps = []
    left = set(sub)
    while left:
        start = min(left)
        comp, stack = set(), [start]
        while stack:
            v = stack.pop()
            if v not in comp:
                comp.add(v)
                stack.extend(sub[v] - comp)
        comps.append(comp)
        left -= comp
    want = sorted(comps, key=lambda c: (-len(c), min(c)))[0]
    assert set(u.graph.entities) == want


def test_universe_attaches_literals_and_types():
    ents = [ent("Q1", "Alpha", ["Q9"]), ent("Q2", "Beta", ["Q9"]), ent("Q3", "Gamma", ["Q9"]), ent("Q9", "town")]
    facts = [fact("Q1", "r", "Q2"), fact("Q2", "r", "Q3"), fact("Q3", "r", "Q1"),
             lit_fact("Q1", "P569", "timestamp", "1935-01-15")]
    kg = KnowledgeGraph.build(ents, facts)
    u = sample_universe(kg, SamplerConfig(seeds=["Q1"], iterations=2, k=2, per_node_cap=None))
    assert any(not f.is_entity_fact for f in u.graph.facts)
    assert u.type_labels["Q1"] == "town"
    assert u.provenance["parent_fingerprint"] == kg.fingerprint()


def test_empty_core_is_reported():
    kg = graph_from_edges([("Q1", "Q2")])
    with pytest.raises(SamplingError, match="k"):
        sample_universe(kg, SamplerConfig(seeds=["Q1"], iterations=1, k=3))


def test_universe_save_load(tmp_path):
    kg = _random_graph(random.Random(1), 20, 0.3)
    u = sample_universe(kg, SamplerConfig(seeds=["Q0"], iterations=2, k=2))
    u.save(tmp_path)
    again = Universe.load(tmp_path)
    assert again.dumps() == u.dumps()
