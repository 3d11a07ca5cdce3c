import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drgw.graph import (AttackSpec, DegenerateAugmentationError, EditPlan, Graph, GraphError,
                        InvalidPlanError, UnsupportedAttackError, apply_edit_plan, attack, augment,
                        check_graph, check_graphs, format_edge_list, graph_from_dict, graph_to_dict,
                        parse_edge_list, permute, read_graph, sample_candidates, sample_non_edges,
                        write_graph)

from conftest import path3, triangle


@st.composite
def graphs(draw, max_nodes=12):
    n = draw(st.integers(2, max_nodes))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    edges = np.array([p for p, m in zip(pairs, mask) if m], dtype=np.int64).reshape(-1, 2)
    return Graph(n, edges)


@st.composite
def graph_and_plan(draw):
    g = draw(graphs())
    pairs = [(u, v) for u in range(g.num_nodes) for v in range(u + 1, g.num_nodes)]
    idx = draw(st.lists(st.integers(0, len(pairs) - 1), unique=True, max_size=len(pairs)))
    flips = np.array([pairs[i] for i in idx], dtype=np.int64).reshape(-1, 2)
    return g, EditPlan(flips, len(idx) + draw(st.integers(0, 3)))


def test_edges_are_canonical_and_sorted():
    g = Graph(4, np.array([[3, 1], [0, 2], [1, 0]]))
    assert g.edges.tolist() == [[0, 1], [0, 2], [1, 3]]
    assert g == Graph(4, np.array([[1, 3], [0, 2], [0, 1]]))


@pytest.mark.parametrize("edges", [[[0, 0]], [[0, 5]], [[0, 1], [1, 0]], [[-1, 2]]])
def test_invalid_edges_rejected(edges):
    with pytest.raises(GraphError):
        Graph(3, np.array(edges))


def test_triangle_flip_removes_one_edge():
    out = apply_edit_plan(triangle(), EditPlan(np.array([[0, 1]]), 1))
    assert out.edges.tolist() == [[0, 2], [1, 2]]


def test_flip_adds_missing_edge():
    out = apply_edit_plan(path3(), EditPlan(np.array([[0, 2]]), 1))
    assert out == triangle()


def test_plan_over_budget_rejected():
    with pytest.raises(InvalidPlanError):
        EditPlan(np.array([[0, 1], [1, 2]]), 1)


def test_plan_node_out_of_range_rejected():
    with pytest.raises(InvalidPlanError):
        apply_edit_plan(triangle(), EditPlan(np.array([[0, 7]]), 1))


def test_plan_duplicates_and_loops_rejected():
    with pytest.raises(InvalidPlanError):
        EditPlan(np.array([[0, 1], [1, 0]]), 3)
    with pytest.raises(InvalidPlanError):
        EditPlan(np.array([[2, 2]]), 3)


@given(graph_and_plan())
def test_apply_plan_twice_is_identity(gp):
    g, plan = gp
    assert apply_edit_plan(apply_edit_plan(g, plan), plan) == g


@given(graph_and_plan())
def test_changed_pairs_equal_plan(gp):
    g, plan = gp
    out = apply_edit_plan(g, plan)
    changed = np.setxor1d(g.edge_keys(), out.edge_keys())
    keys = np.sort(plan.flips[:, 0] * g.num_nodes + plan.flips[:, 1])
    assert np.array_equal(changed, keys)


@given(graphs(), st.integers(0, 2 ** 32 - 1))
def test_isomorphism_attack_preserves_degree_multiset(g, seed):
    out, align = attack(g, AttackSpec("isomorphism", 0.0, seed), return_alignment=True)
    assert np.array_equal(np.sort(out.degrees()), np.sort(g.degrees()))
    # alignment maps attacked node i back to its source node
    assert np.array_equal(out.degrees(), g.degrees()[align])


@given(graphs(), st.floats(0, 1), st.integers(0, 1000))
def test_edge_flip_changes_exact_count(g, intensity, seed):
    out = attack(g, AttackSpec("edge_flip", intensity, seed))
    changed = np.setxor1d(g.edge_keys(), out.edge_keys()).size
    expected = int(np.floor(intensity * g.num_edges))
    assert changed == min(expected, g.num_edges + min(g.num_edges, g.num_nodes * (g.num_nodes - 1) // 2 - g.num_edges))


def test_edge_flip_30pct_of_100_edges():
    nxg = nx.gnm_random_graph(40, 100, seed=1)
    g = Graph.from_networkx(nxg)
    out = attack(g, AttackSpec("edge_flip", 0.3, 7))
    assert np.setxor1d(g.edge_keys(), out.edge_keys()).size == 30


def test_node_delete_alignment_and_count():
    g = Graph.from_networkx(nx.gnm_random_graph(20, 50, seed=2))
    out, keep = attack(g, AttackSpec("node_delete", 0.25, 3), return_alignment=True)
    assert out.num_nodes == 15 and keep.size == 15
    for u, v in out.edges:
        assert g.has_edge(keep[u], keep[v])


def test_attack_is_deterministic():
    g = Graph.from_networkx(nx.gnm_random_graph(30, 60, seed=4))
    spec = AttackSpec("edge_flip", 0.2, 11)
    assert attack(g, spec) == attack(g, spec)


def test_latent_noise_needs_models():
    with pytest.raises(UnsupportedAttackError):
        attack(triangle(), AttackSpec("latent_noise", 0.1, 0))


@pytest.mark.parametrize("kind,intensity", [("bogus", 0.1), ("edge_flip", 1.5), ("edge_flip", -0.1)])
def test_attack_spec_validation(kind, intensity):
    with pytest.raises(ValueError):
        AttackSpec(kind, intensity)


def test_augment_degenerate():
    with pytest.raises(DegenerateAugmentationError):
        augment(Graph(0), 0.5, 0.0, 0)
    with pytest.raises(ValueError):
        augment(triangle(), 1.0, 0.0, 0)


def test_augment_zero_fractions_is_identity():
    g = Graph.from_networkx(nx.gnm_random_graph(15, 30, seed=3))
    assert augment(g, 0.0, 0.0, 5) == g


@given(graphs(), st.integers(0, 10 ** 6))
def test_sample_non_edges_are_distinct_non_edges(g, seed):
    rng = np.random.default_rng(seed)
    ne = sample_non_edges(g, 10, rng)
    keys = ne[:, 0] * g.num_nodes + ne[:, 1]
    assert np.unique(keys).size == keys.size
    assert not np.isin(keys, g.edge_keys()).any()
    assert (ne[:, 0] < ne[:, 1]).all()


def test_candidates_start_with_edges():
    g = Graph.from_networkx(nx.gnm_random_graph(12, 20, seed=1))
    c = sample_candidates(g, 20, 0)
    assert np.array_equal(c[:20], g.edges)
    assert c.shape == (40, 2)


def test_permute_relabels():
    g = path3()
    out = permute(g, np.array([2, 0, 1]))
    assert out.edges.tolist() == [[0, 1], [0, 2]]


@given(graphs())
def test_edge_list_round_trip(g):
    assert parse_edge_list(format_edge_list(g)) == g
    assert graph_from_dict(json.loads(json.dumps(graph_to_dict(g)))) == g


@pytest.mark.parametrize("text,needle", [
    ("3 1\n0 0\n", ":2: self-loop"),
    ("3 2\n0 1\n1 0\n", ":3: duplicate edge"),
    ("3 1\n0 9\n", ":2: node id out of range"),
    ("3 1\n0 x\n", ":2: expected integers"),
    ("3 2\n0 1\n", "declares 2 edges"),
    ("", "missing 'N M' header"),
])
def test_parse_errors_are_line_precise(text, needle):
    with pytest.raises(GraphError, match=needle):
        parse_edge_list(text, "f.txt")


def test_read_write_both_formats(tmp_path):
    g = Graph.from_networkx(nx.gnm_random_graph(10, 15, seed=1))
    for name in ("g.txt", "g.json"):
        write_graph(g, tmp_path / name)
        assert read_graph(tmp_path / name) == g


def test_check_graph_accepts_common_inputs():
    nxg = nx.path_graph(4)
    a = nx.to_numpy_array(nxg)
    assert check_graph(nxg) == check_graph(a) == Graph(4, np.array([[0, 1], [1, 2], [2, 3]]))
    with pytest.raises(GraphError):
        check_graph(np.array([[0, 1], [0, 0]]))
    with pytest.raises(GraphError):
        check_graph(nx.DiGraph([(0, 1)]))
    with pytest.raises(TypeError):
        check_graphs(triangle())
