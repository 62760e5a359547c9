import numpy as np
from hypothesis import given, settings, strategies as st

from tgode.data import InteractionSequence, Interaction, build_dataset
from tgode.graphs import (
    ItemEvolutionGraph,
    TimedEdge,
    adjacency_snapshot,
    build_item_evolution_graph,
    build_user_time_graph,
    read_edge_list,
    write_edge_list,
)


def seq(pairs, user=0):
    items, times = zip(*pairs)
    return InteractionSequence(user, tuple(items), tuple(range(len(items))), tuple(times))


def edge_set(g):
    return {(e.src_item, e.dst_item, e.time, e.weight) for e in g.edges}


def test_consecutive_pairs():
    g = build_user_time_graph(seq([(0, 0.1), (1, 0.5), (2, 0.9)]))
    assert edge_set(g) == {(0, 1, 0.5, 1.0), (1, 2, 0.9, 1.0)}


def test_single_item_sequence():
    g = build_user_time_graph(seq([(0, 0.2)]))
    assert g.edges == () and g.node_items == {0}


def test_repeated_pairs_merge():
    # a=0, b=1: a->b at 0.2 and 0.4, b->a at 0.3
    g = build_user_time_graph(seq([(0, 0.1), (1, 0.2), (0, 0.3), (1, 0.4)]))
    assert edge_set(g) == {(0, 1, 0.4, 2.0), (1, 0, 0.3, 1.0)}


def test_item_graph_union_and_merge():
    s1 = seq([(0, 0.1), (1, 0.3)], user=0)
    s2 = seq([(0, 0.5), (1, 0.7)], user=1)
    g = build_item_evolution_graph([s1, s2], num_items=4)
    assert edge_set(g) == {(0, 1, 0.7, 2.0)}
    assert len(g.node_items) == 4


def test_item_graph_without_transitions():
    d = build_dataset([Interaction(f"u{k}", f"i{k}", k) for k in range(5)])
    g = build_item_evolution_graph(d)
    assert g.edges == () and len(g.node_items) == d.item_vocab_size


def test_item_graph_total_weight():
    d = build_dataset([Interaction(f"u{k % 4}", f"i{(k * 7) % 5}", k) for k in range(30)])
    g = build_item_evolution_graph(d)
    assert sum(e.weight for e in g.edges) == sum(len(s) - 1 for s in d.sequences)
    assert [e.time for e in g.edges] == sorted(e.time for e in g.edges)


def test_snapshot_strict_boundary():
    g = ItemEvolutionGraph(2, (TimedEdge(0, 1, 0.5),))
    assert adjacency_snapshot(g, 0.5).num_edges == 0
    assert adjacency_snapshot(g, 0.5, inclusive=True).num_edges == 1


def test_snapshot_row_normalization():
    g = ItemEvolutionGraph(3, (TimedEdge(0, 1, 0.2, 2.0), TimedEdge(0, 2, 0.3, 2.0)))
    dense = adjacency_snapshot(g, 1.0).dense(3)
    np.testing.assert_allclose(dense[0], [0.0, 0.5, 0.5])
    np.testing.assert_allclose(dense[1:], 0.0)


random_edges = st.lists(
    st.tuples(st.integers(0, 6), st.integers(0, 6), st.floats(0, 1), st.floats(0.1, 5)),
    min_size=20, max_size=20,
)


@settings(max_examples=50, deadline=None)
@given(random_edges, st.floats(0, 1), st.floats(0, 1))
def test_snapshot_properties(raw, t1, t2):
    g = ItemEvolutionGraph(7, tuple(TimedEdge(s, d, t, w) for s, d, t, w in raw))
    assert adjacency_snapshot(g, 0.0).num_edges == 0
    lo, hi = sorted((t1, t2))
    a, b = adjacency_snapshot(g, lo), adjacency_snapshot(g, hi)
    pairs = lambda s: set(zip(s.src.tolist(), s.dst.tolist(), s.weight.tolist()))
    assert pairs(a) <= pairs(b)
    dense = b.dense(7)
    sums = dense.sum(1)
    for row in range(7):
        # brute-force row sums
        if any(s == row for s in b.src):
            assert abs(sums[row] - 1.0) < 1e-6
        else:
            assert sums[row] == 0.0


def test_edge_list_roundtrip(tmp_path):
    g = build_user_time_graph(seq([(3, 0.1), (4, 0.25), (3, 0.75)]))
    path = tmp_path / "edges.txt"
    write_edge_list(g, path)
    assert path.read_text().splitlines()[0] == "3 4 1 0.25"
    assert set(read_edge_list(path)) == set(g.edges)
