import random

import numpy as np
import pytest
import torch

from oracles import oracle_added_edges, oracle_grid, oracle_picks, random_sequence
from tgode.augment import (
    augment_many,
    build_augmented_graph,
    build_pivot_grid,
    infer_user_scores,
    nearest_pivot,
    pivot_times,
    top_items,
    write_audit_log,
)
from tgode.data import InteractionSequence
from tgode.diffusion import DiffusionGenerator
from tgode.graphs import build_user_time_graph

V, D = 15, 4


def make_generator(seed=0):
    torch.manual_seed(seed)
    gen = DiffusionGenerator(V, D, d_z=4, hidden=8, K=3, time_dim=4).double()
    # random decoder so scores are informative rather than all zero
    torch.nn.init.normal_(gen.score_decoder[-1].weight)
    return gen


def hs_fn(prefixes, times):
    # deterministic stand-in for the recommender's sequence representation
    out = torch.zeros(len(prefixes), D, dtype=torch.float64)
    for n, (p, t) in enumerate(zip(prefixes, times)):
        for i in p.items:
            out[n, i % D] += 1.0
        out[n, 0] += t
    return out


def seq(pairs, user=0):
    items, times = zip(*pairs)
    return InteractionSequence(user, tuple(items), tuple(range(len(items))), tuple(times))


def test_pivot_grid_example():
    s = seq([(0, 0.0), (1, 0.05), (2, 1.0)])
    g = build_pivot_grid(s, m=5)
    assert g.pivots == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert g.uncovered == (0.25, 0.5, 0.75)
    assert g.l_num == 1


def test_nearest_pivot_tie_goes_to_smaller():
    assert nearest_pivot(pivot_times(3), 0.25) == 0.0


def test_fully_covered_adds_nothing():
    s = seq([(k, k / 3) for k in range(4)])
    g = build_pivot_grid(s, m=4)
    assert g.uncovered == () and g.l_num == 0
    aug = build_augmented_graph(s, g, make_generator(), hs_fn)
    assert aug.added == () and set(aug.edges) == set(build_user_time_graph(s).edges)


def test_l_num_floor():
    s = seq([(k, 0.0) for k in range(9)])
    g = build_pivot_grid(s, m=4)
    assert len(g.uncovered) == 3 and g.l_num == 3
    s = seq([(0, 0.0)])
    assert build_pivot_grid(s, m=8).l_num == 1


def test_top_items_ties_and_masking():
    scores = np.array([0.5, -np.inf, 0.5, 0.9, 0.1])
    assert top_items(scores, 3) == [3, 0, 2]
    assert top_items(np.array([-np.inf, -np.inf]), 2) == []


def test_infer_requires_uncovered_pivot():
    s = seq([(0, 0.0), (1, 1.0)])
    g = build_pivot_grid(s, m=3)
    with pytest.raises(ValueError):
        infer_user_scores(s, 0.0, make_generator(), hs_fn, grid=g)


def test_infer_masks_history_before_pivot():
    s = seq([(3, 0.1), (4, 0.9)])
    scores = infer_user_scores(s, 0.5, make_generator(), hs_fn).numpy()
    assert scores[3] == -np.inf
    assert np.isfinite(scores[4])


def test_randomized_against_oracle():
    rng = random.Random(1234)
    gen = make_generator()
    seqs = [random_sequence(rng, V, user=u) for u in range(100)]
    ms = [rng.choice([1, 2, 3, 5, 8]) for _ in seqs]
    grids = [build_pivot_grid(s, m) for s, m in zip(seqs, ms)]
    graphs = augment_many(seqs, grids, gen, hs_fn, batch_size=7)
    for s, m, grid, aug in zip(seqs, ms, grids, graphs):
        pivots, covered, uncovered, l_num = oracle_grid(s.norm_times, m)
        assert set(grid.covered) | set(grid.uncovered) == set(pivots)
        assert set(grid.covered) == covered and not covered & set(grid.uncovered)
        assert list(grid.uncovered) == uncovered and grid.l_num == l_num
        base = build_user_time_graph(s)
        assert set(base.edges) <= set(aug.edges)
        assert base.node_items <= aug.node_items
        picks = {}
        for p in uncovered:
            scores = infer_user_scores(s, p, gen, hs_fn).numpy()
            picks[p] = oracle_picks(s, p, scores, l_num)
        per_pivot = {}
        for pivot, item, _ in aug.inserted:
            per_pivot.setdefault(pivot, []).append(item)
        assert set(per_pivot) <= set(uncovered)
        for p, items in per_pivot.items():
            assert len(items) <= l_num
        assert {p: v for p, v in per_pivot.items()} == {p: v for p, v in picks.items() if v}
        got = sorted((e.src_item, e.dst_item, e.time) for e in aug.added_edges)
        assert got == oracle_added_edges(s, picks)


def test_audit_log(tmp_path):
    s = seq([(0, 0.0), (1, 1.0)])
    aug = build_augmented_graph(s, build_pivot_grid(s, 3), make_generator(), hs_fn)
    path = tmp_path / "audit.txt"
    write_audit_log([aug], path)
    lines = path.read_text().splitlines()
    # l_num = 2 items, each linked to both neighbours
    assert len(lines) == len(aug.added) == 4
    user, pivot, item, _ = lines[0].split()
    assert (user, pivot) == ("0", "0.5") and int(item) == aug.inserted[0][1]
