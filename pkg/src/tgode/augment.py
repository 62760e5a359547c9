"""Uncovered time pivots, truncation factor and generator-driven graph augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import InteractionSequence
from .diffusion import DiffusionGenerator
from .graphs import TimedEdge, UserTimeGraph, build_user_time_graph

# maps (prefixes, times) -> B x d sequence representations at those times
SeqRepFn = Callable[[Sequence[InteractionSequence], Sequence[float]], torch.Tensor]


@dataclass(frozen=True)
class PivotGrid:
    pivots: tuple[float, ...]
    covered: frozenset[float]
    uncovered: tuple[float, ...]
    l_num: int


@dataclass(frozen=True)
class AddedEdge:
    edge: TimedEdge
    pivot: float
    item: int
    score: float


@dataclass(frozen=True)
class AugmentedUserGraph:
    base: UserTimeGraph
    added: tuple[AddedEdge, ...] = ()
    inserted: tuple[tuple[float, int, float], ...] = ()  # (pivot, item, score)

    @property
    def user_index(self) -> int:
        return self.base.user_index

    @property
    def added_edges(self) -> list[TimedEdge]:
        return [a.edge for a in self.added]

    @property
    def edges(self) -> tuple[TimedEdge, ...]:
        return self.base.edges + tuple(a.edge for a in self.added)

    @property
    def node_items(self) -> frozenset[int]:
        return self.base.node_items | {item for _, item, _ in self.inserted}


def pivot_times(m: int) -> tuple[float, ...]:
    if m < 1:
        raise ValueError("pivot count m must be >= 1")
    if m == 1:
        return (0.5,)
    return tuple(j / (m - 1) for j in range(m))


def nearest_pivot(pivots: Sequence[float], t: float) -> float:
    # first minimum wins, i.e. ties go to the smaller pivot
    dist = [abs(p - t) for p in pivots]
    return pivots[int(np.argmin(dist))]


def build_pivot_grid(seq: InteractionSequence, m: int = 8) -> PivotGrid:
    pivots = pivot_times(m)
    covered = frozenset(nearest_pivot(pivots, t) for t in seq.norm_times)
    uncovered = tuple(p for p in pivots if p not in covered)
    l_num = max(1, len(seq) // len(uncovered)) if uncovered else 0
    return PivotGrid(pivots, covered, uncovered, l_num)


def a_row_before(seq: InteractionSequence, t: float, num_items: int) -> np.ndarray:
    row = np.zeros(num_items)
    for item, nt in zip(seq.items, seq.norm_times):
        if nt < t:
            row[item] += 1.0
    return row


@torch.no_grad()
def infer_scores_batch(requests: Sequence[tuple[InteractionSequence, float]], gen: DiffusionGenerator,
                       hs_fn: SeqRepFn) -> torch.Tensor:
    """Deterministic K=0 inference for many (sequence, pivot) pairs; rows are item scores.

    Items interacted strictly before the pivot are masked to -inf.
    """
    dtype = next(gen.parameters()).dtype
    V = gen.num_items
    a_rows = torch.tensor(np.stack([a_row_before(s, t, V) for s, t in requests]), dtype=dtype)
    times = [t for _, t in requests]
    prefixes = [s.before(t) for s, t in requests]
    h_s = hs_fn(prefixes, times).to(dtype)
    c_t = gen.time_codec(torch.tensor(times, dtype=dtype))
    _, mean, _ = gen.encode_latent(a_rows, h_s, deterministic=True)
    z0_hat = gen.predict_z0(mean, c_t, 0)
    scores = gen.scores(z0_hat).clone()
    scores[a_rows > 0] = float("-inf")
    return scores


def infer_user_scores(seq: InteractionSequence, t: float, gen: DiffusionGenerator, hs_fn: SeqRepFn,
                      grid: PivotGrid | None = None) -> torch.Tensor:
    if grid is not None and t not in grid.uncovered:
        raise ValueError(f"pivot {t} is not an uncovered pivot of user {seq.user_index}")
    return infer_scores_batch([(seq, t)], gen, hs_fn)[0]


def top_items(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k best finite scores; ties resolve to the smaller index."""
    finite = np.flatnonzero(np.isfinite(scores))
    order = finite[np.lexsort((finite, -scores[finite]))]
    return [int(i) for i in order[:k]]


def insert_items(seq: InteractionSequence, base: UserTimeGraph, picks: dict[float, list[tuple[int, float]]]) -> AugmentedUserGraph:
    """Attach each picked item at its pivot to the nearest base items before/after the pivot.

    Edge times follow the later endpoint: prev -> item at the pivot,
    item -> next at next's own time.
    """
    added, inserted = [], []
    for pivot in sorted(picks):
        before = [k for k, t in enumerate(seq.norm_times) if t < pivot]
        after = [k for k, t in enumerate(seq.norm_times) if t > pivot]
        for item, score in picks[pivot]:
            inserted.append((pivot, item, score))
            if before:
                prev = seq.items[before[-1]]
                added.append(AddedEdge(TimedEdge(prev, item, pivot, 1.0), pivot, item, score))
            if after:
                k = after[0]
                added.append(AddedEdge(TimedEdge(item, seq.items[k], seq.norm_times[k], 1.0), pivot, item, score))
    return AugmentedUserGraph(base, tuple(added), tuple(inserted))


def build_augmented_graph(seq: InteractionSequence, grid: PivotGrid, gen: DiffusionGenerator,
                          hs_fn: SeqRepFn) -> AugmentedUserGraph:
    return augment_many([seq], [grid], gen, hs_fn)[0]


def augment_many(seqs: Sequence[InteractionSequence], grids: Sequence[PivotGrid], gen: DiffusionGenerator,
                 hs_fn: SeqRepFn, batch_size: int = 256) -> list[AugmentedUserGraph]:
    requests = [(n, p) for n, g in enumerate(grids) for p in g.uncovered]
    picks: list[dict[float, list[tuple[int, float]]]] = [dict() for _ in seqs]
    for start in range(0, len(requests), batch_size):
        chunk = requests[start:start + batch_size]
        scores = infer_scores_batch([(seqs[n], p) for n, p in chunk], gen, hs_fn).cpu().numpy()
        for (n, p), row in zip(chunk, scores):
            picks[n][p] = [(i, float(row[i])) for i in top_items(row, grids[n].l_num)]
    return [insert_items(s, build_user_time_graph(s), pk) for s, pk in zip(seqs, picks)]


def write_audit_log(graphs: Sequence[AugmentedUserGraph], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for g in graphs:
            for a in g.added:
                fh.write(f"{g.user_index} {a.pivot:.6g} {a.item} {a.score:.6g}\n")
