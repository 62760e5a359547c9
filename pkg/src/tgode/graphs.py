"""User time graphs, the item evolution graph, and time-sliced adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import Dataset, InteractionSequence


@dataclass(frozen=True)
class TimedEdge:
    src_item: int
    dst_item: int
    time: float
    weight: float = 1.0


@dataclass(frozen=True)
class UserTimeGraph:
    user_index: int
    node_items: frozenset[int]
    edges: tuple[TimedEdge, ...]


@dataclass(frozen=True)
class ItemEvolutionGraph:
    num_items: int
    edges: tuple[TimedEdge, ...]

    @property
    def node_items(self) -> range:
        return range(self.num_items)


@dataclass(frozen=True)
class TemporalAdjacency:
    nodes: tuple[int, ...]
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    norm_weight: np.ndarray  # D^-1 A entries aligned with src/dst

    def dense(self, size: int | None = None, normalized: bool = True) -> np.ndarray:
        n = size if size is not None else (max(self.nodes) + 1 if self.nodes else 0)
        out = np.zeros((n, n))
        np.add.at(out, (self.src, self.dst), self.norm_weight if normalized else self.weight)
        return out

    @property
    def num_edges(self) -> int:
        return int(self.src.size)


def _transitions(seq: InteractionSequence) -> Iterable[tuple[int, int, float]]:
    for k in range(1, len(seq)):
        yield seq.items[k - 1], seq.items[k], seq.norm_times[k]


def merge_edges(triples: Iterable[tuple[int, int, float]] | Iterable[TimedEdge]) -> tuple[TimedEdge, ...]:
    """Collapse repeated (src, dst) pairs: weights add, the latest time wins."""
    acc: dict[tuple[int, int], list[float]] = {}
    for e in triples:
        if isinstance(e, TimedEdge):
            s, d, t, w = e.src_item, e.dst_item, e.time, e.weight
        else:
            (s, d, t), w = e, 1.0
        slot = acc.get((s, d))
        if slot is None:
            acc[(s, d)] = [w, t]
        else:
            slot[0] += w
            slot[1] = max(slot[1], t)
    edges = [TimedEdge(s, d, t, w) for (s, d), (w, t) in acc.items()]
    edges.sort(key=lambda e: (e.time, e.src_item, e.dst_item))
    return tuple(edges)


def build_user_time_graph(seq: InteractionSequence) -> UserTimeGraph:
    if len(seq) < 1:
        raise ValueError("sequence must contain at least one interaction")
    return UserTimeGraph(seq.user_index, frozenset(seq.items), merge_edges(_transitions(seq)))


def build_item_evolution_graph(d: Dataset | Iterable[InteractionSequence], num_items: int | None = None) -> ItemEvolutionGraph:
    if isinstance(d, Dataset):
        seqs, num_items = d.sequences, d.item_vocab_size
    else:
        seqs = list(d)
        if num_items is None:
            raise ValueError("num_items required when passing raw sequences")
    if not seqs:
        raise ValueError("dataset is empty")
    triples = [tr for s in seqs for tr in _transitions(s)]
    return ItemEvolutionGraph(num_items, merge_edges(triples))


def edge_arrays(edges: Iterable[TimedEdge]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    edges = list(edges)
    src = np.fromiter((e.src_item for e in edges), dtype=np.int64, count=len(edges))
    dst = np.fromiter((e.dst_item for e in edges), dtype=np.int64, count=len(edges))
    time = np.fromiter((e.time for e in edges), dtype=np.float64, count=len(edges))
    weight = np.fromiter((e.weight for e in edges), dtype=np.float64, count=len(edges))
    return src, dst, time, weight


def adjacency_snapshot(g, t_query: float, inclusive: bool = False) -> TemporalAdjacency:
    """Edges with time < t_query (or <= when ``inclusive``), row-normalized by out-degree.

    ``g`` may be any graph object exposing ``edges`` (user, augmented or item
    evolution graph). Parallel edges are kept and their weights add up.
    """
    if not 0.0 <= t_query <= 1.0:
        raise ValueError(f"t_query must lie in [0, 1], got {t_query}")
    src, dst, time, weight = edge_arrays(g.edges)
    keep = time <= t_query if inclusive else time < t_query
    src, dst, weight = src[keep], dst[keep], weight[keep]
    deg = np.zeros(int(max(src.max(initial=-1), dst.max(initial=-1)) + 1))
    np.add.at(deg, src, weight)
    norm = weight / deg[src] if src.size else weight.copy()
    nodes = tuple(sorted(g.node_items))
    return TemporalAdjacency(nodes, src, dst, weight, norm)


def write_edge_list(g, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in g.edges:
            fh.write(f"{e.src_item} {e.dst_item} {e.weight:g} {e.time:.10g}\n")


def read_edge_list(path: str | Path) -> list[TimedEdge]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                s, d, w, t = line.split()
                out.append(TimedEdge(int(s), int(d), float(t), float(w)))
    return out
