"""Ranking metrics, target scoring and the interval / emergence analyses."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Dataset, SplitDataset, Target

DAY = 86400
EMERGENCE_BUCKETS = ("0", "0-0.5", "0.5-0.75", "0.75-1", "1")
DEFAULT_INTERVAL_EDGES = (0, 1, 51, 101, 151, 201, 251, 301, 351)


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    mrr: dict[int, float]
    targets: int
    skipped: int

    def to_json(self) -> str:
        payload = {
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "mrr": {str(k): v for k, v in self.mrr.items()},
            "targets": self.targets,
            "skipped": self.skipped,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def metrics_from_ranks(ranks: Sequence[float], ks: Sequence[int] = (5, 10, 20), skipped: int = 0) -> MetricsReport:
    """``ranks`` are 1-based positions of the truth item (inf when absent)."""
    r = np.asarray(ranks, dtype=float)
    n = r.size
    recall, ndcg, mrr = {}, {}, {}
    for k in ks:
        hit = r <= k
        recall[k] = float(hit.sum() / n) if n else 0.0
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(np.where(hit, r, 1.0) + 1.0), 0.0).sum() / n) if n else 0.0
        mrr[k] = float(np.where(hit, 1.0 / np.where(hit, r, 1.0), 0.0).sum() / n) if n else 0.0
    return MetricsReport(recall, ndcg, mrr, n, skipped)


def rank_metrics(rankings: Sequence[Sequence[int] | None], truths: Sequence[int],
                 ks: Sequence[int] = (5, 10, 20)) -> MetricsReport:
    ranks, skipped = [], 0
    for ranking, truth in zip(rankings, truths):
        if ranking is None:
            skipped += 1
            continue
        ranking = list(ranking)
        ranks.append(ranking.index(truth) + 1 if truth in ranking else math.inf)
    return metrics_from_ranks(ranks, ks, skipped)


def rank_of(scores: np.ndarray, truth: int) -> int:
    """1-based rank of ``truth`` with ties broken toward the smaller item index."""
    s = scores[truth]
    return int(np.sum(scores > s) + np.sum(scores[:truth] == s) + 1)


def ranking_from_scores(scores: np.ndarray) -> list[int]:
    idx = np.arange(scores.size)
    return [int(i) for i in np.lexsort((idx, -scores))]


# ---- model scoring --------------------------------------------------------

def target_examples(model, targets: Sequence[Target]):
    """Examples for held-out targets: the prefix graph, augmented from the prefix when enabled."""
    from .augment import augment_many, build_pivot_grid
    from .graphs import build_user_time_graph, edge_arrays
    from .recommender import Example

    prefixes = [t.prefix for t in targets]
    if model.cfg.use_diff:
        grids = [build_pivot_grid(p, model.cfg.m) for p in prefixes]
        graphs = augment_many(prefixes, grids, model.generator, model.hs_fn)
    else:
        graphs = [build_user_time_graph(p) for p in prefixes]
    return [Example(t.prefix, t.norm_time, t.item, edge_arrays(g.edges)) for t, g in zip(targets, graphs)]


@torch.no_grad()
def score_targets(model, targets: Sequence[Target], batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(targets), batch_size):
        exs = target_examples(model, targets[start:start + batch_size])
        out.append(model.logits(exs).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_items))


def evaluate_split(model, split: SplitDataset, which: str = "test", ks: Sequence[int] = (5, 10, 20),
                   batch_size: int = 128) -> MetricsReport:
    targets = split.targets(which)
    scores = score_targets(model, targets, batch_size)
    ranks = [rank_of(row, t.item) for row, t in zip(scores, targets)]
    return metrics_from_ranks(ranks, ks, skipped=split.skipped[which])


# ---- dataset analyses -----------------------------------------------------

@dataclass
class AnalysisReport:
    interval_histogram: dict[str, float] = field(default_factory=dict)
    gap_count: int = 0
    emergence: dict[str, float] = field(default_factory=dict)
    item_count: int = 0
    slice_days: int = 250
    high_emergence_share: float = 0.0  # items with ratio > 0.75

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _interval_labels(edges: Sequence[int]) -> list[str]:
    labels = []
    for lo, hi in zip(edges, list(edges[1:]) + [None]):
        if hi is None:
            labels.append(f">{lo - 1}" if lo > 0 else ">=0")
        elif hi - lo == 1:
            labels.append(str(lo))
        else:
            labels.append(f"{lo}-{hi - 1}")
    return labels


def user_gaps_days(d: Dataset) -> list[int]:
    gaps = []
    for s in d.sequences:
        gaps.extend((b - a) // DAY for a, b in zip(s.raw_times, s.raw_times[1:]))
    return gaps


def interval_histogram(d: Dataset, bucket_edges: Sequence[int] = DEFAULT_INTERVAL_EDGES) -> AnalysisReport:
    """Share of consecutive-interaction gaps (whole days) per bucket [edge_i, edge_{i+1})."""
    edges = list(bucket_edges)
    if edges != sorted(set(edges)) or edges[0] != 0:
        raise ValueError("bucket edges must be strictly increasing and start at 0")
    labels = _interval_labels(edges)
    gaps = user_gaps_days(d)
    counts = Counter(int(np.searchsorted(edges, g, side="right")) - 1 for g in gaps)
    hist = {lab: (counts[i] / len(gaps) if gaps else 0.0) for i, lab in enumerate(labels)}
    return AnalysisReport(interval_histogram=hist, gap_count=len(gaps))


def emergence_bucket(ratio: float) -> str:
    if ratio <= 0.0:
        return "0"
    if ratio >= 1.0:
        return "1"
    if ratio < 0.5:
        return "0-0.5"
    if ratio < 0.75:
        return "0.5-0.75"
    return "0.75-1"


def item_emergence_ratios(d: Dataset, slice_days: int = 250) -> dict[int, float]:
    width = slice_days * DAY
    per_item: dict[int, Counter] = {}
    for s in d.sequences:
        for item, t in zip(s.items, s.raw_times):
            per_item.setdefault(item, Counter())[(t - d.time_min) // width] += 1
    return {i: max(c.values()) / sum(c.values()) for i, c in per_item.items()}


def emergence_ratios(d: Dataset, slice_days: int = 250) -> AnalysisReport:
    ratios = item_emergence_ratios(d, slice_days)
    n = len(ratios)
    counts = Counter(emergence_bucket(r) for r in ratios.values())
    dist = {b: (counts[b] / n if n else 0.0) for b in EMERGENCE_BUCKETS}
    high = sum(1 for r in ratios.values() if r > 0.75) / n if n else 0.0
    return AnalysisReport(emergence=dist, item_count=n, slice_days=slice_days, high_emergence_share=high)


def analyze(d: Dataset, bucket_edges: Sequence[int] = DEFAULT_INTERVAL_EDGES, slice_days: int = 250) -> AnalysisReport:
    a = interval_histogram(d, bucket_edges)
    b = emergence_ratios(d, slice_days)
    a.emergence, a.item_count, a.slice_days, a.high_emergence_share = (
        b.emergence, b.item_count, b.slice_days, b.high_emergence_share)
    return a


def write_distribution_csv(dist: dict[str, float], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "proportion"])
        for k, v in dist.items():
            w.writerow([k, repr(float(v))])
