"""Synthetic interaction logs with planted time-windowed item clusters."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import Dataset, Interaction, build_dataset

DAY = 86400


def planted_interactions(n_users: int = 200, n_clusters: int = 3, items_per_cluster: int = 30,
                         horizon_days: int = 900, bursts: tuple[int, int] = (3, 5),
                         burst_len: tuple[int, int] = (2, 5), on_cluster: float = 0.85,
                         zipf: float = 1.1, seed: int = 0) -> list[Interaction]:
    """Users interact in short bursts separated by long gaps.

    Cluster c is popular during window c of ``n_clusters`` equal windows of the
    horizon; an interaction hits the active cluster with probability
    ``on_cluster`` (popularity-skewed inside the cluster), otherwise a uniform
    random item.
    """
    rng = np.random.default_rng(seed)
    n_items = n_clusters * items_per_cluster
    window = horizon_days / n_clusters
    pop = 1.0 / np.arange(1, items_per_cluster + 1) ** zipf
    pop /= pop.sum()
    records = []
    for u in range(n_users):
        for _ in range(rng.integers(bursts[0], bursts[1] + 1)):
            day = rng.uniform(0, horizon_days)
            for _ in range(rng.integers(burst_len[0], burst_len[1] + 1)):
                day = min(day + rng.exponential(0.7), horizon_days - 1e-3)
                cluster = min(int(day // window), n_clusters - 1)
                if rng.random() < on_cluster:
                    item = cluster * items_per_cluster + rng.choice(items_per_cluster, p=pop)
                else:
                    item = rng.integers(n_items)
                records.append(Interaction(f"u{u}", f"i{item}", int(day * DAY)))
    records.sort(key=lambda r: (r.timestamp, r.user_id, r.item_id))
    return records


def planted_dataset(**kwargs) -> Dataset:
    return build_dataset(planted_interactions(**kwargs))


def write_interactions(records: list[Interaction], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "timestamp"])
        for r in records:
            w.writerow([r.user_id, r.item_id, r.timestamp])
