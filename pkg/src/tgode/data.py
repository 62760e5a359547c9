"""Interaction log loading and the chronological 8:1:1 split."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path


class ParseError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class InteractionSequence:
    user_index: int
    items: tuple[int, ...]
    raw_times: tuple[int, ...]
    norm_times: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def events(self) -> list[tuple[int, int, float]]:
        return list(zip(self.items, self.raw_times, self.norm_times))

    def before(self, t: float) -> "InteractionSequence":
        """Prefix of events with normalized time strictly below ``t``."""
        n = sum(1 for x in self.norm_times if x < t)
        return InteractionSequence(
            self.user_index, self.items[:n], self.raw_times[:n], self.norm_times[:n]
        )

    def before_raw(self, t: int) -> "InteractionSequence":
        n = sum(1 for x in self.raw_times if x < t)
        return InteractionSequence(
            self.user_index, self.items[:n], self.raw_times[:n], self.norm_times[:n]
        )


@dataclass
class Dataset:
    sequences: list[InteractionSequence]
    item_vocab_size: int
    user_vocab_size: int
    time_min: int
    time_max: int
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def normalize(self, t: int | float) -> float:
        span = self.time_max - self.time_min
        if span == 0:
            return 0.0
        return (t - self.time_min) / span

    def sequence_of(self, user_index: int) -> InteractionSequence | None:
        for s in self.sequences:
            if s.user_index == user_index:
                return s
        return None


@dataclass(frozen=True)
class Target:
    user_index: int
    item: int
    raw_time: int
    norm_time: float
    prefix: InteractionSequence


@dataclass
class SplitDataset:
    train: Dataset
    valid: Dataset
    test: Dataset
    boundary_times: tuple[int, int]
    full: Dataset
    valid_targets: list[Target]
    test_targets: list[Target]
    skipped: dict[str, int]

    def targets(self, split: str) -> list[Target]:
        if split == "valid":
            return self.valid_targets
        if split == "test":
            return self.test_targets
        raise ValueError(f"unknown split {split!r}")


def _parse_int(value: str) -> int | None:
    try:
        return int(value)
    except ValueError:
        try:
            f = float(value)
        except ValueError:
            return None
        return int(f) if f.is_integer() else None


def load_interactions(
    path: str | Path,
    fmt: str = "csv",
    time_col: int = 2,
) -> Dataset:
    """Read ``user,item,timestamp[,rating]`` rows into a dense-indexed Dataset.

    ``time_col`` selects the timestamp column for layouts such as MovieLens
    ``u.data`` (user, item, rating, timestamp -> ``time_col=3``).
    """
    path = Path(path)
    if fmt not in ("csv", "tsv"):
        raise ValueError(f"unsupported format {fmt!r}")
    delimiter = "," if fmt == "csv" else "\t"
    records: list[Interaction] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) <= max(1, time_col):
                raise ParseError(f"line {lineno}: expected at least {time_col + 1} columns, got {len(row)}")
            ts = _parse_int(row[time_col].strip())
            if ts is None:
                if lineno == 1 and not records:
                    continue  # header row
                raise ParseError(f"line {lineno}: timestamp {row[time_col]!r} is not an integer")
            if ts < 0:
                raise ParseError(f"line {lineno}: negative timestamp {ts}")
            records.append(Interaction(row[0].strip(), row[1].strip(), ts))
    if not records:
        raise EmptyDatasetError(f"{path}: no interactions")
    return build_dataset(records)


def build_dataset(records: list[Interaction]) -> Dataset:
    if not records:
        raise EmptyDatasetError("no interactions")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for order, r in enumerate(records):
        u = user_index.setdefault(r.user_id, len(user_index))
        i = item_index.setdefault(r.item_id, len(item_index))
        per_user[u].append((r.timestamp, order, i))
    t_min = min(r.timestamp for r in records)
    t_max = max(r.timestamp for r in records)
    span = t_max - t_min
    sequences = []
    for u in sorted(per_user):
        events = sorted(per_user[u])
        raw = tuple(e[0] for e in events)
        norm = tuple(0.0 if span == 0 else (t - t_min) / span for t in raw)
        sequences.append(InteractionSequence(u, tuple(e[2] for e in events), raw, norm))
    return Dataset(
        sequences=sequences,
        item_vocab_size=len(item_index),
        user_vocab_size=len(user_index),
        time_min=t_min,
        time_max=t_max,
        user_ids=list(user_index),
        item_ids=list(item_index),
    )


def _subset(parent: Dataset, rows: list[tuple[int, int, int, int]]) -> Dataset:
    # rows: (raw_time, user, item, position-in-user-sequence); keeps parent vocab and time range
    per_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for t, u, i, pos in rows:
        per_user[u].append((pos, t, i))
    sequences = []
    for u in sorted(per_user):
        ev = sorted(per_user[u])
        raw = tuple(e[1] for e in ev)
        sequences.append(
            InteractionSequence(u, tuple(e[2] for e in ev), raw, tuple(parent.normalize(t) for t in raw))
        )
    return Dataset(
        sequences=sequences,
        item_vocab_size=parent.item_vocab_size,
        user_vocab_size=parent.user_vocab_size,
        time_min=parent.time_min,
        time_max=parent.time_max,
        user_ids=parent.user_ids,
        item_ids=parent.item_ids,
    )


def chronological_split(d: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> SplitDataset:
    total = d.num_interactions
    if total < 10:
        raise ValueError(f"need at least 10 interactions to split, got {total}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    pooled = [
        (t, s.user_index, i, pos)
        for s in d.sequences
        for pos, (i, t) in enumerate(zip(s.items, s.raw_times))
    ]
    pooled.sort()
    cut1 = int(total * ratios[0])
    cut2 = int(total * (ratios[0] + ratios[1]))
    train_rows, valid_rows, test_rows = pooled[:cut1], pooled[cut1:cut2], pooled[cut2:]
    full_by_user = {s.user_index: s for s in d.sequences}

    skipped = {"valid": 0, "test": 0}

    def make_targets(rows, name):
        out = []
        for t, u, i, pos in rows:
            prefix = full_by_user[u].before_raw(t)
            if len(prefix) == 0:
                skipped[name] += 1
                continue
            out.append(Target(u, i, t, d.normalize(t), prefix))
        return out

    return SplitDataset(
        train=_subset(d, train_rows),
        valid=_subset(d, valid_rows),
        test=_subset(d, test_rows),
        boundary_times=(valid_rows[0][0], test_rows[0][0]),
        full=d,
        valid_targets=make_targets(valid_rows, "valid"),
        test_targets=make_targets(test_rows, "test"),
        skipped=skipped,
    )
