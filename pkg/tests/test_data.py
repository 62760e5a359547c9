import pytest
from hypothesis import given, settings, strategies as st

from tgode.data import (
    EmptyDatasetError,
    Interaction,
    ParseError,
    build_dataset,
    chronological_split,
    load_interactions,
)


def write(tmp_path, text, name="log.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_three_line_file(tmp_path):
    d = load_interactions(write(tmp_path, "u1,i1,100\nu1,i2,200\nu2,i1,150\n"))
    assert len(d.sequences) == 2
    assert d.item_vocab_size == 2
    assert d.user_vocab_size == 2
    assert d.sequences[0].norm_times == (0.0, 1.0)
    assert d.sequences[1].norm_times == (0.5,)


def test_single_interaction_normalizes_to_zero(tmp_path):
    d = load_interactions(write(tmp_path, "u1,i1,100\n"))
    assert d.sequences[0].norm_times == (0.0,)


def test_header_and_rating_column(tmp_path):
    d = load_interactions(write(tmp_path, "user,item,timestamp,rating\na,x,5,4.0\nb,y,7,3\n"))
    assert d.num_interactions == 2
    assert d.item_ids == ["x", "y"]


def test_tsv_with_time_column(tmp_path):
    p = write(tmp_path, "196\t242\t3\t881250949\n186\t302\t3\t891717742\n", "u.data")
    d = load_interactions(p, "tsv", time_col=3)
    assert (d.time_min, d.time_max) == (881250949, 891717742)


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(ParseError, match="line 3"):
        load_interactions(write(tmp_path, "a,x,1\nb,y,2\nc,z,oops\n"))


def test_empty_file(tmp_path):
    with pytest.raises(EmptyDatasetError):
        load_interactions(write(tmp_path, ""))


def test_reload_is_deterministic(tmp_path):
    p = write(tmp_path, "u2,b,3\nu1,a,1\nu2,a,2\nu3,c,2\n")
    a, b = load_interactions(p), load_interactions(p)
    assert a.sequences == b.sequences
    assert a.item_ids == b.item_ids == ["b", "a", "c"]


def test_split_exact_percentile_cut():
    recs = [Interaction(f"u{t % 3}", f"i{t}", t) for t in range(1, 11)]
    sp = chronological_split(build_dataset(recs))
    train_times = sorted(t for s in sp.train.sequences for t in s.raw_times)
    assert train_times == list(range(1, 9))
    assert [t for s in sp.valid.sequences for t in s.raw_times] == [9]
    assert [t for s in sp.test.sequences for t in s.raw_times] == [10]
    assert sp.boundary_times == (9, 10)


def test_split_prefix_rule():
    recs = [Interaction("u", "a", 2), Interaction("u", "b", 5), Interaction("u", "c", 9)]
    recs += [Interaction(f"o{k}", f"x{k}", k) for k in (1, 3, 4, 6, 7, 8, 10)]
    sp = chronological_split(build_dataset(recs))
    (target,) = [t for t in sp.valid_targets + sp.test_targets if t.raw_time == 9]
    assert [(sp.full.item_ids[i], t) for i, t in zip(target.prefix.items, target.prefix.raw_times)] == [("a", 2), ("b", 5)]


def test_split_identical_timestamps():
    recs = [Interaction(f"u{k}", f"i{k % 4}", 50) for k in range(20)]
    sp = chronological_split(build_dataset(recs))
    assert (sp.train.num_interactions, sp.valid.num_interactions, sp.test.num_interactions) == (16, 2, 2)
    assert sp.boundary_times == (50, 50)
    # every held-out user has no earlier interaction
    assert sp.skipped == {"valid": 2, "test": 2}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 7), st.integers(0, 40)), min_size=10, max_size=60))
def test_split_invariants(rows):
    d = build_dataset([Interaction(f"u{u}", f"i{i}", t) for u, i, t in rows])
    sp = chronological_split(d)
    times = lambda ds: [t for s in ds.sequences for t in s.raw_times]
    tr, va, te = times(sp.train), times(sp.valid), times(sp.test)
    assert len(tr) + len(va) + len(te) == len(rows)
    assert len(tr) == int(0.8 * len(rows))
    assert max(tr) <= sp.boundary_times[0] <= min(va)
    assert max(va) <= sp.boundary_times[1] <= min(te)
    for s in d.sequences:
        assert list(s.raw_times) == sorted(s.raw_times)
        assert all(0.0 <= x <= 1.0 for x in s.norm_times)
