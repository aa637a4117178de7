import gzip
import json
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holomamba.data import (
    UNKNOWN_ATTR,
    DatasetSplit,
    RawInteraction,
    assign_attr_amazon,
    build_sequences,
    five_core_filter,
    ingest_amazon,
    ingest_movielens,
    pack_histories,
    prepare_amazon,
    prepare_movielens,
    remap_ids,
    synthetic_generate,
)
from holomamba.errors import DataError


def write_movielens(tmp_path, ratings, movies):
    r = tmp_path / "ratings.dat"
    m = tmp_path / "movies.dat"
    r.write_text("\n".join(ratings) + "\n", encoding="iso-8859-1")
    m.write_text("\n".join(movies) + "\n", encoding="iso-8859-1")
    return r, m


def write_amazon(tmp_path, records, name="reviews.json.gz"):
    path = tmp_path / name
    with gzip.open(path, "wt", encoding="utf-8") as fh:
        for rec in records:
            fh.write((rec if isinstance(rec, str) else json.dumps(rec)) + "\n")
    return path


# -- MovieLens -----------------------------------------------------------------------

def test_movielens_line_format(tmp_path):
    r, m = write_movielens(tmp_path, ["1::1193::5::978300760"],
                           ["1193::One Flew Over the Cuckoo's Nest (1975)::Drama",
                            "1::Toy Story (1995)::Animation|Children's|Comedy",
                            "2::Nothing::"])
    interactions, genres, report = ingest_movielens(r, m)
    assert interactions == [RawInteraction("1", "1193", 978300760, "Drama")]
    assert genres["1"] == "Animation"
    assert genres["2"] == UNKNOWN_ATTR
    assert (report.lines, report.malformed) == (1, 0)


def test_movielens_malformed_lines_counted(tmp_path):
    good = [f"{u}::{i}::4::{1000 + i}" for u in range(1, 21) for i in range(1, 11)]
    r, m = write_movielens(tmp_path, good + ["garbage"], [f"{i}::T::Drama" for i in range(1, 11)])
    interactions, _, report = ingest_movielens(r, m)
    assert len(interactions) == 200 and report.malformed == 1


def test_movielens_too_many_malformed_lines(tmp_path):
    r, m = write_movielens(tmp_path, ["1::1::5::10"] * 50 + ["1::x::5"], ["1::T::Drama"])
    with pytest.raises(DataError):
        ingest_movielens(r, m)


def test_movielens_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_movielens(tmp_path / "nope.dat", tmp_path / "movies.dat")


def test_movielens_latin1_titles(tmp_path):
    r, m = write_movielens(tmp_path, ["1::7::3::5"], ["7::Amélie (2001)::Comedy|Romance"])
    assert ingest_movielens(r, m)[0][0].attr_source == "Comedy"


def test_prepare_movielens_attribute_vocab(tmp_path):
    ratings = [f"{u}::{i}::4::{100 * u + i}" for u in range(1, 5) for i in range(1, 7)]
    movies = ["1::A::Drama", "2::B::Comedy|Drama", "3::C::Drama", "4::D::", "5::E::Horror", "6::F::Comedy"]
    r, m = write_movielens(tmp_path, ratings, movies)
    split, counts = prepare_movielens(r, m, L=50)
    # Drama, Comedy, Horror plus the UNKNOWN bucket
    assert split.num_attrs == 4 and counts["L"] == 50
    assert counts["num_users"] == 4 and counts["num_items"] == 6
    assert counts["interactions_retained"] == 24


# -- Amazon ---------------------------------------------------------------------------

def test_amazon_record_format(tmp_path):
    path = write_amazon(tmp_path, [
        {"reviewerID": "A1", "asin": "B0001", "unixReviewTime": 1370000000, "overall": 5.0},
        "{'reviewerID': 'A2', 'asin': 'B0002', 'unixReviewTime': 1370000001}",
    ] + [{"reviewerID": "A3", "asin": f"C{i}", "unixReviewTime": i} for i in range(200)])
    interactions, report = ingest_amazon(path)
    assert interactions[0] == RawInteraction("A1", "B0001", 1370000000)
    assert interactions[1] == RawInteraction("A2", "B0002", 1370000001)
    assert report.malformed == 0


def test_amazon_missing_timestamp_skipped(tmp_path):
    records = [{"reviewerID": "A", "asin": str(i), "unixReviewTime": i} for i in range(200)]
    records.append({"reviewerID": "A", "asin": "x"})
    interactions, report = ingest_amazon(write_amazon(tmp_path, records))
    assert len(interactions) == 200 and report.malformed == 1


def test_amazon_streams_without_loading_file(tmp_path):
    text = "lorem ipsum " * 400
    records = ({"reviewerID": f"U{i % 500}", "asin": f"I{i % 900}", "unixReviewTime": i, "reviewText": text}
               for i in range(20_000))
    path = write_amazon(tmp_path, records)
    tracemalloc.start()
    try:
        interactions, _ = ingest_amazon(path)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    assert len(interactions) == 20_000
    # the uncompressed JSON is ~96 MB; only the retained tuples stay resident
    assert peak < 20 * 2 ** 20


def test_prepare_amazon_uses_fifty_buckets(tmp_path):
    records = [{"reviewerID": f"U{u}", "asin": f"I{(u + t) % 7}", "unixReviewTime": t}
               for u in range(6) for t in range(5)]
    split, counts = prepare_amazon(write_amazon(tmp_path, records))
    assert split.num_attrs == 50 and split.vocab_attrs == 51
    assert counts["num_users"] == 6


# -- filtering, ids, attributes --------------------------------------------------------

def interactions_for(counts):
    return [RawInteraction(user, f"i{t}", t) for user, n in counts.items() for t in range(n)]


def test_five_core_boundary():
    kept = five_core_filter(interactions_for({"a": 4, "b": 5, "c": 9}))
    assert {r.user for r in kept} == {"b", "c"}
    assert len(kept) == 14


def test_five_core_empty_is_error():
    with pytest.raises(DataError):
        five_core_filter([])
    with pytest.raises(DataError):
        five_core_filter(interactions_for({"a": 2}))


@pytest.mark.parametrize("item,attr", [(103, 4), (50, 1), (1, 2), (49, 50)])
def test_amazon_attribute_hash(item, attr):
    assert assign_attr_amazon(item) == attr


def test_remap_is_contiguous_first_appearance():
    raw = [RawInteraction("u2", "x", 5), RawInteraction("u1", "y", 9), RawInteraction("u1", "z", 1),
           RawInteraction("u2", "y", 3)]
    maps = remap_ids(raw)
    assert maps.user_map == {"u1": 1, "u2": 2}
    # pass order: u1@1 z, u1@9 y, u2@3 y, u2@5 x
    assert maps.item_map == {"z": 1, "y": 2, "x": 3}


def test_remap_puts_unknown_attribute_last():
    raw = [RawInteraction("u", "a", 1, UNKNOWN_ATTR), RawInteraction("u", "b", 2, "Drama")]
    assert remap_ids(raw, with_attrs=True).attr_map == {"Drama": 1, UNKNOWN_ATTR: 2}


# -- sequence layout ---------------------------------------------------------------------

def test_leave_one_out_layout_example():
    split = pack_histories([[5, 3, 7, 2, 9]], lambda i: i % 3 + 1, L=6, num_items=9, num_attrs=3)
    np.testing.assert_array_equal(split.inputs[0], [0, 0, 5, 3, 7, 2])
    np.testing.assert_array_equal(split.train_inputs[0], [0, 0, 0, 5, 3, 7])
    np.testing.assert_array_equal(split.train_targets[0], [0, 0, 0, 3, 7, 2])
    assert split.test_target[0] == 9
    np.testing.assert_array_equal(split.attrs[0], [0, 0, 3, 1, 2, 3])


def test_truncation_keeps_most_recent():
    history = list(range(1, 62))  # 60 prefix items plus the held-out one
    split = pack_histories([history], assign_attr_amazon, L=50, num_items=61, num_attrs=50)
    np.testing.assert_array_equal(split.inputs[0], np.arange(11, 61))
    assert split.test_target[0] == 61
    np.testing.assert_array_equal(split.train_targets[0], np.arange(11, 61))
    np.testing.assert_array_equal(split.train_inputs[0], np.arange(10, 60))


def test_equal_timestamps_keep_file_order():
    raw = [RawInteraction("u", "a", 1), RawInteraction("u", "c", 2), RawInteraction("u", "b", 2),
           RawInteraction("u", "d", 0)]
    maps = remap_ids(raw)
    split = build_sequences(raw, maps, assign_attr_amazon, L=4, num_attrs=50)
    inverse = {v: k for k, v in maps.item_map.items()}
    assert [inverse[i] for i in split.inputs[0] if i] == ["d", "a", "c"]
    assert inverse[int(split.test_target[0])] == "b"


def test_short_histories_excluded_and_counted():
    split = pack_histories([[1], [2, 3], [4, 5, 6]], assign_attr_amazon, L=3, num_items=6, num_attrs=50)
    assert split.num_users == 2 and split.dropped_users == 1


histories = st.lists(st.lists(st.integers(1, 40), min_size=2, max_size=70), min_size=1, max_size=20)


@settings(max_examples=100, deadline=None)
@given(histories, st.integers(1, 60))
def test_split_invariants(hists, L):
    split = pack_histories(hists, assign_attr_amazon, L, num_items=40, num_attrs=50)
    for rows in (split.inputs, split.train_inputs):
        real = rows != 0
        # left padding: once a real item appears, no pad follows
        assert not np.any(real[:, :-1] & ~real[:, 1:])
    np.testing.assert_array_equal(split.attrs == 0, split.inputs == 0)
    np.testing.assert_array_equal(split.train_attrs == 0, split.train_inputs == 0)
    assert np.all(split.test_target != 0)
    np.testing.assert_array_equal(split.train_targets == 0, split.train_inputs == 0)
    # the final evaluation slot is the last prefix item, never the held-out one's slot
    for row, h in enumerate(hists):
        assert split.inputs[row, -1] == h[-2]
        assert split.test_target[row] == h[-1]
        if len(h) > 2:
            assert split.train_targets[row, -1] == h[-2]


# -- synthetic data and caching ----------------------------------------------------------

def test_synthetic_cycle_successor():
    split = synthetic_generate(num_users=32, cycle_len=3, L=12, seed=0)
    assert split.num_users == 32 and split.num_items == 96
    for row in range(32):
        seq = split.inputs[row]
        cycle = list(dict.fromkeys(seq.tolist()))
        assert len(cycle) == 3
        assert split.test_target[row] == cycle[(cycle.index(seq[-1]) + 1) % 3]
        assert all(seq[t + 1] == cycle[(cycle.index(seq[t]) + 1) % 3] for t in range(11))
    np.testing.assert_array_equal(split.attrs, np.where(split.inputs > 0, split.inputs % 50 + 1, 0))


def test_synthetic_is_deterministic():
    a = synthetic_generate(8, 4, 10, seed=5)
    b = synthetic_generate(8, 4, 10, seed=5)
    for name in DatasetSplit._ARRAYS:
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.inputs, synthetic_generate(8, 4, 10, seed=6).inputs)


def test_synthetic_rejects_short_cycle():
    with pytest.raises(DataError):
        synthetic_generate(4, 1, 10, seed=0)


def test_split_cache_round_trip_and_determinism(tmp_path):
    split = synthetic_generate(10, 3, 8, seed=1, num_items=20)
    split.save(tmp_path / "a.hmr")
    synthetic_generate(10, 3, 8, seed=1, num_items=20).save(tmp_path / "b.hmr")
    assert (tmp_path / "a.hmr").read_bytes() == (tmp_path / "b.hmr").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text()) == {"L": 8, "num_attrs": 50, "num_items": 20,
                                                             "num_users": 10}
    loaded = DatasetSplit.load(tmp_path / "a.hmr")
    for name in DatasetSplit._ARRAYS:
        np.testing.assert_array_equal(getattr(loaded, name), getattr(split, name))


def test_ingestion_is_deterministic(tmp_path):
    ratings = [f"{u}::{(u * 7 + i) % 13 + 1}::3::{i // 2}" for u in range(1, 9) for i in range(8)]
    r, m = write_movielens(tmp_path, ratings, [f"{i}::T::G{i % 3}" for i in range(1, 14)])
    prepare_movielens(r, m, L=5)[0].save(tmp_path / "one.hmr")
    prepare_movielens(r, m, L=5)[0].save(tmp_path / "two.hmr")
    assert (tmp_path / "one.hmr").read_bytes() == (tmp_path / "two.hmr").read_bytes()
