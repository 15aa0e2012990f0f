import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipctr.schema_data import (ColumnSpec, DataError, DatasetSchema, SchemaError, SplitSpec, UNKNOWN,
                                 binarize_labels, build_schema, chronological_split, load_tabular)
from flipctr.synthetic import SyntheticConfig, generate_synthetic


def write_tsv(path, rows):
    path.write_text("\n".join("\t".join(r) for r in rows) + "\n")
    return path


def test_load_tabular_order_and_unknown(tmp_path):
    p = write_tsv(tmp_path / "d.tsv", [
        ["gender", "genre", "rating", "timestamp"],
        ["M", "Action", "5", "3"],
        ["F", "", "1", "1"],
        ["M", "Drama", "4", "2"],
    ])
    recs = load_tabular(p, ColumnSpec(("gender", "genre")))
    assert [r["gender"] for r in recs] == ["M", "F", "M"]
    assert recs[1]["genre"] == UNKNOWN


def test_load_tabular_missing_label(tmp_path):
    p = write_tsv(tmp_path / "d.tsv", [["gender", "genre", "timestamp"], ["M", "Action", "1"]])
    with pytest.raises(SchemaError, match="label column 'rating' not found"):
        load_tabular(p, ColumnSpec(("gender", "genre")))


def test_load_tabular_bad_row_reports_row_number(tmp_path):
    p = write_tsv(tmp_path / "d.tsv", [["gender", "rating", "timestamp"], ["M", "5", "1"], ["F", "2"]])
    with pytest.raises(DataError, match="row 3"):
        load_tabular(p, ColumnSpec(("gender",)))


@pytest.mark.parametrize("rule,ratings,expected", [
    ("movielens", [5, 3, 1], [1, 0]),
    ("bookcrossing", [6, 5, 0], [1, 0, 0]),
    ("goodreads", [4, 3], [1, 0]),
])
def test_binarize_rules(rule, ratings, expected):
    recs = [{"rating": str(r)} for r in ratings]
    assert [r["label"] for r in binarize_labels(recs, rule)] == expected


def test_binarize_movielens_drops_neutral_count():
    rng = np.random.default_rng(0)
    ratings = rng.integers(1, 6, size=500)
    out = binarize_labels([{"rating": r} for r in ratings], "movielens")
    assert len(out) == len(ratings) - int((ratings == 3).sum())


def test_binarize_errors():
    with pytest.raises(DataError, match="record 1"):
        binarize_labels([{"rating": "4"}, {"rating": "x"}], "goodreads")
    with pytest.raises(ValueError, match="movielens"):
        binarize_labels([{"rating": "4"}], "netflix")


def test_split_basic_and_ties():
    recs = [{"timestamp": 10 - i, "k": i} for i in range(10)]
    train, test = chronological_split(recs)
    assert len(train) == 9 and test[0]["k"] == 0  # earliest timestamp is last in file
    same = [{"timestamp": 5, "k": i} for i in range(10)]
    train, test = chronological_split(same)
    assert [r["k"] for r in train] == list(range(9)) and test[0]["k"] == 9


def test_split_full_fraction_warns():
    with pytest.warns(UserWarning):
        train, test = chronological_split([{"timestamp": i} for i in range(4)], SplitSpec(1.0))
    assert len(train) == 4 and test == []


def test_split_missing_timestamp():
    with pytest.raises(DataError):
        chronological_split([{"timestamp": 1}, {"x": 2}])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.floats(0.05, 1.0))
@settings(max_examples=60, deadline=None)
def test_split_is_chronological_partition(times, frac):
    recs = [{"timestamp": t, "k": i} for i, t in enumerate(times)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train, test = chronological_split(recs, SplitSpec(frac))
    assert sorted(r["k"] for r in train + test) == list(range(len(recs)))
    assert len(train) == int(np.floor(frac * len(recs)))
    if train and test:
        assert max(r["timestamp"] for r in train) <= min(r["timestamp"] for r in test)


def test_build_schema_counts():
    train = [{"gender": "M", "genre": "Action"}] * 7 + [{"gender": "F", "genre": "Action"}]
    s = build_schema(train, ["gender", "genre"])
    assert s.M == (2 + 1) + (1 + 1) == 5
    assert s.freq[0]["M"] == 7
    assert s.mask_feature_id == 5
    assert s.feature_id(1, "Comedy") == s.feature_id(1, UNKNOWN)
    assert sum(len(v) for v in s.vocabularies) == s.M
    assert all(c >= 1 for fr in s.freq for c in fr.values())
    assert s.feature_base == sorted(set(s.feature_base))


def test_build_schema_empty():
    with pytest.raises(DataError):
        build_schema([], ["a"])


def test_schema_roundtrip_and_determinism(tmp_path):
    train, _, truth = generate_synthetic(SyntheticConfig(n_records=400, vocab_sizes=[20, 5, 9], seed=3))
    s1 = build_schema(train, truth["field_names"])
    s2 = build_schema(train, truth["field_names"])
    assert s1.to_json() == s2.to_json()
    ids, _ = s1.encode(train)
    for row, rec in zip(ids, train):
        for f, gid in enumerate(row):
            f2, value = s1.decode(int(gid))
            assert f2 == f and value == rec[truth["field_names"][f]]
            assert s1.feature_id(f, value) == gid
    s1.save(tmp_path / "schema.json")
    loaded = DatasetSchema.load(tmp_path / "schema.json")
    assert loaded.to_json() == s1.to_json()
    assert list(json.loads((tmp_path / "schema.json").read_text())) == sorted(s1.to_dict())


def test_synthetic_deterministic():
    cfg = SyntheticConfig(n_records=10000, seed=17)
    a = generate_synthetic(cfg)
    b = generate_synthetic(SyntheticConfig(n_records=10000, seed=17))
    assert json.dumps(a[:2], sort_keys=True) == json.dumps(b[:2], sort_keys=True)
    assert len(a[0]) == 9000 and len(a[1]) == 1000


def test_synthetic_zero_interaction_base_rate():
    bias = 0.4
    train, test, _ = generate_synthetic(SyntheticConfig(n_records=20000, interaction_scale=0.0, bias=bias, seed=5))
    y = np.array([r["label"] for r in train + test])
    p = 1 / (1 + np.exp(-bias))
    sigma = np.sqrt(p * (1 - p) / len(y))
    assert abs(y.mean() - p) < 4 * sigma


def test_synthetic_near_identical_surface_text():
    train, _, truth = generate_synthetic(SyntheticConfig(n_records=2000, seed=1))
    vals = {r["user"] for r in train}
    first_words = {v.split()[0] for v in vals}
    assert len(first_words) < len(vals)  # many distinct IDs share a word


def test_synthetic_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(vocab_sizes=[5]).validate()
    with pytest.raises(ValueError):
        SyntheticConfig(vocab_sizes=[5, 1]).validate()
