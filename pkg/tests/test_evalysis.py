import csv
import math

import numpy as np
import pytest
import torch

from flipctr.config import desk_profile
from flipctr.evalysis import (auc, logloss, masked_similarity_heatmap, report, svd_projection, write_heatmap_csv,
                              write_svd_csv)
from flipctr.schema_data import build_schema
from flipctr.synthetic import SyntheticConfig, generate_synthetic
from flipctr.textualize import build_tokenizer, render_text
from flipctr.training import build_pretrainer, encode_split


def test_auc_examples():
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    assert auc([1, 0, 1, 0], [0.3] * 4) == 0.5
    with pytest.raises(ValueError):
        auc([1, 1], [0.2, 0.4])


def test_auc_monotone_invariance():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 300)
    s = rng.normal(size=300)
    assert auc(y, s) == auc(y, np.exp(3 * s) + 7)


def test_logloss_examples():
    assert abs(logloss([1], [0.5]) - math.log(2)) < 1e-15
    assert abs(logloss([1], [1.0]) - (-math.log(1 - 1e-7))) < 1e-15
    y = np.array([0, 1, 1, 0, 1])
    assert logloss(y, np.full(5, 0.5)) == math.log(2)
    rep = report(y, np.full(5, 0.5), "val")
    assert rep.n == 5 and rep.split == "val" and rep.auc == 0.5


def pairwise(a):
    return np.linalg.norm(a[:, None] - a[None], axis=-1)


def test_svd_isometry_on_2d_input():
    rng = np.random.default_rng(1)
    x = np.column_stack([rng.normal(size=20) * 3, rng.normal(size=20)])
    y = svd_projection(x)
    xc = x - x.mean(0)
    assert np.allclose(pairwise(y), pairwise(xc))


def test_svd_degenerate_and_rank_deficient():
    assert np.allclose(svd_projection(np.ones((5, 3))), 0.0)
    line = np.outer(np.arange(6.0), [1.0, 2.0, -1.0])
    out = svd_projection(line)
    assert out.shape == (6, 2) and np.allclose(out[:, 1], 0.0)
    one_col = svd_projection(np.arange(4.0)[:, None])
    assert one_col.shape == (4, 2) and np.allclose(one_col[:, 1], 0.0)
    with pytest.raises(ValueError):
        svd_projection(np.ones((1, 3)))


def test_svd_eckart_young():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(30, 6))
    c = t - t.mean(0)
    _, s, vt = np.linalg.svd(c, full_matrices=False)
    coords = svd_projection(t)
    err = np.sum((c - coords @ vt[:2]) ** 2)
    assert abs(err - np.sum(s[2:] ** 2)) < 1e-8


@pytest.fixture(scope="module")
def probe():
    train, test, truth = generate_synthetic(SyntheticConfig(n_records=1200, vocab_sizes=[30, 4, 6, 10], seed=2))
    schema = build_schema(train, truth["field_names"])
    tok = build_tokenizer([render_text(r, schema) for r in train])
    data = encode_split(train[:150], schema, tok, l_max=64)
    torch.manual_seed(0)
    return schema, build_pretrainer(schema, tok, desk_profile(0)), data


def test_heatmap_shape_bounds_and_asymmetry(probe, tmp_path):
    schema, model, data = probe
    h = masked_similarity_heatmap(model, data.ids, data.text)
    F = schema.num_fields
    assert h.matrix.shape == (F, F) and h.per_record.shape == (len(data), F, F)
    assert np.all(np.abs(h.per_record) <= 1 + 1e-9)
    assert not np.allclose(h.matrix, h.matrix.T)
    assert h.diag_max_trials == len(data) * F
    assert np.isclose(h.diag_mean, np.mean([np.trace(m) / F for m in h.per_record]))
    path = tmp_path / "heat.csv"
    write_heatmap_csv(path, h.matrix, schema.field_names)
    rows = list(csv.reader(path.open()))
    assert rows[0][1:] == schema.field_names and [r[0] for r in rows[1:]] == schema.field_names
    assert np.allclose(np.array([[float(x) for x in r[1:]] for r in rows[1:]]), h.matrix, atol=1e-6)


def test_heatmap_batching_is_irrelevant(probe):
    schema, model, data = probe
    a = masked_similarity_heatmap(model, data.ids, data.text, batch_size=256)
    b = masked_similarity_heatmap(model, data.ids, data.text, batch_size=7)
    assert np.allclose(a.per_record, b.per_record, atol=1e-6)


def test_svd_csv(probe, tmp_path):
    schema, model, _ = probe
    table = model.id_tower.embedding.weight.detach().double().numpy()[:schema.M]
    path = tmp_path / "svd.csv"
    write_svd_csv(path, svd_projection(table), schema)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == schema.M
    assert rows[0]["field"] == schema.field_names[0] and rows[0]["value"] == "unknown"
