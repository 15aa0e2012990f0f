import math

import numpy as np
import pytest
import torch

from flipctr.config import TrainConfig, desk_profile, load_config, merge, set_dotted
from flipctr.evalysis import auc
from flipctr.objectives import FlipPretrainer
from flipctr.schema_data import build_schema
from flipctr.synthetic import SyntheticConfig, generate_synthetic
from flipctr.textualize import build_tokenizer, render_text
from flipctr.training import (FlipClassifier, ManifestMismatch, MetricsLog, TrainingDiverged,
                              build_pretrainer, chronological_val_split, combine_logits, cosine_factor,
                              encode_split, finetune_loss, finetune_single, load_classifier, load_pretrainer,
                              manifest_for, predict, pretrain, run_variant, save_classifier)

SMALL = SyntheticConfig(n_records=3000, vocab_sizes=[60, 4, 8, 30, 60, 5, 6, 20], seed=5)


@pytest.fixture(scope="module")
def small():
    train, test, truth = generate_synthetic(SMALL)
    schema = build_schema(train, truth["field_names"])
    tok = build_tokenizer([render_text(r, schema) for r in train])
    cfg = merge(desk_profile(0), {"pretrain": {"epochs": 1}, "finetune": {"epochs": 3, "lr_grid": [5e-3]}})
    tr = encode_split(train, schema, tok, l_max=cfg.model.l_max)
    te = encode_split(test, schema, tok, l_max=cfg.model.l_max)
    return schema, tok, cfg, tr, te


def test_cosine_endpoints():
    assert cosine_factor(0, 101) == 1.0
    assert abs(cosine_factor(100, 101)) < 1e-15
    assert abs(cosine_factor(50, 101) - 0.5) < 1e-12
    assert cosine_factor(0, 1) == 1.0


def test_combiner_init_and_zero_logits():
    model = FlipClassifier(None, None)
    model.a = torch.nn.Parameter(torch.zeros(()))
    assert model.alpha.item() == 0.5
    z = torch.zeros(4)
    out = {"id": z, "plm": z, "joint": combine_logits(z, z, model.a)}
    for y in (torch.zeros(4), torch.ones(4)):
        assert abs(finetune_loss(out, y).item() - 3 * math.log(2)) < 1e-6
    # single-tower BCE at p = 0.5 is ln 2
    assert abs(finetune_loss({"id": torch.zeros(1)}, torch.ones(1)).item() - math.log(2)) < 1e-7


def test_val_split_is_chronological_tail(small):
    tr = small[3]
    fit, val = chronological_val_split(tr, 0.1)
    assert len(val) == round(0.1 * len(tr)) and len(fit) + len(val) == len(tr)
    assert np.array_equal(val.ids, tr.ids[-len(val):])


def test_pretrain_determinism(small):
    schema, tok, cfg, tr, _ = small
    runs = []
    for _ in range(2):
        log = MetricsLog()
        pretrain(tr, schema, tok, cfg, log=log, max_steps=11)
        runs.append([r["total"] for r in log.records if "step" in r])
    assert len(runs[0]) == 11
    assert runs[0][0] == runs[1][0] and runs[0][10] == runs[1][10]


def test_no_objectives_leaves_initialisation(small):
    schema, tok, cfg, tr, _ = small
    cfg = merge(cfg, {"ablation": "wo_mlm_mtm_icl"})
    res = pretrain(tr, schema, tok, cfg)
    torch.manual_seed(cfg.seed)
    fresh = build_pretrainer(schema, tok, cfg)
    assert res.steps == 0
    for a, b in zip(res.model.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)


def test_nan_loss_aborts_with_checkpoint_reference(small, tmp_path, monkeypatch):
    schema, tok, cfg, tr, _ = small
    real = FlipPretrainer.pretrain_loss
    calls = {"n": 0}

    def flaky(self, batch, flags):
        calls["n"] += 1
        total, parts = real(self, batch, flags)
        return (total * float("nan"), parts) if calls["n"] > 12 else (total, parts)
    monkeypatch.setattr(FlipPretrainer, "pretrain_loss", flaky)
    cfg = merge(cfg, {"pretrain": {"epochs": 2}})   # 12 batches per epoch
    with pytest.raises(TrainingDiverged, match="last good checkpoint: .*last"):
        pretrain(tr, schema, tok, cfg, out_dir=tmp_path)


def test_checkpoint_round_trip_and_manifest_guard(small, tmp_path):
    schema, tok, cfg, tr, te = small
    pre = pretrain(tr, schema, tok, cfg, out_dir=tmp_path / "pre")
    loaded = load_pretrainer(tmp_path / "pre" / "last", schema, tok, cfg)
    for a, b in zip(pre.model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)
    res = run_variant("flip", pre.model, schema, tok, tr, te, cfg)
    man = manifest_for(cfg, schema, tok, res.model.id_tower, res.model.text_tower, "finetune")
    save_classifier(tmp_path / "ft", res.model, man)
    back = load_classifier(tmp_path / "ft", schema, tok, cfg, "flip")
    assert np.array_equal(predict(res.model, te), predict(back, te))
    other = merge(cfg, {"model": {"emb_dim": 8}})
    with pytest.raises(ManifestMismatch, match="model_hash"):
        load_classifier(tmp_path / "ft", schema, tok, other, "flip")
    with pytest.raises(ManifestMismatch):
        load_pretrainer(tmp_path / "pre" / "last", schema, tok, other)


def test_flip_plm_leaves_id_tower_untouched(small):
    schema, tok, cfg, tr, te = small
    torch.manual_seed(0)
    pre = build_pretrainer(schema, tok, cfg)
    before = [p.detach().clone() for p in pre.id_tower.parameters()]
    res = finetune_single(pre, tr, te, merge(cfg, {"finetune": {"epochs": 1}}), "flip_plm")
    assert res.model.id_tower is None
    assert all(torch.equal(a, b) for a, b in zip(before, pre.id_tower.parameters()))
    assert not any("id_tower" in n for n, _ in res.model.named_parameters())


def permutation_sigma(labels, scores, rng, n=200):
    return float(np.std([auc(rng.permutation(labels), scores) for _ in range(n)]))


def test_scratch_beats_permutation_null_and_zero_epochs_is_chance():
    train, test, truth = generate_synthetic(SyntheticConfig(n_records=8000, vocab_sizes=[20, 4, 8, 12, 20, 5, 6, 10],
                                                            interaction_scale=2.0, seed=8))
    schema = build_schema(train, truth["field_names"])
    tok = build_tokenizer([render_text(r, schema) for r in train])
    cfg = merge(desk_profile(0), {"finetune": {"epochs": 3, "lr_grid": [5e-3]}})
    tr, te = encode_split(train, schema, tok, l_max=64), encode_split(test, schema, tok, l_max=64)
    rng = np.random.default_rng(0)
    res = run_variant("scratch", None, schema, tok, tr, te, cfg)
    scores = predict(res.model, te)
    sigma = permutation_sigma(te.labels, scores, rng)
    assert res.test.auc > 0.5 + 5 * sigma
    idle = run_variant("scratch", None, schema, tok, tr, te, merge(cfg, {"finetune": {"epochs": 0}}))
    n1 = int(te.labels.sum())
    n0 = len(te) - n1
    null_sd = math.sqrt((n0 + n1 + 1) / (12 * n0 * n1))
    assert abs(idle.test.auc - 0.5) < 3 * null_sd


@pytest.mark.slow
def test_pretraining_makes_progress():
    """10k synthetic records, 3 epochs: epoch-3 loss below epoch-1 loss on average over 3 seeds."""
    train, _, truth = generate_synthetic(SyntheticConfig())
    schema = build_schema(train, truth["field_names"])
    tok = build_tokenizer([render_text(r, schema) for r in train])
    tr = encode_split(train, schema, tok, l_max=64)
    first, third = [], []
    for seed in range(3):
        cfg = merge(desk_profile(seed), {"pretrain": {"epochs": 3}})
        losses = pretrain(tr, schema, tok, cfg).epoch_losses
        first.append(losses[0])
        third.append(losses[2])
    assert np.mean(third) < np.mean(first)


def test_metrics_log_tags(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl", command="pretrain")
    log.write(step=0, total=1.5)
    assert (tmp_path / "m.jsonl").read_text() == '{"command": "pretrain", "step": 0, "total": 1.5}\n'


def test_config_precedence(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("pretrain:\n  tau: 0.3\n  epochs: 2\nmodel:\n  backbone: deepfm\n")
    cfg = load_config(path, {"pretrain": {"tau": 0.05}})
    assert cfg.pretrain.tau == 0.05 and cfg.pretrain.epochs == 2 and cfg.model.backbone == "deepfm"
    assert cfg.pretrain.batch_size == TrainConfig().pretrain.batch_size
    with pytest.raises(KeyError, match="unknown config key"):
        merge(TrainConfig(), {"pretrain": {"temperature": 1}})
    with pytest.raises(ValueError, match="variant"):
        load_config(None, {"variant": "flip_xl"})
    u = {}
    set_dotted(u, "finetune.lr", 1e-3)
    assert u == {"finetune": {"lr": 1e-3}}
    assert TrainConfig().digest() == TrainConfig.from_dict(TrainConfig().to_dict()).digest()
