"""Alignment pretraining, adaptive finetuning, single-tower variants and checkpoints."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .evalysis import MetricReport, report
from .id_tower import IdTower, IdTowerSpec
from .masking import (NoiseSampler, batch_mask_tabular, batch_mask_text_fieldlevel,
                      batch_mask_text_tokenlevel)
from .objectives import ABLATIONS, FlipPretrainer, LossFlags, PretrainBatch
from .schema_data import DatasetSchema, Record
from .text_tower import EncoderSpec, TextTower
from .textualize import PAD_ID, Template, TextBatch, Tokenizer, encode_corpus

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class ManifestMismatch(RuntimeError):
    pass


@dataclass
class EncodedSplit:
    ids: np.ndarray
    labels: np.ndarray
    text: TextBatch

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "EncodedSplit":
        return EncodedSplit(self.ids[idx], self.labels[idx], self.text.take(idx))


def encode_split(records: Sequence[Record], schema: DatasetSchema, tokenizer: Tokenizer,
                 template: Template = Template(), l_max: int = 256) -> EncodedSplit:
    ids, labels = schema.encode(records)
    return EncodedSplit(ids, labels, encode_corpus(ids, schema, template, tokenizer, l_max))


class MetricsLog:
    """Append-only JSON-lines sink; keeps an in-memory copy as well."""

    def __init__(self, path: str | Path | None = None, **tags):
        self.path = Path(path) if path else None
        self.tags = tags  # merged into every record, e.g. command="pretrain"
        self.records: List[dict] = []

    def write(self, **rec) -> None:
        rec = {**self.tags, **rec}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def cosine_factor(step: int, total: int) -> float:
    """Multiplier on the base lr: 1 at step 0, 0 at step total - 1."""
    if total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


def build_towers(schema: DatasetSchema, tokenizer: Tokenizer, config: TrainConfig):
    m = config.model
    id_tower = IdTower(schema.M, schema.num_fields, IdTowerSpec(
        kind=m.backbone, emb_dim=m.emb_dim, dnn_sizes=list(m.dnn_sizes), cross_depth=m.cross_depth,
        att_layers=m.att_layers, att_heads=m.att_heads, att_dim=m.att_dim))
    text_tower = TextTower(EncoderSpec(V=len(tokenizer), D_text=m.d_text, n_layers=m.n_layers,
                                       n_heads=m.n_heads, L_max=m.l_max, dropout=m.dropout))
    return id_tower, text_tower


def build_pretrainer(schema: DatasetSchema, tokenizer: Tokenizer, config: TrainConfig) -> FlipPretrainer:
    id_tower, text_tower = build_towers(schema, tokenizer, config)
    return FlipPretrainer(id_tower, text_tower, len(tokenizer), schema.M, config.model.proj_dim,
                          config.pretrain.tau)


def make_pretrain_batch(data: EncodedSplit, idx: np.ndarray, schema: DatasetSchema, sampler: NoiseSampler,
                        config: TrainConfig, flags: LossFlags, rng: np.random.Generator) -> PretrainBatch:
    p = config.pretrain
    text = data.text.take(idx)
    if flags.field_level_masking:
        tok_m, text_mask, _ = batch_mask_text_fieldlevel(text, p.r_text, rng)
    else:
        tok_m, text_mask, _ = batch_mask_text_tokenlevel(text, p.r_text, rng)
    ids = data.ids[idx]
    ids_m, tab_mask = batch_mask_tabular(ids, p.r_tab, schema.mask_feature_id, rng)
    rows, fields = np.nonzero(tab_mask)
    noise = sampler.sample(fields, ids[rows, fields], p.k_noise, rng)
    return PretrainBatch(
        tokens=torch.as_tensor(text.tokens),
        tokens_masked=torch.as_tensor(tok_m),
        attn_mask=torch.as_tensor(text.tokens != PAD_ID),
        text_mask=torch.as_tensor(text_mask),
        ids=torch.as_tensor(ids),
        ids_masked=torch.as_tensor(ids_m),
        tab_mask=torch.as_tensor(tab_mask),
        noise=torch.as_tensor(noise),
    )


# --------------------------------------------------------------------------- checkpoints

def manifest_for(config: TrainConfig, schema: DatasetSchema, tokenizer: Tokenizer, id_tower: IdTower | None,
                 text_tower: TextTower | None, stage: str) -> dict:
    m = config.model
    man = {
        "stage": stage,
        "kind": m.backbone,
        "D_emb": m.emb_dim,
        "dnn_sizes": list(m.dnn_sizes),
        "D_tab": id_tower.d_tab if id_tower is not None else None,
        "M": schema.M,
        "seed": config.seed,
        "config_hash": config.digest(),
        "model_hash": config.model_digest(),
        "schema_hash": schema.digest(),
        "tokenizer_hash": tokenizer.digest(),
        "encoder": asdict(text_tower.spec) if text_tower is not None else None,
        "config": config.to_dict(),
    }
    return man


def save_checkpoint(directory: str | Path, modules: Dict[str, nn.Module], manifest: dict,
                    extra: Dict[str, object] | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, mod in modules.items():
        torch.save(mod.state_dict(), directory / f"{name}.pt")
    man = dict(manifest, archives=sorted(f"{n}.pt" for n in modules))
    if extra:
        man.update(extra)
    (directory / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=1) + "\n")
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def check_manifest(man: dict, config: TrainConfig, schema: DatasetSchema, tokenizer: Tokenizer) -> None:
    expected = {"model_hash": config.model_digest(), "schema_hash": schema.digest(),
                "tokenizer_hash": tokenizer.digest()}
    bad = [k for k, v in expected.items() if man.get(k) != v]
    if bad:
        raise ManifestMismatch(f"checkpoint does not match this run ({', '.join(bad)} differ); refusing to load")


def load_pretrainer(directory: str | Path, schema: DatasetSchema, tokenizer: Tokenizer,
                    config: TrainConfig) -> FlipPretrainer:
    directory = Path(directory)
    check_manifest(read_manifest(directory), config, schema, tokenizer)
    model = build_pretrainer(schema, tokenizer, config)
    model.load_state_dict(torch.load(directory / "pretrainer.pt", weights_only=True))
    return model


# --------------------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    model: FlipPretrainer
    epoch_losses: List[float]
    steps: int
    checkpoint: Optional[Path] = None


def pretrain(data: EncodedSplit, schema: DatasetSchema, tokenizer: Tokenizer, config: TrainConfig,
             out_dir: str | Path | None = None, log: MetricsLog | None = None,
             max_steps: int | None = None) -> PretrainResult:
    """Stage-2 alignment pretraining. ``max_steps`` truncates the run (tests only)."""
    log = log or MetricsLog()
    rng = seed_everything(config.seed)
    model = build_pretrainer(schema, tokenizer, config)
    flags = ABLATIONS[config.ablation]
    p = config.pretrain
    out_dir = Path(out_dir) if out_dir else None
    manifest = manifest_for(config, schema, tokenizer, model.id_tower, model.text_tower, "pretrain")

    def checkpoint(tag: str, **extra) -> Optional[Path]:
        if out_dir is None:
            return None
        return save_checkpoint(out_dir / tag, {"pretrainer": model}, manifest, extra)

    if not flags.any:
        log.write(event="skipped", reason="all pretraining objectives disabled")
        return PretrainResult(model, [], 0, checkpoint("last", epoch=0))

    sampler = NoiseSampler(schema, p.noise_scope)
    opt = torch.optim.AdamW(model.parameters(), lr=p.lr, weight_decay=p.weight_decay)
    n_batches = math.ceil(len(data) / p.batch_size)
    total = n_batches * p.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_factor(s, total))
    step, epoch_losses, best = 0, [], math.inf
    last_good: Optional[Path] = None
    model.train()
    for epoch in range(1, p.epochs + 1):
        perm = rng.permutation(len(data))
        running = 0.0
        for b in range(n_batches):
            idx = perm[b * p.batch_size:(b + 1) * p.batch_size]
            batch = make_pretrain_batch(data, idx, schema, sampler, config, flags, rng)
            loss, parts = model.pretrain_loss(batch, flags)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite pretraining loss at step {step}; last good checkpoint: {last_good}")
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.write(stage="pretrain", epoch=epoch, step=step, mlm=parts["mlm"], mtm=parts["mtm"],
                      icl=parts["icl"], total=float(loss.detach()), lr=lr)
            running += float(loss.detach())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        mean = running / (b + 1)
        epoch_losses.append(mean)
        log.write(stage="pretrain", epoch=epoch, split="train", total=mean)
        last_good = checkpoint("last", epoch=epoch, loss=mean)
        if mean < best:
            best = mean
            checkpoint("best", epoch=epoch, loss=mean)
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    return PretrainResult(model, epoch_losses, step, last_good)


# --------------------------------------------------------------------------- finetuning

class FlipClassifier(nn.Module):
    """CTR model for finetuning. Absent towers are simply not constructed."""

    def __init__(self, id_tower: IdTower | None, text_tower: TextTower | None):
        super().__init__()
        self.id_tower, self.text_tower = id_tower, text_tower
        if id_tower is not None:
            self.head_id = nn.Linear(id_tower.d_tab, 1)
        if text_tower is not None:
            self.head_plm = nn.Linear(text_tower.d_text, 1)
        if id_tower is not None and text_tower is not None:
            self.a = nn.Parameter(torch.zeros(()))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.a)

    def forward(self, ids, tokens, attn_mask) -> Dict[str, torch.Tensor]:
        out = {}
        if self.id_tower is not None:
            out["id"] = self.head_id(self.id_tower(ids)).squeeze(-1)
        if self.text_tower is not None:
            out["plm"] = self.head_plm(self.text_tower(tokens, attn_mask)[:, 0]).squeeze(-1)
        if "id" in out and "plm" in out:
            out["joint"] = combine_logits(out["id"], out["plm"], self.a)
        return out

    def prediction_logit(self, out: Dict[str, torch.Tensor]) -> torch.Tensor:
        return out.get("joint", out.get("id", out.get("plm")))


def combine_logits(logit_id: torch.Tensor, logit_plm: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    alpha = torch.sigmoid(a)
    return alpha * logit_id + (1 - alpha) * logit_plm


def finetune_loss(out: Dict[str, torch.Tensor], y: torch.Tensor) -> torch.Tensor:
    """Sum of BCE over every available prediction (joint, ID-only, PLM-only)."""
    return sum(F.binary_cross_entropy_with_logits(out[k], y) for k in ("joint", "id", "plm") if k in out)


@dataclass
class FinetuneResult:
    model: FlipClassifier
    test: MetricReport | None
    val_auc: float
    lr: float
    alpha: float | None
    epochs_run: int
    history: List[dict] = field(default_factory=list)


def _tensors(data: EncodedSplit, idx):
    text = data.text.take(idx)
    tokens = torch.as_tensor(text.tokens)
    return torch.as_tensor(data.ids[idx]), tokens, tokens != PAD_ID


@torch.no_grad()
def predict(model: FlipClassifier, data: EncodedSplit, batch_size: int = 2048) -> np.ndarray:
    model.eval()
    logits = []
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(len(data), s + batch_size))
        out = model(*_tensors(data, idx))
        logits.append(model.prediction_logit(out))
    return torch.cat(logits).numpy() if logits else np.zeros(0)


def evaluate(model: FlipClassifier, data: EncodedSplit, split: str = "test", batch_size: int = 2048) -> MetricReport:
    logits = predict(model, data, batch_size)
    return report(data.labels, 1.0 / (1.0 + np.exp(-logits)), split)


def chronological_val_split(data: EncodedSplit, fraction: float):
    n_val = max(1, int(round(fraction * len(data))))
    idx = np.arange(len(data))
    return data.subset(idx[:-n_val]), data.subset(idx[-n_val:])


def _fit(model: FlipClassifier, train: EncodedSplit, val: EncodedSplit, config: TrainConfig, lr: float,
         rng: np.random.Generator, log: MetricsLog, tag: str):
    ft = config.finetune
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    best_auc, best_state, bad, epochs_run = -math.inf, copy.deepcopy(model.state_dict()), 0, 0
    if ft.epochs == 0 or len(val.labels) == 0 or len(set(val.labels.tolist())) < 2:
        best_auc = float("nan")
    for epoch in range(1, ft.epochs + 1):
        model.train()
        perm = rng.permutation(len(train))
        for s in range(0, len(train), ft.batch_size):
            idx = perm[s:s + ft.batch_size]
            out = model(*_tensors(train, idx))
            loss = finetune_loss(out, torch.as_tensor(train.labels[idx], dtype=out["id" if "id" in out else "plm"].dtype))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite finetuning loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        epochs_run = epoch
        val_rep = evaluate(model, val, "val", ft.eval_batch_size)
        alpha = float(model.alpha.detach()) if hasattr(model, "a") else None
        log.write(stage="finetune", variant=tag, lr=lr, epoch=epoch, split="val", auc=val_rep.auc,
                  logloss=val_rep.logloss, alpha=alpha, loss=float(loss.detach()))
        if val_rep.auc > best_auc:
            best_auc, best_state, bad = val_rep.auc, copy.deepcopy(model.state_dict()), 0
        else:
            bad += 1
            if bad > ft.patience:
                break
    model.load_state_dict(best_state)
    return best_auc, epochs_run


def _run_finetune(make_model: Callable[[], FlipClassifier], train: EncodedSplit, test: EncodedSplit | None,
                  config: TrainConfig, tag: str, log: MetricsLog | None) -> FinetuneResult:
    log = log or MetricsLog()
    ft = config.finetune
    fit_part, val_part = chronological_val_split(train, ft.val_fraction)
    grid = [ft.lr] if ft.lr is not None else list(ft.lr_grid)
    best = None
    for lr in grid:
        rng = seed_everything(config.seed + 1)
        model = make_model()
        val_auc, epochs_run = _fit(model, fit_part, val_part, config, lr, rng, log, tag)
        if best is None or val_auc > best[1]:
            best = (model, val_auc, lr, epochs_run)
    model, val_auc, lr, epochs_run = best
    test_rep = evaluate(model, test, "test", ft.eval_batch_size) if test is not None else None
    alpha = float(model.alpha.detach()) if hasattr(model, "a") else None
    if test_rep is not None:
        log.write(stage="finetune", variant=tag, split="test", auc=test_rep.auc, logloss=test_rep.logloss,
                  alpha=alpha, lr=lr)
    return FinetuneResult(model, test_rep, val_auc, lr, alpha, epochs_run, log.records)


def _tower_copies(pretrained: FlipPretrainer):
    return copy.deepcopy(pretrained.id_tower), copy.deepcopy(pretrained.text_tower)


def finetune_adaptive(pretrained: FlipPretrainer, train: EncodedSplit, test: EncodedSplit | None,
                      config: TrainConfig, log: MetricsLog | None = None) -> FinetuneResult:
    """Joint finetuning of both towers with the learnable combination weight.

    Pretraining heads are discarded; only the towers carry over.
    """
    def make():
        id_t, text_t = _tower_copies(pretrained)
        return FlipClassifier(id_t, text_t)

    return _run_finetune(make, train, test, config, "flip", log)


def finetune_single(pretrained: FlipPretrainer, train: EncodedSplit, test: EncodedSplit | None,
                    config: TrainConfig, variant: str, log: MetricsLog | None = None) -> FinetuneResult:
    if variant not in ("flip_id", "flip_plm"):
        raise ValueError(f"finetune_single handles flip_id / flip_plm, got {variant!r}")

    def make():
        id_t, text_t = _tower_copies(pretrained)
        return FlipClassifier(id_t, None) if variant == "flip_id" else FlipClassifier(None, text_t)

    return _run_finetune(make, train, test, config, variant, log)


def train_scratch(schema: DatasetSchema, tokenizer: Tokenizer, train: EncodedSplit, test: EncodedSplit | None,
                  config: TrainConfig, log: MetricsLog | None = None) -> FinetuneResult:
    """Randomly initialised ID tower trained with plain BCE."""
    def make():
        torch.manual_seed(config.seed)
        id_t, _ = build_towers(schema, tokenizer, config)
        return FlipClassifier(id_t, None)

    return _run_finetune(make, train, test, config, "scratch", log)


def run_variant(variant: str, pretrained: FlipPretrainer, schema, tokenizer, train, test, config,
                log: MetricsLog | None = None) -> FinetuneResult:
    if variant == "flip":
        return finetune_adaptive(pretrained, train, test, config, log)
    if variant in ("flip_id", "flip_plm"):
        return finetune_single(pretrained, train, test, config, variant, log)
    if variant == "scratch":
        return train_scratch(schema, tokenizer, train, test, config, log)
    raise ValueError(f"unknown variant {variant!r}")


def save_classifier(directory: str | Path, model: FlipClassifier, manifest: dict, extra=None) -> Path:
    return save_checkpoint(directory, {"classifier": model}, manifest, extra)


def load_classifier(directory: str | Path, schema, tokenizer, config: TrainConfig, variant: str) -> FlipClassifier:
    directory = Path(directory)
    check_manifest(read_manifest(directory), config, schema, tokenizer)
    id_t, text_t = build_towers(schema, tokenizer, config)
    if variant in ("flip_id", "scratch"):
        text_t = None
    elif variant == "flip_plm":
        id_t = None
    model = FlipClassifier(id_t, text_t)
    model.load_state_dict(torch.load(directory / "classifier.pt", weights_only=True))
    model.eval()
    return model
