"""Pretraining objectives: tabular-conditioned MLM, text-conditioned MTM (NCE), and ICL."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .id_tower import IdTower
from .text_tower import TextTower


@dataclass
class LossFlags:
    mlm: bool = True
    mtm: bool = True
    icl: bool = True
    joint_reconstruction: bool = True
    field_level_masking: bool = True

    @property
    def any(self) -> bool:
        return self.mlm or self.mtm or self.icl


ABLATIONS: Dict[str, LossFlags] = {
    "full": LossFlags(),
    "wo_mlm": LossFlags(mlm=False),
    "wo_mtm": LossFlags(mtm=False),
    "wo_icl": LossFlags(icl=False),
    "wo_mlm_mtm": LossFlags(mlm=False, mtm=False),
    "wo_mlm_mtm_icl": LossFlags(mlm=False, mtm=False, icl=False),
    "wo_field_masking": LossFlags(field_level_masking=False),
    "wo_joint_reconstruction": LossFlags(joint_reconstruction=False),
}


def _per_sample_mean(values: torch.Tensor, rows: torch.Tensor, B: int) -> torch.Tensor:
    """Average `values` within each sample, then over samples that have any entries."""
    total = values.new_zeros(B).index_add(0, rows, values)
    count = values.new_zeros(B).index_add(0, rows, torch.ones_like(values))
    present = count > 0
    if not present.any():
        return values.new_zeros(())
    return (total[present] / count[present]).mean()


class MlmHead(nn.Module):
    """g_PLM: two-layer MLP on [w_hat_l ; v] -> V logits."""

    def __init__(self, d_text: int, d_tab: int, vocab_size: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_text
        self.net = nn.Sequential(nn.Linear(d_text + d_tab, hidden), nn.GELU(), nn.Linear(hidden, vocab_size))

    def forward(self, tokens: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([tokens, v], dim=-1))


def mlm_loss(w_hat: torch.Tensor, v: torch.Tensor, text_mask: torch.Tensor, targets: torch.Tensor,
             head: MlmHead) -> torch.Tensor:
    """Cross-entropy over masked token positions; per-sample mean, then batch mean.

    text_mask is B x L bool, targets the clean B x L token IDs.
    """
    rows, cols = text_mask.nonzero(as_tuple=True)
    logits = head(w_hat[rows, cols], v[rows])
    ce = F.cross_entropy(logits, targets[rows, cols], reduction="none")
    return _per_sample_mean(ce, rows, w_hat.shape[0])


def cross_attend(v_hat: torch.Tensor, w: torch.Tensor, Q: torch.Tensor, key_mask: torch.Tensor | None = None,
                 return_probs: bool = False):
    """u = softmax(v_hat Q w^T / sqrt(D_text)) w, a D_text vector per sample."""
    d_text = w.shape[-1]
    logits = torch.einsum("bt,td,bld->bl", v_hat, Q, w) / math.sqrt(d_text)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask, float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    u = torch.einsum("bl,bld->bd", probs, w)
    return (u, probs) if return_probs else u


class CrossAttentionUnit(nn.Module):
    def __init__(self, d_tab: int, d_text: int):
        super().__init__()
        self.Q = nn.Parameter(torch.empty(d_tab, d_text))
        nn.init.xavier_uniform_(self.Q)

    def forward(self, v_hat, w, key_mask=None):
        return cross_attend(v_hat, w, self.Q, key_mask)


class MtmHead(nn.Module):
    """Per-field two-layer MLPs g_ID^(f) plus a shared M-row candidate table.

    The score of candidate j for field f is ``table[j] . g_f(u) + bias[j]``,
    i.e. the field's M-way output layer evaluated only on requested rows.
    """

    def __init__(self, num_fields: int, d_text: int, M: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_text
        bound1, bound2 = 1 / math.sqrt(d_text), 1 / math.sqrt(hidden)
        self.W1 = nn.Parameter(torch.empty(num_fields, d_text, hidden).uniform_(-bound1, bound1))
        self.b1 = nn.Parameter(torch.zeros(num_fields, hidden))
        self.W2 = nn.Parameter(torch.empty(num_fields, hidden, hidden).uniform_(-bound2, bound2))
        self.b2 = nn.Parameter(torch.zeros(num_fields, hidden))
        self.table = nn.Parameter(torch.empty(M, hidden).normal_(std=0.02))
        self.bias = nn.Parameter(torch.zeros(M))

    def field_hidden(self, u: torch.Tensor, fields: torch.Tensor) -> torch.Tensor:
        h = F.gelu(torch.einsum("nd,ndh->nh", u, self.W1[fields]) + self.b1[fields])
        return torch.einsum("nd,ndh->nh", h, self.W2[fields]) + self.b2[fields]

    def score(self, u: torch.Tensor, fields: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        """u: n x D_text, fields: n, candidates: n x C global IDs -> n x C scores."""
        h = self.field_hidden(u, fields)
        return torch.einsum("nh,nch->nc", h, self.table[candidates]) + self.bias[candidates]


def nce_loss(pos_scores: torch.Tensor, noise_scores: torch.Tensor, rows: torch.Tensor, B: int) -> torch.Tensor:
    """-(log sig(c_t) + sum_k log(1 - sig(c_k))) per masked field, averaged per sample then over batch."""
    per_field = F.softplus(-pos_scores) + F.softplus(noise_scores).sum(dim=-1)
    return _per_sample_mean(per_field, rows, B)


def mtm_nce_loss(u: torch.Tensor, tab_mask: torch.Tensor, positives: torch.Tensor, noise: torch.Tensor,
                 head: MtmHead) -> torch.Tensor:
    """tab_mask: B x F bool; positives: B x F clean IDs; noise: n x K aligned with tab_mask.nonzero()."""
    rows, fields = tab_mask.nonzero(as_tuple=True)
    cand = torch.cat([positives[rows, fields][:, None], noise], dim=1)
    s = head.score(u[rows], fields, cand)
    return nce_loss(s[:, 0], s[:, 1:], rows, u.shape[0])


def mtm_full_softmax_loss(u: torch.Tensor, tab_mask: torch.Tensor, positives: torch.Tensor, head: MtmHead,
                          schema) -> torch.Tensor:
    """Exact cross-entropy over each masked field's full candidate range."""
    rows, fields = tab_mask.nonzero(as_tuple=True)
    ce = u.new_zeros(len(rows))
    for f in torch.unique(fields).tolist():
        sel = (fields == f).nonzero(as_tuple=True)[0]
        lo, hi = schema.field_range(f)
        cand = torch.arange(lo, hi, device=u.device).expand(len(sel), -1)
        s = head.score(u[rows[sel]], fields[sel], cand)
        ce = ce.index_put((sel,), F.cross_entropy(s, positives[rows[sel], f] - lo, reduction="none"))
    return _per_sample_mean(ce, rows, u.shape[0])


class IclProjections(nn.Module):
    def __init__(self, d_text: int, d_tab: int, d: int = 128):
        super().__init__()
        self.text = nn.Linear(d_text, d)
        self.tab = nn.Linear(d_tab, d)

    def forward(self, cls_vec: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return F.normalize(self.text(cls_vec), dim=-1), F.normalize(self.tab(v), dim=-1)


def icl_loss(z_text: torch.Tensor, z_tab: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives (denominator includes the positive)."""
    logits = z_text @ z_tab.T / tau
    target = torch.arange(len(z_text), device=z_text.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


@dataclass
class PretrainBatch:
    tokens: torch.Tensor         # clean text, B x L
    tokens_masked: torch.Tensor  # corrupted text
    attn_mask: torch.Tensor      # B x L, True on real tokens
    text_mask: torch.Tensor      # B x L, True on masked positions
    ids: torch.Tensor            # clean tabular, B x F
    ids_masked: torch.Tensor
    tab_mask: torch.Tensor       # B x F
    noise: torch.Tensor          # n_masked x K, rows follow tab_mask.nonzero()


class FlipPretrainer(nn.Module):
    """Both towers plus every pretraining head."""

    def __init__(self, id_tower: IdTower, text_tower: TextTower, vocab_size: int, M: int, proj_dim: int = 128,
                 tau: float = 0.7):
        super().__init__()
        self.id_tower, self.text_tower = id_tower, text_tower
        d_tab, d_text = id_tower.d_tab, text_tower.d_text
        self.tau = tau
        self.mlm_head = MlmHead(d_text, d_tab, vocab_size)
        self.cross = CrossAttentionUnit(d_tab, d_text)
        self.mtm_head = MtmHead(id_tower.num_fields, d_text, M)
        self.icl_proj = IclProjections(d_text, d_tab, proj_dim)

    def project(self, tokens, attn_mask, ids):
        w = self.text_tower(tokens, attn_mask)
        v = self.id_tower(ids)
        return self.icl_proj(w[:, 0], v)

    def pretrain_loss(self, batch: PretrainBatch, flags: LossFlags) -> Tuple[torch.Tensor, Dict[str, float]]:
        zero = torch.zeros((), dtype=self.cross.Q.dtype)
        parts = {"mlm": zero, "mtm": zero, "icl": zero}
        if not flags.any:
            return zero, {k: 0.0 for k in parts}
        joint = flags.joint_reconstruction
        need_w = flags.icl or (flags.mtm and joint)
        need_w_hat = flags.mlm or (flags.mtm and not joint)
        need_v = flags.icl or (flags.mlm and joint)
        need_v_hat = flags.mtm or (flags.mlm and not joint)
        w = self.text_tower(batch.tokens, batch.attn_mask) if need_w else None
        w_hat = self.text_tower(batch.tokens_masked, batch.attn_mask) if need_w_hat else None
        v = self.id_tower(batch.ids) if need_v else None
        v_hat = self.id_tower(batch.ids_masked) if need_v_hat else None
        if flags.mlm:
            parts["mlm"] = mlm_loss(w_hat, v if joint else v_hat, batch.text_mask, batch.tokens, self.mlm_head)
        if flags.mtm:
            u = self.cross(v_hat, w if joint else w_hat, batch.attn_mask)
            parts["mtm"] = mtm_nce_loss(u, batch.tab_mask, batch.ids, batch.noise, self.mtm_head)
        if flags.icl:
            z_text, z_tab = self.icl_proj(w[:, 0], v)
            parts["icl"] = icl_loss(z_text, z_tab, self.tau)
        total = parts["mlm"] + parts["mtm"] + parts["icl"]
        return total, {k: float(t.detach()) for k, t in parts.items()}
