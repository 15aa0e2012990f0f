"""Metrics and fine-grained alignment analyses (masked-field heatmap, SVD projection)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from .textualize import MASK_ID


@dataclass
class MetricReport:
    auc: float
    logloss: float
    n: int
    split: str = "test"


def auc(labels, scores) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def logloss(labels, probs, clip: float = 1e-7) -> float:
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(probs, dtype=np.float64), clip, 1 - clip)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def report(labels, probs, split: str = "test") -> MetricReport:
    return MetricReport(auc(labels, probs), logloss(labels, probs), len(labels), split)


@dataclass
class HeatmapResult:
    matrix: np.ndarray          # F x F, averaged over probes
    per_record: np.ndarray      # N x F x F
    diag_mean: float
    offdiag_mean: float
    diag_max_fraction: float    # over all (record, row) pairs
    diag_max_trials: int
    p_value: float              # one-sided, per-record diag - offdiag > 0


@torch.no_grad()
def masked_similarity_heatmap(pretrainer, ids: np.ndarray, text, batch_size: int = 256) -> HeatmapResult:
    """S[a, b] = z_text(text with field a masked) . z_tab(tab with field b masked).

    ``text`` is a TextBatch aligned with ``ids``; ``pretrainer`` exposes
    ``project(tokens, attn_mask, ids)`` returning normalised (z_text, z_tab).
    """
    pretrainer.eval()
    mask_id = pretrainer.id_tower.M
    N, F = ids.shape
    out = np.empty((N, F, F))
    for s in range(0, N, batch_size):
        idx = np.arange(s, min(N, s + batch_size))
        sub = text.take(idx)
        pos = np.arange(sub.tokens.shape[1])
        attn = torch.as_tensor(pos[None, :] < sub.lengths[:, None])
        zt, zb = [], []
        for f in range(F):
            start, end = sub.spans[:, f, 0], sub.spans[:, f, 1]
            tmask = (pos[None, :] >= start[:, None]) & (pos[None, :] < end[:, None])
            tok = torch.as_tensor(np.where(tmask, MASK_ID, sub.tokens))
            tab = ids[idx].copy()
            tab[:, f] = mask_id
            z_text, _ = pretrainer.project(tok, attn, torch.as_tensor(ids[idx]))
            _, z_tab = pretrainer.project(torch.as_tensor(sub.tokens), attn, torch.as_tensor(tab))
            zt.append(z_text.double().numpy())
            zb.append(z_tab.double().numpy())
        zt, zb = np.stack(zt, axis=1), np.stack(zb, axis=1)
        out[idx] = np.einsum("nad,nbd->nab", zt, zb)
    diag = np.einsum("naa->na", out)
    off = (out.sum(axis=(1, 2)) - diag.sum(axis=1)) / (F * (F - 1))
    diffs = diag.mean(axis=1) - off
    is_max = diag >= out.max(axis=2)
    if np.allclose(diffs, diffs[0]):
        p = 0.0 if diffs[0] > 0 else 1.0
    else:
        p = float(stats.ttest_1samp(diffs, 0.0, alternative="greater").pvalue)
    return HeatmapResult(out.mean(axis=0), out, float(diag.mean()), float(off.mean()),
                         float(is_max.mean()), int(is_max.size), p)


def svd_projection(table: np.ndarray) -> np.ndarray:
    """Mean-centred rows projected on the top-2 right singular vectors (N x 2)."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2:
        raise ValueError("svd_projection needs a 2-D table with at least 2 rows")
    centred = table - table.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    coords = centred @ vt[:2].T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def write_heatmap_csv(path: str | Path, matrix: np.ndarray, field_names: Sequence[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["text_masked\\tab_masked"] + list(field_names))
        for name, row in zip(field_names, matrix):
            w.writerow([name] + [f"{x:.6f}" for x in row])


def write_svd_csv(path: str | Path, coords: np.ndarray, schema) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_id", "field", "value", "x", "y"])
        for gid, (x, y) in enumerate(coords):
            if gid < schema.M:
                f, value = schema.decode(gid)
                name = schema.field_names[f]
            else:
                name, value = "<mask>", "<mask>"
            w.writerow([gid, name, value, f"{x:.6f}", f"{y:.6f}"])
