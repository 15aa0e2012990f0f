"""Field-level corruption of both modalities and frequency-weighted noise features."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Set, Tuple

import numpy as np

from .schema_data import DatasetSchema, TabularSample
from .textualize import MASK_ID, TextBatch, TextualSample


def n_masked(ratio: float, count: int) -> int:
    """max(1, round(ratio * count)), rounding halves up."""
    if not 0 < ratio <= 1:
        raise ValueError(f"mask ratio must be in (0, 1], got {ratio}")
    return min(count, max(1, int(math.floor(ratio * count + 0.5))))


@dataclass
class TextMask:
    corrupted: TextualSample
    mask_fields: Set[int]
    indices: List[int]
    targets: List[int]


@dataclass
class TabMask:
    corrupted: TabularSample
    mask_fields: Set[int]
    targets: List[int]


@dataclass
class MaskedPair:
    corrupted_text: TextualSample
    corrupted_tab: TabularSample
    text_mask_fields: Set[int]
    tab_mask_fields: Set[int]
    I_text: List[int]
    I_tab: List[int]
    targets_text: List[int]
    targets_tab: List[int]

    def unmask(self) -> Tuple[TextualSample, TabularSample]:
        tokens = list(self.corrupted_text.token_ids)
        for i, t in zip(self.I_text, self.targets_text):
            tokens[i] = t
        ids = self.corrupted_tab.feature_ids.copy()
        ids[self.I_tab] = self.targets_tab
        return (TextualSample(tokens, list(self.corrupted_text.field_value_spans)),
                TabularSample(ids, self.corrupted_tab.label))


def _apply_token_mask(sample: TextualSample, indices: List[int], fields: Set[int]) -> TextMask:
    tokens = list(sample.token_ids)
    targets = [tokens[i] for i in indices]
    for i in indices:
        tokens[i] = MASK_ID
    return TextMask(TextualSample(tokens, list(sample.field_value_spans)), fields, indices, targets)


def mask_text_fieldlevel(sample: TextualSample, r_text: float, rng: np.random.Generator) -> TextMask:
    F = len(sample.field_value_spans)
    chosen = rng.choice(F, size=n_masked(r_text, F), replace=False)
    fields = {int(f) for f in chosen}
    indices = sorted(i for f in fields for i in range(*sample.field_value_spans[f]))
    return _apply_token_mask(sample, indices, fields)


def mask_text_tokenlevel(sample: TextualSample, r_text: float, rng: np.random.Generator) -> TextMask:
    L = len(sample.token_ids)
    chosen = rng.choice(np.arange(1, L), size=n_masked(r_text, L - 1), replace=False)
    indices = sorted(int(i) for i in chosen)
    fields = {f for f, (s, e) in enumerate(sample.field_value_spans) if any(s <= i < e for i in indices)}
    return _apply_token_mask(sample, indices, fields)


def mask_tabular(sample: TabularSample, r_tab: float, schema: DatasetSchema, rng: np.random.Generator) -> TabMask:
    F = len(sample.feature_ids)
    chosen = sorted(int(f) for f in rng.choice(F, size=n_masked(r_tab, F), replace=False))
    ids = np.array(sample.feature_ids, dtype=np.int64, copy=True)
    targets = [int(ids[f]) for f in chosen]
    ids[chosen] = schema.mask_feature_id
    return TabMask(TabularSample(ids, sample.label), set(chosen), targets)


def mask_pair(text: TextualSample, tab: TabularSample, schema: DatasetSchema, r_text: float, r_tab: float,
              rng: np.random.Generator, token_level: bool = False) -> MaskedPair:
    tm = (mask_text_tokenlevel if token_level else mask_text_fieldlevel)(text, r_text, rng)
    bm = mask_tabular(tab, r_tab, schema, rng)
    return MaskedPair(tm.corrupted, bm.corrupted, tm.mask_fields, bm.mask_fields,
                      tm.indices, sorted(bm.mask_fields), tm.targets, bm.targets)


@dataclass
class NoiseSample:
    field: int
    positive_id: int
    noise_ids: np.ndarray


class NoiseSampler:
    """Draws K noise features per masked feature, proportional to train frequency,
    with replacement and never equal to the positive.

    ``scope="field"`` restricts candidates to the masked field's own vocabulary;
    ``scope="global"`` draws from the entire feature space.
    """

    def __init__(self, schema: DatasetSchema, scope: str = "field"):
        if scope not in ("field", "global"):
            raise ValueError(f"noise scope must be 'field' or 'global', got {scope!r}")
        self.schema = schema
        self.scope = scope
        self._field_p = []
        for f in range(schema.num_fields):
            c = schema.field_counts(f)
            self._field_p.append(c / c.sum())
        g = schema.global_counts()
        self._global_p = g / g.sum()

    def _draw(self, rng, positives: np.ndarray, K: int, p: np.ndarray, base: int) -> np.ndarray:
        out = rng.choice(len(p), size=(len(positives), K), p=p) + base
        clash = out == positives[:, None]
        # rejection keeps the renormalised distribution exact
        while clash.any():
            out[clash] = rng.choice(len(p), size=int(clash.sum()), p=p) + base
            clash = out == positives[:, None]
        return out

    def sample(self, fields: np.ndarray, positives: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
        """Vectorised draw: one row of K noise IDs per (field, positive) pair."""
        fields = np.asarray(fields, dtype=np.int64)
        positives = np.asarray(positives, dtype=np.int64)
        out = np.empty((len(positives), K), dtype=np.int64)
        if self.scope == "global":
            if self.schema.M < 2:
                raise ValueError("feature space has a single entry; cannot draw noise")
            out[:] = self._draw(rng, positives, K, self._global_p, 0)
            return out
        for f in np.unique(fields):
            sel = fields == f
            lo, hi = self.schema.field_range(int(f))
            if hi - lo < 2:
                raise ValueError(f"field {self.schema.field_names[f]!r} has a single vocabulary entry; cannot draw noise")
            pos = positives[sel]
            if ((pos < lo) | (pos >= hi)).any():
                raise ValueError(f"positive id outside field {f} range [{lo}, {hi})")
            out[sel] = self._draw(rng, pos, K, self._field_p[f], lo)
        return out


def sample_noise(schema: DatasetSchema, field: int, positive_id: int, K: int, rng: np.random.Generator,
                 scope: str = "field", sampler: NoiseSampler | None = None) -> NoiseSample:
    sampler = sampler or NoiseSampler(schema, scope)
    ids = sampler.sample(np.array([field]), np.array([positive_id]), K, rng)[0]
    return NoiseSample(field, int(positive_id), ids)


# Batched variants used by the training loop. Same semantics as the per-sample ops.

def batch_mask_text_fieldlevel(batch: TextBatch, r_text: float, rng: np.random.Generator):
    """Returns (corrupted tokens, B x L masked-position mask, B x F masked-field mask)."""
    B, F, _ = batch.spans.shape
    n = n_masked(r_text, F)
    order = rng.random((B, F)).argsort(axis=1)[:, :n]
    field_mask = np.zeros((B, F), dtype=bool)
    np.put_along_axis(field_mask, order, True, axis=1)
    pos = np.arange(batch.tokens.shape[1])
    start, end = batch.spans[..., 0], batch.spans[..., 1]
    inside = (pos[None, None, :] >= start[..., None]) & (pos[None, None, :] < end[..., None])
    tok_mask = (inside & field_mask[..., None]).any(axis=1)
    tokens = np.where(tok_mask, MASK_ID, batch.tokens)
    return tokens, tok_mask, field_mask


def batch_mask_text_tokenlevel(batch: TextBatch, r_text: float, rng: np.random.Generator):
    B, L = batch.tokens.shape
    keys = rng.random((B, L))
    pos = np.arange(L)
    valid = (pos[None, :] >= 1) & (pos[None, :] < batch.lengths[:, None])
    keys[~valid] = np.inf
    order = keys.argsort(axis=1)
    counts = np.array([n_masked(r_text, int(l) - 1) for l in batch.lengths])
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(pos, (B, L)), axis=1)
    tok_mask = rank < counts[:, None]
    tokens = np.where(tok_mask, MASK_ID, batch.tokens)
    start, end = batch.spans[..., 0], batch.spans[..., 1]
    inside = (pos[None, None, :] >= start[..., None]) & (pos[None, None, :] < end[..., None])
    field_mask = (inside & tok_mask[:, None, :]).any(axis=2)
    return tokens, tok_mask, field_mask


def batch_mask_tabular(ids: np.ndarray, r_tab: float, mask_feature_id: int, rng: np.random.Generator):
    B, F = ids.shape
    n = n_masked(r_tab, F)
    order = rng.random((B, F)).argsort(axis=1)[:, :n]
    field_mask = np.zeros((B, F), dtype=bool)
    np.put_along_axis(field_mask, order, True, axis=1)
    return np.where(field_mask, mask_feature_id, ids), field_mask
