"""Template sentences for tabular records, and a word tokenizer that keeps
per-field value spans so field-level masking can address whole values."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .schema_data import DatasetSchema

PAD, CLS, MASK, UNK = "[PAD]", "[CLS]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, MASK, UNK)
PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
DEFAULT_L_MAX = 256


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    connective: str = "is"
    terminator: str = "."

    def field_sentence(self, name: str, value: str) -> str:
        return f"{name} {self.connective} {value} {self.terminator}"


@dataclass
class TextualSample:
    token_ids: List[int]
    field_value_spans: List[Tuple[int, int]]
    cls_index: int = 0

    def __len__(self) -> int:
        return len(self.token_ids)


class Tokenizer:
    """Whitespace word tokenizer with fixed special IDs 0..3."""

    def __init__(self, vocab: Sequence[str], lowercase: bool = True):
        if tuple(vocab[:4]) != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")
        self.vocab = list(vocab)
        self.lowercase = lowercase
        self._ids: Dict[str, int] = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def words(self, text: str) -> List[str]:
        if self.lowercase:
            text = text.lower()
        return text.split()

    def token_id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.token_id(w) for w in self.words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"lowercase": self.lowercase, "vocab": self.vocab}, ensure_ascii=False, indent=1) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["vocab"], d["lowercase"])


def record_values(record, schema: DatasetSchema) -> List[str]:
    """Value strings of a record given either global IDs or a raw dict."""
    if isinstance(record, dict):
        return [str(record[name]) for name in schema.field_names]
    ids = record.feature_ids if hasattr(record, "feature_ids") else record
    return [schema.decode(int(g))[1] for g in ids]


def render_text(record, schema: DatasetSchema, template: Template = Template()) -> str:
    values = record_values(record, schema)
    return " ".join(template.field_sentence(m, v) for m, v in zip(schema.field_names, values))


def build_tokenizer(texts: Iterable[str], v_max: int = 30000, lowercase: bool = True) -> Tokenizer:
    counts: Counter = Counter()
    n = 0
    for t in texts:
        n += 1
        counts.update(t.lower().split() if lowercase else t.split())
    if n == 0:
        raise ValueError("cannot build a tokenizer from an empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    words = sorted(counts, key=lambda w: (-counts[w], w))
    return Tokenizer(list(SPECIALS) + words[: max(0, v_max - len(SPECIALS))], lowercase)


def tokenize_with_spans(record, schema: DatasetSchema, template: Template, tokenizer: Tokenizer,
                        l_max: int = DEFAULT_L_MAX) -> TextualSample:
    values = record_values(record, schema)
    conn = tokenizer.encode(template.connective)
    term = tokenizer.encode(template.terminator)
    ids = [CLS_ID]
    spans = []
    for name, value in zip(schema.field_names, values):
        ids += tokenizer.encode(name) + conn
        value_ids = tokenizer.encode(value)
        if not value_ids:
            raise ValueError(f"field {name!r} has an empty value")
        spans.append((len(ids), len(ids) + len(value_ids)))
        ids += value_ids + term
    if len(ids) > l_max:
        raise SequenceTooLong(f"record {values!r} tokenizes to {len(ids)} tokens > L_max={l_max}")
    return TextualSample(ids, spans)


@dataclass
class TextBatch:
    """Padded corpus arrays: tokens (N x L), spans (N x F x 2), lengths (N,)."""

    tokens: np.ndarray
    spans: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.lengths)

    def take(self, idx) -> "TextBatch":
        lengths = self.lengths[idx]
        L = int(lengths.max()) if len(lengths) else 1
        return TextBatch(self.tokens[idx, :L], self.spans[idx], lengths)


def encode_corpus(feature_ids: np.ndarray, schema: DatasetSchema, template: Template, tokenizer: Tokenizer,
                  l_max: int = DEFAULT_L_MAX) -> TextBatch:
    """Vectorised :func:`tokenize_with_spans` over an ID matrix, caching per-feature tokens."""
    conn = tokenizer.encode(template.connective)
    term = tokenizer.encode(template.terminator)
    name_ids = [tokenizer.encode(n) for n in schema.field_names]
    value_cache: Dict[int, List[int]] = {}
    N, F = feature_ids.shape
    rows, spans = [], np.zeros((N, F, 2), dtype=np.int64)
    for i in range(N):
        ids = [CLS_ID]
        for f in range(F):
            g = int(feature_ids[i, f])
            vt = value_cache.get(g)
            if vt is None:
                vt = value_cache[g] = tokenizer.encode(schema.decode(g)[1])
            ids += name_ids[f] + conn
            spans[i, f] = (len(ids), len(ids) + len(vt))
            ids += vt + term
        if len(ids) > l_max:
            raise SequenceTooLong(f"record {i} tokenizes to {len(ids)} tokens > L_max={l_max}")
        rows.append(ids)
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    tokens = np.full((N, int(lengths.max()) if N else 1), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        tokens[i, : len(r)] = r
    return TextBatch(tokens, spans, lengths)
