"""Seeded planted-interaction CTR data for desk-scale runs.

Each field value is a two-word string ``"<class word> <tag word>"``. The class
word is shared by many values of a field and carries most of the label signal;
the tag word is shared across fields, so distinct IDs often differ by a single
short token ("kato ra" vs "kato re"). Labels come from a logistic model over
planted pairwise field interactions.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from .schema_data import Record, SplitSpec, chronological_split

FIELD_NAMES = ("user", "age", "occupation", "zipcode", "movie", "year", "genre", "director", "city", "device")
_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticConfig:
    n_records: int = 10000
    vocab_sizes: List[int] = field(default_factory=lambda: [3000, 8, 24, 600, 3000, 12, 18, 600])
    n_classes: int = 4
    zipf_exponent: float = 0.8
    n_pairs: int = 8
    interaction_scale: float = 1.0
    id_jitter: float = 0.2
    bias: float = 0.0
    train_fraction: float = 0.9
    seed: int = 17

    def validate(self) -> None:
        if len(self.vocab_sizes) < 2:
            raise ValueError("synthetic data needs F >= 2 fields")
        if min(self.vocab_sizes) < 2:
            raise ValueError("every field needs a vocabulary of at least 2 values")
        if self.n_classes < 1 or self.n_records < 1:
            raise ValueError("n_classes and n_records must be positive")


def _field_names(F: int) -> List[str]:
    return [FIELD_NAMES[f] if f < len(FIELD_NAMES) else f"field{f}" for f in range(F)]


def _syllables(rng: np.random.Generator) -> List[str]:
    syl = [c + v for c in _CONS for v in _VOWELS]
    rng.shuffle(syl)
    return syl


def generate_synthetic(config: SyntheticConfig) -> Tuple[List[Record], List[Record], dict]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    F = len(config.vocab_sizes)
    names = _field_names(F)
    C = config.n_classes

    syl = _syllables(rng)
    # two-syllable class words, unique over all fields
    pool = [a + b for a, b in itertools.product(syl[:20], syl[20:40])]
    rng.shuffle(pool)
    class_words = [pool[f * C:(f + 1) * C] for f in range(F)]
    n_tags = max(math.ceil(n / C) for n in config.vocab_sizes)
    tag_words = syl[40:]
    if len(tag_words) < n_tags:
        tag_words += [a + b for a, b in itertools.product(syl[40:], syl[:40])]
    tag_words = tag_words[:n_tags]

    values, value_class, value_score, popularity, class_scores = [], [], [], [], []
    for f, n in enumerate(config.vocab_sizes):
        cls = np.arange(n) % C
        values.append([f"{class_words[f][c]} {tag_words[j // C]}" for j, c in enumerate(cls)])
        class_score = rng.normal(size=C)
        class_score -= class_score.mean()
        value_class.append(cls)
        class_scores.append(class_score[cls])
        value_score.append(class_score[cls] + config.id_jitter * rng.normal(size=n))
        ranks = rng.permutation(n)
        p = 1.0 / (ranks + 1.0) ** config.zipf_exponent
        popularity.append(p / p.sum())

    all_pairs = list(itertools.combinations(range(F), 2))
    chosen = rng.choice(len(all_pairs), size=min(config.n_pairs, len(all_pairs)), replace=False)
    pairs = [all_pairs[k] for k in sorted(chosen)]
    weights = rng.choice([-1.0, 1.0], size=len(pairs)) * rng.uniform(0.5, 1.5, size=len(pairs))
    weights *= config.interaction_scale

    N = config.n_records
    draws = np.stack([rng.choice(n, size=N, p=popularity[f]) for f, n in enumerate(config.vocab_sizes)], axis=1)
    logit = np.full(N, config.bias)
    for (f, g), w in zip(pairs, weights):
        logit += w * value_score[f][draws[:, f]] * value_score[g][draws[:, g]]
    prob = 1.0 / (1.0 + np.exp(-logit))
    class_logit = np.full(N, config.bias)
    for (f, g), w in zip(pairs, weights):
        class_logit += w * class_scores[f][draws[:, f]] * class_scores[g][draws[:, g]]
    labels = (rng.random(N) < prob).astype(int)

    records: List[Record] = []
    for i in range(N):
        rec: Record = {names[f]: values[f][draws[i, f]] for f in range(F)}
        rec["label"] = int(labels[i])
        rec["timestamp"] = i
        records.append(rec)
    train, test = chronological_split(records, SplitSpec(config.train_fraction, "timestamp"))
    truth = {
        "config": asdict(config),
        "field_names": names,
        "pairs": [list(p) for p in pairs],
        "weights": weights.tolist(),
        "class_words": class_words,
        "tag_words": tag_words,
        "bayes_prob_mean": float(prob.mean()),
        "prob": prob.tolist(),
        "class_logit": class_logit.tolist(),
    }
    return train, test, truth
