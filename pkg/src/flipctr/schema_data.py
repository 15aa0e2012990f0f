"""Raw rating logs -> labeled records -> chronological split -> feature-ID schema."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
RULES = ("movielens", "bookcrossing", "goodreads")

Record = Dict[str, object]


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    fields: Tuple[str, ...]
    label: str = "rating"
    timestamp: str | None = "timestamp"


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    order_key: str = "timestamp"


@dataclass
class TabularSample:
    feature_ids: np.ndarray
    label: int


@dataclass
class DatasetSchema:
    field_names: List[str]
    vocabularies: List[List[str]]
    feature_base: List[int]
    M: int
    freq: List[Dict[str, int]]
    mask_feature_id: int
    _index: List[Dict[str, int]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self._index = [{v: j for j, v in enumerate(voc)} for voc in self.vocabularies]

    @property
    def num_fields(self) -> int:
        return len(self.field_names)

    def field_size(self, f: int) -> int:
        return len(self.vocabularies[f])

    def field_range(self, f: int) -> Tuple[int, int]:
        lo = self.feature_base[f]
        return lo, lo + len(self.vocabularies[f])

    def feature_id(self, f: int, value: str) -> int:
        j = self._index[f].get(value)
        if j is None:
            j = self._index[f][UNKNOWN]
        return self.feature_base[f] + j

    def decode(self, gid: int) -> Tuple[int, str]:
        """Global feature ID -> (field index, value string)."""
        if not 0 <= gid < self.M:
            raise IndexError(f"feature id {gid} outside [0, {self.M})")
        f = int(np.searchsorted(self.feature_base, gid, side="right")) - 1
        return f, self.vocabularies[f][gid - self.feature_base[f]]

    def field_of(self, gids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.feature_base, gids, side="right") - 1

    def field_counts(self, f: int) -> np.ndarray:
        voc = self.vocabularies[f]
        return np.array([self.freq[f][v] for v in voc], dtype=np.float64)

    def global_counts(self) -> np.ndarray:
        return np.concatenate([self.field_counts(f) for f in range(self.num_fields)])

    def encode(self, records: Sequence[Record]) -> Tuple[np.ndarray, np.ndarray]:
        """Records -> (N x F global feature IDs, N labels)."""
        ids = np.empty((len(records), self.num_fields), dtype=np.int64)
        labels = np.empty(len(records), dtype=np.int64)
        for i, rec in enumerate(records):
            for f, name in enumerate(self.field_names):
                ids[i, f] = self.feature_id(f, str(rec[name]))
            labels[i] = int(rec.get("label", 0))
        return ids, labels

    def to_dict(self) -> dict:
        return {
            "field_names": self.field_names,
            "vocabularies": self.vocabularies,
            "feature_base": self.feature_base,
            "M": self.M,
            "freq": self.freq,
            "mask_feature_id": self.mask_feature_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSchema":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            field_names=d["field_names"],
            vocabularies=d["vocabularies"],
            feature_base=d["feature_base"],
            M=d["M"],
            freq=d["freq"],
            mask_feature_id=d["mask_feature_id"],
        )


def load_tabular(path: str | Path, columns: ColumnSpec, delimiter: str = "\t") -> List[Record]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        pos = {name: k for k, name in enumerate(header)}
        if columns.label not in pos:
            raise SchemaError(f"label column '{columns.label}' not found")
        if columns.timestamp is not None and columns.timestamp not in pos:
            raise SchemaError(f"timestamp column '{columns.timestamp}' not found")
        for name in columns.fields:
            if name not in pos:
                raise SchemaError(f"field column '{name}' not found")
        wanted = list(columns.fields) + [columns.label]
        if columns.timestamp is not None:
            wanted.append(columns.timestamp)
        records: List[Record] = []
        # row numbers count the header as row 1
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {rownum} has {len(row)} cells, expected {len(header)}")
            rec: Record = {}
            for name in wanted:
                cell = row[pos[name]].strip()
                rec[name] = cell if cell or name not in columns.fields else UNKNOWN
            records.append(rec)
    return records


def binarize_labels(records: Sequence[Record], rule: str, column: str = "rating") -> List[Record]:
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; valid rules: {', '.join(RULES)}")
    out = []
    for i, rec in enumerate(records):
        try:
            r = float(rec[column])
        except (TypeError, ValueError, KeyError):
            raise DataError(f"record {i}: rating {rec.get(column)!r} is not numeric") from None
        if rule == "movielens":
            if r == 3:
                continue
            label = int(r > 3)
        elif rule == "bookcrossing":
            label = int(r > 5)
        else:
            label = int(r > 3)
        new = dict(rec)
        new["label"] = label
        out.append(new)
    return out


def _time_key(value: object):
    try:
        return (0, float(value))
    except (TypeError, ValueError):
        return (1, str(value))


def chronological_split(records: Sequence[Record], spec: SplitSpec = SplitSpec()) -> Tuple[List[Record], List[Record]]:
    for i, rec in enumerate(records):
        if spec.order_key not in rec or rec[spec.order_key] in ("", None):
            raise DataError(f"record {i}: missing timestamp '{spec.order_key}'")
    # sorted() is stable, so ties keep file order
    ordered = sorted(records, key=lambda r: _time_key(r[spec.order_key]))
    n_train = math.floor(spec.train_fraction * len(ordered))
    train, test = list(ordered[:n_train]), list(ordered[n_train:])
    if not test:
        warnings.warn("chronological_split produced an empty test set", stacklevel=2)
    return train, test


def build_schema(train: Sequence[Record], field_names: Sequence[str]) -> DatasetSchema:
    if not train:
        raise DataError("cannot build a schema from an empty train set")
    vocabularies, freq, bases = [], [], []
    base = 0
    for name in field_names:
        counts: Dict[str, int] = {}
        for rec in train:
            v = str(rec[name])
            counts[v] = counts.get(v, 0) + 1
        # "unknown" always sits at local index 0; the rest follow first appearance
        voc = [UNKNOWN] + [v for v in counts if v != UNKNOWN]
        fr = {v: counts.get(v, 0) for v in voc}
        fr[UNKNOWN] = max(fr[UNKNOWN], 1)
        vocabularies.append(voc)
        freq.append(fr)
        bases.append(base)
        base += len(voc)
    return DatasetSchema(
        field_names=list(field_names),
        vocabularies=vocabularies,
        feature_base=bases,
        M=base,
        freq=freq,
        mask_feature_id=base,
    )


def write_records(path: str | Path, records: Sequence[Record], columns: Sequence[str], delimiter: str = "\t") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([rec[c] for c in columns])


def read_records(path: str | Path, delimiter: str = "\t") -> List[Record]:
    """Read a split written by :func:`write_records` (labels become ints)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter=delimiter))
    for r in rows:
        if "label" in r:
            r["label"] = int(r["label"])
    return rows
