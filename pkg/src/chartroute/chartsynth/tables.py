"""Seeded meta-table synthesis."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

MIN_ROWS, MAX_ROWS = 3, 12
MIN_SERIES, MAX_SERIES = 1, 4
SCALES = (10.0, 100.0, 1000.0)
# values are drawn from (LOW_FRAC * scale, scale], so the scale is recoverable
# from the data alone as the smallest power of ten >= max value
LOW_FRAC = 0.12

_ROW_VOCABS = {
    "year": [str(y) for y in range(2001, 2013)],
    "month": ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"],
    "country": ["Brazil", "Canada", "Chile", "Egypt", "France", "India", "Japan", "Kenya", "Mexico", "Norway", "Peru", "Spain"],
    "product": ["Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta", "Iota", "Kappa", "Lambda", "Mu"],
}
_SERIES_VOCAB = ["Revenue", "Cost", "Profit", "Users", "Orders", "Visits", "Exports", "Imports"]
_METRICS = ["Sales", "Output", "Growth", "Demand", "Traffic", "Spending"]


def fmt_num(v: float) -> str:
    """Canonical number text: shortest form within 6 significant digits."""
    s = f"{float(v):.6g}"
    return "0" if s in ("-0", "0") else s


def canon(v: float) -> float:
    return float(fmt_num(v))


def declared_range(values) -> tuple[float, float]:
    top = max((max(row) for row in values), default=0.0)
    scale = 1.0
    while scale < top:
        scale *= 10.0
    return 0.0, scale


@dataclass(frozen=True)
class MetaTable:
    title: str
    col_labels: tuple[str, ...]
    row_labels: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]  # rows x series

    @property
    def n_rows(self) -> int:
        return len(self.row_labels)

    @property
    def n_series(self) -> int:
        return len(self.col_labels)

    @property
    def value_range(self) -> tuple[float, float]:
        return declared_range(self.values)

    def column(self, j: int) -> list[float]:
        return [row[j] for row in self.values]

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "col_labels": list(self.col_labels),
            "row_labels": list(self.row_labels),
            "values": [[canon(v) for v in row] for row in self.values],
            "value_range": list(self.value_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetaTable:
        return cls(
            d["title"],
            tuple(d["col_labels"]),
            tuple(d["row_labels"]),
            tuple(tuple(float(v) for v in row) for row in d["values"]),
        )

    def to_csv(self) -> str:
        lines = [",".join(["label", *self.col_labels])]
        for label, row in zip(self.row_labels, self.values):
            lines.append(",".join([label, *(fmt_num(v) for v in row)]))
        return "\n".join(lines)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def table_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x7AB1E])


def sample_table(seed: int) -> MetaTable:
    rng = table_rng(seed)
    n_rows = int(rng.integers(MIN_ROWS, MAX_ROWS + 1))
    n_series = int(rng.integers(MIN_SERIES, MAX_SERIES + 1))
    kind = sorted(_ROW_VOCABS)[int(rng.integers(len(_ROW_VOCABS)))]
    vocab = _ROW_VOCABS[kind]
    start = int(rng.integers(0, len(vocab) - n_rows + 1))
    rows = tuple(vocab[start : start + n_rows])
    cols = tuple(_SERIES_VOCAB[i] for i in sorted(rng.choice(len(_SERIES_VOCAB), n_series, replace=False)))
    scale = SCALES[int(rng.integers(len(SCALES)))]
    raw = rng.uniform(LOW_FRAC * scale, scale, (n_rows, n_series))
    values = tuple(tuple(min(scale, float(f"{v:.3g}")) for v in row) for row in raw)
    metric = _METRICS[int(rng.integers(len(_METRICS)))]
    title = f"{metric} by {kind}"
    return MetaTable(title, cols, rows, values)
