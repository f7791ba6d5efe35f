"""Chart attribute records and their sampling from finite attribute sets."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .tables import MetaTable, canon

CHART_TYPES = ("line", "bar", "pie", "scatter")
MULTI_SERIES_TYPES = ("line", "bar", "scatter")
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
)
TITLE_POSITIONS = ("left", "center", "right")
LEGEND_LOCATIONS = ("upper_left", "upper_right", "lower_left", "lower_right")
LINE_STYLES = ("solid", "dashed", "dotted")
MARKERS = ("circle", "square", "triangle")
ORIENTATIONS = ("v", "h")
BAR_WIDTHS = (0.5, 0.6, 0.7, 0.8)
EXPLODE_CHOICES = (0.0, 0.1)
TITLE_SIZES = (14, 16, 18, 20)
LABEL_SIZES = (8, 10, 12)

HEX_RE = re.compile(r"^#[0-9a-f]{6}$")


class SpecError(ValueError):
    """Spec is inconsistent with itself or with its table."""


@dataclass
class ChartSpec:
    chart_type: str
    title: dict  # {"text", "position"}
    grid: bool
    legend: dict  # {"show", "location"}; location is None when hidden
    palette: list[str]
    fonts: dict  # {"title_size", "label_size"}
    type_specific: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        ts = dict(self.type_specific)
        if "width" in ts:
            ts["width"] = canon(ts["width"])
        if "explode" in ts:
            ts["explode"] = [canon(x) for x in ts["explode"]]
        return {
            "chart_type": self.chart_type,
            "title": dict(self.title),
            "grid": self.grid,
            "legend": dict(self.legend),
            "palette": list(self.palette),
            "fonts": dict(self.fonts),
            "type_specific": ts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ChartSpec:
        return cls(
            d["chart_type"], dict(d["title"]), bool(d["grid"]), dict(d["legend"]),
            list(d["palette"]), dict(d["fonts"]), dict(d["type_specific"]),
        )

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def check_consistent(spec: ChartSpec, table: MetaTable) -> None:
    """Raise :class:`SpecError` unless ``spec`` can describe ``table``."""
    if spec.chart_type not in CHART_TYPES:
        raise SpecError(f"unknown chart type {spec.chart_type!r}")
    if spec.chart_type == "pie" and table.n_series != 1:
        raise SpecError("pie charts need exactly one series")
    if len(spec.palette) != table.n_series:
        raise SpecError("palette length must equal series count")
    for c in spec.palette:
        if not HEX_RE.match(c):
            raise SpecError(f"bad color {c!r}")
    if spec.title.get("text") != table.title:
        raise SpecError("title text differs from table title")
    if spec.title.get("position") not in TITLE_POSITIONS:
        raise SpecError("bad title position")
    if spec.legend.get("show"):
        if spec.legend.get("location") not in LEGEND_LOCATIONS:
            raise SpecError("bad legend location")
    elif spec.legend.get("location") is not None:
        raise SpecError("hidden legend must not carry a location")
    ts = spec.type_specific
    expected = {"bar": {"width", "orientation"}, "line": {"marker", "style"}, "pie": {"explode"}, "scatter": {"marker"}}
    if set(ts) != expected[spec.chart_type]:
        raise SpecError(f"type-specific keys {sorted(ts)} do not fit {spec.chart_type}")
    if spec.chart_type == "pie" and len(ts["explode"]) != table.n_rows:
        raise SpecError("explode list length must equal row count")
    if any(len(row) != table.n_series for row in table.values) or len(table.values) != table.n_rows:
        raise SpecError("ragged table")


def spec_rng(table: MetaTable, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, int(table.content_hash()[:8], 16), 0x5BEC])


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def derive_spec(table: MetaTable, seed: int) -> ChartSpec:
    """Sample every attribute from its predefined set, compatibly with ``table``."""
    rng = spec_rng(table, seed)
    chart_type = _pick(rng, CHART_TYPES if table.n_series == 1 else MULTI_SERIES_TYPES)
    title = {"text": table.title, "position": _pick(rng, TITLE_POSITIONS)}
    grid = bool(rng.integers(2))
    show = bool(rng.integers(2))
    loc = _pick(rng, LEGEND_LOCATIONS)
    legend = {"show": show, "location": loc if show else None}
    palette = [PALETTE[i] for i in rng.choice(len(PALETTE), table.n_series, replace=False)]
    fonts = {"title_size": _pick(rng, TITLE_SIZES), "label_size": _pick(rng, LABEL_SIZES)}
    if chart_type == "bar":
        ts = {"width": _pick(rng, BAR_WIDTHS), "orientation": _pick(rng, ORIENTATIONS)}
    elif chart_type == "line":
        ts = {"marker": _pick(rng, MARKERS), "style": _pick(rng, LINE_STYLES)}
    elif chart_type == "pie":
        ts = {"explode": [_pick(rng, EXPLODE_CHOICES) for _ in range(table.n_rows)]}
    else:
        ts = {"marker": _pick(rng, MARKERS)}
    return ChartSpec(chart_type, title, grid, legend, palette, fonts, ts)
