"""Table -> spec -> script -> chart quadruples, validation, and batch manifests."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .render import RenderError, render, render_svg
from .script import ChartScriptError, CodeDoc, gen_code, parse_code
from .spec import ChartSpec, SpecError, canonical_json, derive_spec
from .tables import MetaTable, sample_table

ALIGN_KINDS = ("table", "json", "code")

_TEMPLATES = {
    "table": (
        "Convert the chart into a CSV table.",
        "Extract the underlying data table of this chart as CSV.",
        "Write out the data shown in the chart in CSV format.",
    ),
    "json": (
        "Describe the chart attributes in JSON.",
        "Give the JSON record of this chart's type, title, legend, colors and fonts.",
        "List the plotting attributes of the chart as a JSON object.",
    ),
    "code": (
        "Write the ChartScript that draws this chart.",
        "Produce plotting code that reproduces the chart exactly.",
        "Redraw this chart: output the full plotting script.",
    ),
}


@dataclass
class Quadruple:
    id: str
    seed: int
    table: MetaTable
    spec: ChartSpec
    code: CodeDoc
    svg: str
    raster: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Validation:
    ok: bool
    reason: str | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


def quad_id(seed: int) -> str:
    return f"q{seed:08d}"


def make_quadruple(seed: int, with_raster: bool = True) -> Quadruple:
    table = sample_table(seed)
    spec = derive_spec(table, seed)
    code = gen_code(spec, table)
    if with_raster:
        svg, raster = render(spec, table)
    else:
        svg, raster = render_svg(spec, table), None
    return Quadruple(quad_id(seed), seed, table, spec, code, svg, raster)


def validate_quadruple(q: Quadruple) -> Validation:
    """Round-trip the script and re-render; never raises."""
    try:
        spec, table = parse_code(q.code)
    except ChartScriptError as exc:
        return Validation(False, "parse-error", str(exc))
    if spec.to_dict() != q.spec.to_dict() or table.to_dict() != q.table.to_dict():
        return Validation(False, "round-trip-mismatch")
    try:
        render_svg(spec, table)
    except (RenderError, SpecError, ValueError, ZeroDivisionError) as exc:
        return Validation(False, "render-error", str(exc))
    return Validation(True)


def instruction_pairs(q: Quadruple) -> list[dict]:
    """Three templated chart-to-X pairs (table, JSON, code)."""
    targets = {"table": q.table.to_csv(), "json": q.spec.to_json(), "code": q.code.text}
    out = []
    for k, kind in enumerate(ALIGN_KINDS):
        templates = _TEMPLATES[kind]
        out.append({"task": kind, "instruction": templates[(q.seed + k) % len(templates)], "target": targets[kind]})
    return out


def _synth_one(seed: int) -> dict | None:
    q = make_quadruple(seed, with_raster=False)
    check = validate_quadruple(q)
    if not check:
        return None
    return {
        "id": q.id,
        "seed": q.seed,
        "table": q.table.to_dict(),
        "spec": q.spec.to_dict(),
        "code": q.code.text,
        "svg": q.svg,
        "instructions": instruction_pairs(q),
    }


@dataclass
class Manifest:
    path: Path
    n_requested: int
    n_retained: int
    sha256: str

    @property
    def retention(self) -> float:
        return self.n_retained / self.n_requested


def synth_batch(n: int, base_seed: int, out_path: str | Path, workers: int = 1) -> Manifest:
    """Generate seeds ``base_seed .. base_seed+n-1`` and write ``manifest.jsonl``.

    SVGs go to ``svg/<id>.svg`` under ``out_path``.  Records are written in
    seed order whatever the worker count.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_path)
    try:
        (out / "svg").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    seeds = range(base_seed, base_seed + n)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_synth_one, seeds, chunksize=max(1, n // (4 * workers))))
    else:
        records = [_synth_one(s) for s in seeds]
    kept = [r for r in records if r is not None]
    lines = []
    for rec in kept:
        svg_rel = f"svg/{rec['id']}.svg"
        (out / svg_rel).write_text(rec.pop("svg"), encoding="utf-8")
        rec["svg_path"] = svg_rel
        lines.append(canonical_json(rec))
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    manifest_path = out / "manifest.jsonl"
    manifest_path.write_bytes(blob)
    return Manifest(manifest_path, n, len(kept), hashlib.sha256(blob).hexdigest())


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
