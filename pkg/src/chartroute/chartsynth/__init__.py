"""Synthetic chart quadruples: meta table, attribute spec, plotting script, rendered chart."""

from .pipeline import (
    ALIGN_KINDS,
    Manifest,
    Quadruple,
    Validation,
    instruction_pairs,
    make_quadruple,
    read_manifest,
    synth_batch,
    validate_quadruple,
)
from .render import RenderError, render, render_svg
from .script import (
    ChartScriptError,
    ChartScriptSemanticError,
    ChartScriptSyntaxError,
    CodeDoc,
    GenerationError,
    gen_code,
    parse_code,
)
from .spec import PALETTE, ChartSpec, SpecError, derive_spec
from .tables import MetaTable, fmt_num, sample_table

__all__ = [
    "ALIGN_KINDS", "Manifest", "Quadruple", "Validation", "instruction_pairs", "make_quadruple",
    "read_manifest", "synth_batch", "validate_quadruple", "RenderError", "render", "render_svg",
    "ChartScriptError", "ChartScriptSemanticError", "ChartScriptSyntaxError", "CodeDoc",
    "GenerationError", "gen_code", "parse_code", "PALETTE", "ChartSpec", "SpecError", "derive_spec",
    "MetaTable", "fmt_num", "sample_table",
]
