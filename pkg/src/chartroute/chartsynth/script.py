"""ChartScript: a line-oriented plotting-script dialect with an exact round trip.

Grammar (one statement per line; ``#`` starts a comment unless it is the
hex literal of a ``color`` statement)::

    document  := statement+
    statement := 'type' IDENT
               | 'title' STRING 'pos' '=' IDENT
               | 'grid' ('on' | 'off')
               | 'legend' ('off' | 'on' 'loc' '=' IDENT)
               | 'font' IDENT '=' INT
               | 'color' INT '=' HEXCOLOR
               | 'barwidth' FLOAT
               | 'orient' ('v' | 'h')
               | 'marker' IDENT
               | 'linestyle' IDENT
               | 'explode' '[' FLOAT* ']'
               | 'xlabels' '[' STRING* ']'
               | 'series' STRING '=' '[' FLOAT* ']'

List items may be separated by commas or whitespace.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .spec import (
    CHART_TYPES,
    LEGEND_LOCATIONS,
    LINE_STYLES,
    MARKERS,
    ORIENTATIONS,
    TITLE_POSITIONS,
    ChartSpec,
    SpecError,
    check_consistent,
)
from .tables import MetaTable, fmt_num


class ChartScriptError(ValueError):
    def __init__(self, message: str, line: int, col: int | None = None):
        self.line, self.col = line, col
        where = f"line {line}" + (f", column {col}" if col is not None else "")
        super().__init__(f"{where}: {message}")
        self.message = message


class ChartScriptSyntaxError(ChartScriptError):
    pass


class ChartScriptSemanticError(ChartScriptError):
    pass


class GenerationError(SpecError):
    pass


@dataclass
class CodeDoc:
    text: str


# --------------------------------------------------------------------------
# emit


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def gen_code(spec: ChartSpec, table: MetaTable) -> CodeDoc:
    """Emit one explicit statement per attribute, then xlabels and series."""
    try:
        check_consistent(spec, table)
    except SpecError as exc:
        raise GenerationError(str(exc)) from exc
    out = [
        f"type {spec.chart_type}",
        f"title {_quote(spec.title['text'])} pos={spec.title['position']}",
        f"grid {'on' if spec.grid else 'off'}",
        f"legend on loc={spec.legend['location']}" if spec.legend["show"] else "legend off",
        f"font title = {int(spec.fonts['title_size'])}",
        f"font label = {int(spec.fonts['label_size'])}",
    ]
    out += [f"color {i} = {c}" for i, c in enumerate(spec.palette)]
    ts = spec.type_specific
    if spec.chart_type == "bar":
        out += [f"barwidth {fmt_num(ts['width'])}", f"orient {ts['orientation']}"]
    elif spec.chart_type == "line":
        out += [f"marker {ts['marker']}", f"linestyle {ts['style']}"]
    elif spec.chart_type == "pie":
        out += ["explode [" + ", ".join(fmt_num(x) for x in ts["explode"]) + "]"]
    else:
        out += [f"marker {ts['marker']}"]
    out.append("xlabels [" + ", ".join(_quote(s) for s in table.row_labels) + "]")
    for j, name in enumerate(table.col_labels):
        out.append(f"series {_quote(name)} = [" + ", ".join(fmt_num(v) for v in table.column(j)) + "]")
    return CodeDoc("\n".join(out) + "\n")


# --------------------------------------------------------------------------
# lex


_TOKEN_SPEC = [
    ("WS", r"[ \t\r]+"),
    ("STRING", r'"(?:[^"\\\n]|\\.)*"'),
    ("NUMBER", r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?"),
    ("IDENT", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("PUNCT", r"[\[\],=]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_SPEC))
_HEX_RE = re.compile(r"#[0-9a-f]{6}(?![0-9A-Za-z_])")
_INT_RE = re.compile(r"[-+]?\d+$")


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _lex_line(line: str, lineno: int) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(line):
        ch = line[pos]
        if ch == "#":
            m = _HEX_RE.match(line, pos)
            if m and toks and toks[-1].text == "=" and toks[0].text == "color":
                toks.append(_Tok("HEX", m.group(), pos + 1))
                pos = m.end()
                continue
            break
        m = _TOKEN_RE.match(line, pos)
        if not m:
            raise ChartScriptSyntaxError(f"unexpected character {ch!r}", lineno, pos + 1)
        if m.lastgroup != "WS":
            toks.append(_Tok(m.lastgroup, m.group(), pos + 1))
        pos = m.end()
    return toks


# --------------------------------------------------------------------------
# parse


class _Line:
    def __init__(self, toks: list[_Tok], lineno: int, width: int):
        self.toks, self.i, self.lineno, self.width = toks, 0, lineno, width

    def _err(self, msg: str):
        col = self.toks[self.i].col if self.i < len(self.toks) else self.width + 1
        raise ChartScriptSyntaxError(msg, self.lineno, col)

    def take(self, kind: str, text: str | None = None) -> _Tok:
        if self.i >= len(self.toks):
            self._err(f"expected {text or kind}, found end of line")
        t = self.toks[self.i]
        if t.kind != kind or (text is not None and t.text != text):
            self._err(f"expected {text or kind}, found {t.text!r}")
        self.i += 1
        return t

    def peek(self) -> _Tok | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def string(self) -> str:
        raw = self.take("STRING").text[1:-1]
        return re.sub(r"\\(.)", r"\1", raw)

    def number(self) -> float:
        return float(self.take("NUMBER").text)

    def integer(self) -> int:
        t = self.take("NUMBER")
        if not _INT_RE.match(t.text):
            self.i -= 1
            self._err(f"expected integer, found {t.text!r}")
        return int(t.text)

    def word(self, *choices: str) -> str:
        t = self.take("IDENT")
        if choices and t.text not in choices:
            self.i -= 1
            self._err(f"expected one of {'/'.join(choices)}, found {t.text!r}")
        return t.text

    def items(self, item) -> list:
        self.take("PUNCT", "[")
        out = []
        while True:
            t = self.peek()
            if t is None:
                self._err("unterminated list")
            if t.text == "]":
                self.i += 1
                return out
            if t.text == "," and out:
                self.i += 1
                continue
            out.append(item())

    def end(self):
        if self.i < len(self.toks):
            self._err(f"unexpected {self.toks[self.i].text!r}")


def _statements(text: str):
    for lineno, line in enumerate(text.split("\n"), start=1):
        toks = _lex_line(line, lineno)
        if not toks:
            continue
        p = _Line(toks, lineno, len(line))
        kw = p.word()
        if kw == "type":
            val = p.word()
        elif kw == "title":
            s = p.string()
            p.take("IDENT", "pos")
            p.take("PUNCT", "=")
            val = (s, p.word())
        elif kw == "grid":
            val = p.word("on", "off") == "on"
        elif kw == "legend":
            if p.word("on", "off") == "on":
                p.take("IDENT", "loc")
                p.take("PUNCT", "=")
                val = (True, p.word())
            else:
                val = (False, None)
        elif kw == "font":
            name = p.word()
            p.take("PUNCT", "=")
            kw, val = f"font {name}", p.integer()
        elif kw == "color":
            idx = p.integer()
            p.take("PUNCT", "=")
            kw, val = f"color {idx}", p.take("HEX").text
        elif kw == "barwidth":
            val = p.number()
        elif kw == "orient":
            val = p.word(*ORIENTATIONS)
        elif kw in ("marker", "linestyle"):
            val = p.word()
        elif kw == "explode":
            val = p.items(p.number)
        elif kw == "xlabels":
            val = p.items(p.string)
        elif kw == "series":
            name = p.string()
            p.take("PUNCT", "=")
            kw, val = "series", (name, p.items(p.number))
        else:
            p.i = 0
            p._err(f"unknown statement {kw!r}")
        p.end()
        yield lineno, kw, val


def parse_code(code: CodeDoc | str) -> tuple[ChartSpec, MetaTable]:
    """Parse a script back into ``(spec, table)``.

    Raises :class:`ChartScriptSyntaxError` (with line and column) or
    :class:`ChartScriptSemanticError`.
    """
    text = code.text if isinstance(code, CodeDoc) else code
    seen: dict[str, tuple[int, object]] = {}
    series: list[tuple[int, str, list[float]]] = []
    last_line = 1
    for lineno, kw, val in _statements(text):
        last_line = lineno
        if kw == "series":
            series.append((lineno, *val))
            continue
        if kw in seen:
            raise ChartScriptSemanticError(f"duplicate statement {kw!r} (first on line {seen[kw][0]})", lineno)
        seen[kw] = (lineno, val)
    if not seen and not series:
        raise ChartScriptSyntaxError("empty document: at least one statement required", 1, 1)

    def need(key: str):
        if key not in seen:
            raise ChartScriptSemanticError(f"missing {key} statement", last_line)
        return seen[key][1]

    def sem(msg: str, key: str | None = None):
        raise ChartScriptSemanticError(msg, seen[key][0] if key in seen else last_line)

    if not series:
        sem("missing series")
    chart_type = need("type")
    if chart_type not in CHART_TYPES:
        sem(f"unknown chart type {chart_type!r}", "type")
    title_text, title_pos = need("title")
    if title_pos not in TITLE_POSITIONS:
        sem(f"unknown title position {title_pos!r}", "title")
    grid = need("grid")
    show, loc = need("legend")
    if show and loc not in LEGEND_LOCATIONS:
        sem(f"unknown legend location {loc!r}", "legend")
    fonts = {"title_size": need("font title"), "label_size": need("font label")}
    for key in seen:
        if key.startswith("font ") and key not in ("font title", "font label"):
            sem(f"unknown font slot {key[5:]!r}", key)
    xlabels = need("xlabels")

    n_series = len(series)
    colors = {}
    for key, (ln, val) in seen.items():
        if key.startswith("color "):
            idx = int(key[6:])
            if not 0 <= idx < n_series:
                raise ChartScriptSemanticError(f"color index {idx} out of range for {n_series} series", ln)
            colors[idx] = val
    missing = [i for i in range(n_series) if i not in colors]
    if missing:
        sem(f"missing color statement for series {missing[0]}")

    allowed = {"bar": ("barwidth", "orient"), "line": ("marker", "linestyle"), "pie": ("explode",), "scatter": ("marker",)}
    specific_keys = {"barwidth", "orient", "marker", "linestyle", "explode"}
    for key in specific_keys & set(seen):
        if key not in allowed[chart_type]:
            sem(f"{key!r} does not apply to {chart_type} charts", key)
    if chart_type == "bar":
        ts = {"width": need("barwidth"), "orientation": need("orient")}
    elif chart_type == "line":
        ts = {"marker": need("marker"), "style": need("linestyle")}
    elif chart_type == "pie":
        ts = {"explode": need("explode")}
    else:
        ts = {"marker": need("marker")}
    if "marker" in ts and ts["marker"] not in MARKERS:
        sem(f"unknown marker {ts['marker']!r}", "marker")
    if "style" in ts and ts["style"] not in LINE_STYLES:
        sem(f"unknown line style {ts['style']!r}", "linestyle")

    names = [name for _, name, _ in series]
    if len(set(names)) != len(names):
        sem("duplicate series name")
    for ln, name, vals in series:
        if len(vals) != len(xlabels):
            raise ChartScriptSemanticError(
                f"series {name!r} has {len(vals)} values for {len(xlabels)} labels", ln
            )
    values = tuple(tuple(s[2][r] for s in series) for r in range(len(xlabels)))
    table = MetaTable(title_text, tuple(names), tuple(xlabels), values)
    spec = ChartSpec(
        chart_type,
        {"text": title_text, "position": title_pos},
        grid,
        {"show": show, "location": loc},
        [colors[i] for i in range(n_series)],
        fonts,
        ts,
    )
    try:
        check_consistent(spec, table)
    except SpecError as exc:
        raise ChartScriptSemanticError(str(exc), last_line) from exc
    return spec, table
