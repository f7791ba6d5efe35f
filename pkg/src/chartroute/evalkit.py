"""Relaxed-accuracy scoring for chart QA and a small program-of-thought interpreter."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_MARGINS = (0.05, 0.10, 0.20)

# first signed decimal; thousands groups only in well-formed 3-digit blocks
_NUMBER_RE = re.compile(r"[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[-+]?\.\d+")
_FULL_NUMBER_RE = re.compile(r"^[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?%?$|^[-+]?\.\d+%?$")
_TERMINAL_PUNCT = ".,!?;:"


def extract_number(text) -> float | None:
    """First signed decimal in ``text``; commas are thousands separators and a
    trailing percent sign is ignored (no rescaling).  Never raises."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    if not isinstance(text, str):
        text = str(text)
    m = _NUMBER_RE.search(text)
    if not m:
        return None
    try:
        v = float(m.group().replace(",", ""))
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def parse_full_number(text: str) -> float | None:
    """Number only if the whole (trimmed) string is one."""
    s = text.strip()
    if not _FULL_NUMBER_RE.match(s):
        return None
    return float(s.rstrip("%").replace(",", ""))


def normalize_answer(text: str) -> str:
    s = " ".join(text.lower().split())
    return s.rstrip(_TERMINAL_PUNCT).strip()


def relaxed_match(pred: str, gt: str, margin: float) -> bool:
    if not 0 < margin < 1:
        raise ValueError("margin must lie in (0, 1)")
    g = parse_full_number(gt)
    if g is None:
        return normalize_answer(pred) == normalize_answer(gt)
    p = extract_number(pred)
    if p is None:
        return False
    if g == 0:
        return abs(p) <= margin
    # tiny slack so decimal boundaries like 95 vs 100 @ 5% stay inclusive
    return abs(p - g) <= margin * abs(g) * (1 + 1e-12)


# --------------------------------------------------------------------------
# program of thought


class PotError(ValueError):
    pass


class PotSyntaxError(PotError):
    pass


class PotNameError(PotError):
    pass


class PotZeroDivisionError(PotError):
    pass


class PotTypeError(PotError):
    pass


_POT_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/×÷()\[\],=]))"
)
_FUNCS = {"sum", "mean", "max", "min", "len", "abs", "round"}


@dataclass
class PotProgram:
    statements: list[tuple[str, object]]  # (name, expression tree)


def _tokenize(line: str, lineno: int) -> list[tuple[str, str]]:
    out, pos = [], 0
    line = line.rstrip()
    while pos < len(line):
        m = _POT_TOKEN.match(line, pos)
        if not m or m.end() == pos:
            raise PotSyntaxError(f"line {lineno}: unexpected {line[pos:].strip()[:10]!r}")
        kind = m.lastgroup
        text = m.group(kind)
        if kind == "op":
            text = {"×": "*", "÷": "/"}.get(text, text)
        out.append((kind, text))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, toks, lineno):
        self.toks, self.i, self.lineno = toks, 0, lineno

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def eat(self, text=None):
        kind, tok = self.peek()
        if kind is None or (text is not None and tok != text):
            raise PotSyntaxError(f"line {self.lineno}: expected {text or 'token'}, found {tok!r}")
        self.i += 1
        return kind, tok

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.eat()[1]
            node = ("bin", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.eat()[1]
            node = ("bin", op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] in ("-", "+"):
            op = self.eat()[1]
            return ("neg", self.unary()) if op == "-" else self.unary()
        return self.atom()

    def atom(self):
        kind, tok = self.peek()
        if kind == "num":
            self.eat()
            return ("num", float(tok))
        if kind == "name":
            self.eat()
            if self.peek()[1] == "(":
                if tok not in _FUNCS:
                    raise PotNameError(f"line {self.lineno}: unknown function {tok!r}")
                self.eat("(")
                args = [] if self.peek()[1] == ")" else self.args(")")
                self.eat(")")
                return ("call", tok, args)
            return ("var", tok)
        if tok == "(":
            self.eat()
            node = self.expr()
            self.eat(")")
            return node
        if tok == "[":
            self.eat()
            items = [] if self.peek()[1] == "]" else self.args("]")
            self.eat("]")
            return ("list", items)
        raise PotSyntaxError(f"line {self.lineno}: unexpected {tok!r}")

    def args(self, closer):
        out = [self.expr()]
        while self.peek()[1] == ",":
            self.eat()
            if self.peek()[1] == closer:
                break
            out.append(self.expr())
        return out


def parse_pot(source: str) -> PotProgram:
    """Parse ``name = expr`` lines (``;`` also separates statements)."""
    stmts: list[tuple[str, object]] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(re.split(r"[\n;]", source), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        toks = _tokenize(line, lineno)
        if len(toks) < 3 or toks[0][0] != "name" or toks[1][1] != "=":
            raise PotSyntaxError(f"line {lineno}: expected 'name = expression'")
        name = toks[0][1]
        if name in _FUNCS:
            raise PotSyntaxError(f"line {lineno}: cannot assign to builtin {name!r}")
        if name in seen:
            raise PotSyntaxError(f"line {lineno}: {name!r} assigned twice")
        seen.add(name)
        p = _Parser(toks[2:], lineno)
        node = p.expr()
        if p.i != len(p.toks):
            raise PotSyntaxError(f"line {lineno}: trailing {p.toks[p.i][1]!r}")
        stmts.append((name, node))
    if "answer" not in seen:
        raise PotSyntaxError("program never assigns 'answer'")
    return PotProgram(stmts)


def _num(v, what):
    if isinstance(v, list):
        raise PotTypeError(f"{what} needs a number, got a list")
    return v


def _list(v, fn):
    if not isinstance(v, list):
        raise PotTypeError(f"{fn}() needs a list")
    return v


def _call(fn: str, args: list):
    if fn in ("sum", "mean", "max", "min", "len"):
        if len(args) == 1 and isinstance(args[0], list):
            xs = args[0]
        elif fn in ("max", "min") and len(args) > 1:
            xs = args
        else:
            xs = _list(args[0] if len(args) == 1 else None, fn)
        xs = [_num(x, fn) for x in xs]
        if fn == "len":
            return float(len(xs))
        if fn == "sum":
            return math.fsum(xs)
        if not xs:
            raise PotTypeError(f"{fn}() of an empty list")
        if fn == "mean":
            return math.fsum(xs) / len(xs)
        return max(xs) if fn == "max" else min(xs)
    if fn == "abs":
        if len(args) != 1:
            raise PotTypeError("abs() takes one argument")
        return abs(_num(args[0], "abs"))
    if len(args) not in (1, 2):
        raise PotTypeError("round() takes one or two arguments")
    digits = int(_num(args[1], "round")) if len(args) == 2 else 0
    return float(round(_num(args[0], "round"), digits))


def _eval(node, env):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        if node[1] not in env:
            raise PotNameError(f"undefined variable {node[1]!r}")
        return env[node[1]]
    if kind == "list":
        return [_eval(n, env) for n in node[1]]
    if kind == "neg":
        return -_num(_eval(node[1], env), "negation")
    if kind == "call":
        return _call(node[1], [_eval(a, env) for a in node[2]])
    _, op, a, b = node
    x, y = _num(_eval(a, env), op), _num(_eval(b, env), op)
    if op == "+":
        return x + y
    if op == "-":
        return x - y
    if op == "*":
        return x * y
    if y == 0:
        raise PotZeroDivisionError("division by zero")
    return x / y


def pot_eval(program: PotProgram | str) -> float:
    if isinstance(program, str):
        program = parse_pot(program)
    env: dict[str, object] = {}
    for name, node in program.statements:
        env[name] = _eval(node, env)
    ans = env["answer"]
    if isinstance(ans, list) or not math.isfinite(ans):
        raise PotTypeError("answer is not a finite number")
    return ans


# --------------------------------------------------------------------------
# reports


@dataclass
class QAItem:
    question: str
    ground_truth: str
    prediction: str
    id: str = ""

    def __post_init__(self):
        if not self.ground_truth:
            raise ValueError("ground truth must be non-empty")


@dataclass
class RelaxedReport:
    margins: tuple[float, ...]
    accuracy: dict[float, float]
    verdicts: list[dict[float, bool]]
    counts: dict[float, int]
    ids: list[str] = field(default_factory=list)
    pot_errors: int = 0

    def to_dict(self) -> dict:
        return {
            "margins": list(self.margins),
            "accuracies": {f"{m:g}": self.accuracy[m] for m in self.margins},
            "items": [
                {"id": i, "verdict_per_margin": {f"{m:g}": v[m] for m in self.margins}}
                for i, v in zip(self.ids, self.verdicts)
            ],
        }


def _format_answer(x: float) -> str:
    return f"{x:.10g}"


def resolve_prediction(pred: str, pot_mode: bool) -> tuple[str, bool]:
    """Return ``(answer_text, pot_failed)``; non-programs pass through."""
    if not pot_mode:
        return pred, False
    try:
        prog = parse_pot(pred)
    except PotError:
        return pred, False
    try:
        return _format_answer(pot_eval(prog)), False
    except PotError:
        return "", True


def score_report(items: Sequence[QAItem], margins: Iterable[float] = DEFAULT_MARGINS, pot_mode: bool = False) -> RelaxedReport:
    items = list(items)
    if not items:
        raise ValueError("score_report needs at least one item")
    margins = tuple(sorted(margins))
    verdicts, pot_errors = [], 0
    for it in items:
        answer, failed = resolve_prediction(it.prediction, pot_mode)
        pot_errors += failed
        verdicts.append({m: (not failed) and relaxed_match(answer, it.ground_truth, m) for m in margins})
    counts = {m: sum(v[m] for v in verdicts) for m in margins}
    acc = {m: counts[m] / len(items) for m in margins}
    ids = [it.id or str(k) for k, it in enumerate(items)]
    return RelaxedReport(margins, acc, verdicts, counts, ids, pot_errors)


def read_predictions(path: str | Path) -> list[QAItem]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(QAItem(d["question"], str(d["ground_truth"]), str(d["prediction"]), str(d.get("id", ""))))
    return out
