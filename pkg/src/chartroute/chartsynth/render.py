"""Native chart renderer: one scene list drives both the SVG text and the raster.

Scene order is fixed (axes, grid, marks, legend, title) so identical inputs
produce byte-identical SVG.  Mark elements carry ``class="mark"``:
one path per line series, one rect per bar datum, one wedge path per pie
slice, one marker-shaped element per scatter point.
"""

from __future__ import annotations

import math
from functools import lru_cache
from xml.sax.saxutils import escape, quoteattr

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .spec import PALETTE, ChartSpec, check_consistent
from .tables import MetaTable, fmt_num

SIZE = 490
LEFT, RIGHT, TOP, BOTTOM = 70.0, 460.0, 60.0, 430.0
PIE_CX, PIE_CY, PIE_R = 245.0, 250.0, 150.0
N_TICKS = 5
DASHES = {"solid": None, "dashed": (6.0, 4.0), "dotted": (2.0, 3.0)}
AXIS_COLOR, GRID_COLOR, TEXT_COLOR = "#333333", "#dddddd", "#222222"


class RenderError(ValueError):
    pass


def _el(tag: str, cls: str, **attrs) -> dict:
    return {"tag": tag, "class": cls, **attrs}


def slice_colors(spec: ChartSpec, n: int) -> list[str]:
    start = PALETTE.index(spec.palette[0]) if spec.palette[0] in PALETTE else 0
    return [PALETTE[(start + i) % len(PALETTE)] for i in range(n)]


def _marker(shape: str, x: float, y: float, size: float, fill: str, cls: str) -> dict:
    if shape == "circle":
        return _el("circle", cls, cx=x, cy=y, r=size, fill=fill)
    if shape == "square":
        return _el("rect", cls, x=x - size, y=y - size, w=2 * size, h=2 * size, fill=fill)
    pts = [(x, y - size * 1.2), (x + size * 1.1, y + size * 0.8), (x - size * 1.1, y + size * 0.8)]
    return _el("polygon", cls, points=pts, fill=fill)


def build_scene(spec: ChartSpec, table: MetaTable) -> list[dict]:
    check_consistent(spec, table)
    ct = spec.chart_type
    label_size = int(spec.fonts["label_size"])
    scene: list[dict] = []
    _, scale = table.value_range
    pw, ph = RIGHT - LEFT, BOTTOM - TOP
    r, s = table.n_rows, table.n_series
    horizontal = ct == "bar" and spec.type_specific["orientation"] == "h"

    if ct == "pie":
        vals = table.column(0)
        total = sum(vals)
        if not (total > 0) or any(v < 0 for v in vals) or not all(math.isfinite(v) for v in vals):
            raise RenderError("pie data must be non-negative with a positive sum")
    else:
        if scale <= 0:
            raise RenderError("value axis needs a positive range")
        # axes
        scene.append(_el("line", "axis", x1=LEFT, y1=TOP, x2=LEFT, y2=BOTTOM, stroke=AXIS_COLOR, width=1.5))
        scene.append(_el("line", "axis", x1=LEFT, y1=BOTTOM, x2=RIGHT, y2=BOTTOM, stroke=AXIS_COLOR, width=1.5))
        for k in range(N_TICKS):
            v = scale * k / (N_TICKS - 1)
            if horizontal:
                x = LEFT + pw * k / (N_TICKS - 1)
                scene.append(_el("text", "tick", x=x, y=BOTTOM + 16, text=fmt_num(v), size=label_size, anchor="middle"))
            else:
                y = BOTTOM - ph * k / (N_TICKS - 1)
                scene.append(_el("text", "tick", x=LEFT - 6, y=y + 4, text=fmt_num(v), size=label_size, anchor="end"))
        for i, lab in enumerate(table.row_labels):
            c = (i + 0.5) / r
            if horizontal:
                scene.append(_el("text", "tick", x=LEFT - 6, y=TOP + ph * c + 4, text=lab, size=label_size, anchor="end"))
            else:
                scene.append(_el("text", "tick", x=LEFT + pw * c, y=BOTTOM + 16, text=lab, size=label_size, anchor="middle"))
        if spec.grid:
            for k in range(1, N_TICKS):
                if horizontal:
                    x = LEFT + pw * k / (N_TICKS - 1)
                    scene.append(_el("line", "grid", x1=x, y1=TOP, x2=x, y2=BOTTOM, stroke=GRID_COLOR, width=1.0))
                else:
                    y = BOTTOM - ph * k / (N_TICKS - 1)
                    scene.append(_el("line", "grid", x1=LEFT, y1=y, x2=RIGHT, y2=y, stroke=GRID_COLOR, width=1.0))

    # marks
    if ct == "bar":
        frac = float(spec.type_specific["width"])
        for i in range(r):
            for j in range(s):
                v = table.values[i][j] / scale
                if horizontal:
                    gh = ph / r
                    bh = frac * gh / s
                    y = TOP + i * gh + (gh - frac * gh) / 2 + j * bh
                    scene.append(_el("rect", "mark", x=LEFT, y=y, w=v * pw, h=bh, fill=spec.palette[j]))
                else:
                    gw = pw / r
                    bw = frac * gw / s
                    x = LEFT + i * gw + (gw - frac * gw) / 2 + j * bw
                    scene.append(_el("rect", "mark", x=x, y=BOTTOM - v * ph, w=bw, h=v * ph, fill=spec.palette[j]))
    elif ct == "line":
        dash = DASHES[spec.type_specific["style"]]
        for j in range(s):
            pts = [(LEFT + pw * (i + 0.5) / r, BOTTOM - ph * table.values[i][j] / scale) for i in range(r)]
            scene.append(_el("path", "mark", points=pts, stroke=spec.palette[j], width=2.0, dash=dash))
        for j in range(s):
            for i in range(r):
                x = LEFT + pw * (i + 0.5) / r
                y = BOTTOM - ph * table.values[i][j] / scale
                scene.append(_marker(spec.type_specific["marker"], x, y, 3.0, spec.palette[j], "marker"))
    elif ct == "scatter":
        for j in range(s):
            for i in range(r):
                x = LEFT + pw * (i + 0.5) / r
                y = BOTTOM - ph * table.values[i][j] / scale
                scene.append(_marker(spec.type_specific["marker"], x, y, 4.0, spec.palette[j], "mark"))
    else:
        vals = table.column(0)
        total = sum(vals)
        colors = slice_colors(spec, r)
        a0 = -math.pi / 2
        for i, v in enumerate(vals):
            a1 = a0 + 2 * math.pi * v / total
            mid = (a0 + a1) / 2
            off = float(spec.type_specific["explode"][i]) * PIE_R
            cx, cy = PIE_CX + off * math.cos(mid), PIE_CY + off * math.sin(mid)
            scene.append(_el("wedge", "mark", cx=cx, cy=cy, r=PIE_R, a0=a0, a1=a1, fill=colors[i]))
            a0 = a1

    # legend
    if spec.legend["show"]:
        if ct == "pie":
            entries = list(zip(table.row_labels, slice_colors(spec, r)))
        else:
            entries = list(zip(table.col_labels, spec.palette))
        row_h = max(12.0, label_size + 4.0)
        box_w, box_h = 110.0, row_h * len(entries) + 8
        loc = spec.legend["location"]
        x0 = LEFT + 8 if loc.endswith("left") else RIGHT - 8 - box_w
        y0 = TOP + 8 if loc.startswith("upper") else BOTTOM - 8 - box_h
        scene.append(_el("rect", "legend", x=x0, y=y0, w=box_w, h=box_h, fill="#ffffff", stroke="#999999"))
        for k, (name, color) in enumerate(entries):
            y = y0 + 4 + k * row_h
            scene.append(_el("rect", "legend", x=x0 + 6, y=y + 1, w=10.0, h=10.0, fill=color))
            scene.append(_el("text", "legend", x=x0 + 22, y=y + 10, text=name, size=label_size, anchor="start"))

    # title
    pos = spec.title["position"]
    tx, anchor = {"left": (LEFT, "start"), "center": (SIZE / 2, "middle"), "right": (RIGHT, "end")}[pos]
    scene.append(_el("text", "title", x=tx, y=34.0, text=spec.title["text"], size=int(spec.fonts["title_size"]), anchor=anchor))
    return scene


# --------------------------------------------------------------------------
# SVG


def _f(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _wedge_path(e: dict) -> str:
    cx, cy, rr, a0, a1 = e["cx"], e["cy"], e["r"], e["a0"], e["a1"]
    x0, y0 = cx + rr * math.cos(a0), cy + rr * math.sin(a0)
    x1, y1 = cx + rr * math.cos(a1), cy + rr * math.sin(a1)
    large = 1 if a1 - a0 > math.pi else 0
    return f"M{_f(cx)},{_f(cy)} L{_f(x0)},{_f(y0)} A{_f(rr)},{_f(rr)} 0 {large} 1 {_f(x1)},{_f(y1)} Z"


def _svg_element(e: dict) -> str:
    cls = f'class="{e["class"]}"'
    tag = e["tag"]
    if tag == "line":
        return (
            f'<line {cls} x1="{_f(e["x1"])}" y1="{_f(e["y1"])}" x2="{_f(e["x2"])}" y2="{_f(e["y2"])}" '
            f'stroke="{e["stroke"]}" stroke-width="{_f(e["width"])}"/>'
        )
    if tag == "rect":
        stroke = f' stroke="{e["stroke"]}"' if "stroke" in e else ""
        return (
            f'<rect {cls} x="{_f(e["x"])}" y="{_f(e["y"])}" width="{_f(e["w"])}" height="{_f(e["h"])}" '
            f'fill="{e["fill"]}"{stroke}/>'
        )
    if tag == "circle":
        return f'<circle {cls} cx="{_f(e["cx"])}" cy="{_f(e["cy"])}" r="{_f(e["r"])}" fill="{e["fill"]}"/>'
    if tag == "polygon":
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in e["points"])
        return f'<polygon {cls} points="{pts}" fill="{e["fill"]}"/>'
    if tag == "path":
        d = "M" + " L".join(f"{_f(x)},{_f(y)}" for x, y in e["points"])
        dash = f' stroke-dasharray="{_f(e["dash"][0])},{_f(e["dash"][1])}"' if e["dash"] else ""
        return f'<path {cls} d="{d}" fill="none" stroke="{e["stroke"]}" stroke-width="{_f(e["width"])}"{dash}/>'
    if tag == "wedge":
        return f'<path {cls} d="{_wedge_path(e)}" fill="{e["fill"]}" stroke="#ffffff"/>'
    if tag == "text":
        return (
            f'<text {cls} x="{_f(e["x"])}" y="{_f(e["y"])}" font-size="{e["size"]}" text-anchor="{e["anchor"]}" '
            f'fill="{TEXT_COLOR}">{escape(e["text"])}</text>'
        )
    raise ValueError(f"unknown scene element {tag}")


def scene_to_svg(scene: list[dict], title: str = "") -> str:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" '
        f"aria-label={quoteattr(title)}>",
        f'<rect class="background" x="0" y="0" width="{SIZE}" height="{SIZE}" fill="#ffffff"/>',
    ]
    lines += [_svg_element(e) for e in scene]
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# raster


@lru_cache(maxsize=None)
def _font(size: int):
    return ImageFont.load_default(size=size)


def _dashed(draw: ImageDraw.ImageDraw, pts, color, width: int, dash):
    on, off = dash
    for (xa, ya), (xb, yb) in zip(pts, pts[1:]):
        seg = math.hypot(xb - xa, yb - ya)
        t = 0.0
        while t < seg:
            t1 = min(seg, t + on)
            draw.line(
                [(xa + (xb - xa) * t / seg, ya + (yb - ya) * t / seg), (xa + (xb - xa) * t1 / seg, ya + (yb - ya) * t1 / seg)],
                fill=color,
                width=width,
            )
            t = t1 + off


def scene_to_raster(scene: list[dict]) -> np.ndarray:
    img = Image.new("RGB", (SIZE, SIZE), "#ffffff")
    draw = ImageDraw.Draw(img)
    for e in scene:
        tag = e["tag"]
        if tag == "line":
            draw.line([(e["x1"], e["y1"]), (e["x2"], e["y2"])], fill=e["stroke"], width=max(1, round(e["width"])))
        elif tag == "rect":
            if e["w"] > 0 and e["h"] > 0:
                draw.rectangle(
                    [e["x"], e["y"], e["x"] + e["w"], e["y"] + e["h"]], fill=e["fill"], outline=e.get("stroke")
                )
        elif tag == "circle":
            cx, cy, rr = e["cx"], e["cy"], e["r"]
            draw.ellipse([cx - rr, cy - rr, cx + rr, cy + rr], fill=e["fill"])
        elif tag == "polygon":
            draw.polygon(e["points"], fill=e["fill"])
        elif tag == "path":
            width = max(1, round(e["width"]))
            if e["dash"]:
                _dashed(draw, e["points"], e["stroke"], width, e["dash"])
            else:
                draw.line(e["points"], fill=e["stroke"], width=width)
        elif tag == "wedge":
            cx, cy, rr = e["cx"], e["cy"], e["r"]
            draw.pieslice(
                [cx - rr, cy - rr, cx + rr, cy + rr], math.degrees(e["a0"]), math.degrees(e["a1"]), fill=e["fill"], outline="#ffffff"
            )
        elif tag == "text":
            anchor = {"start": "ls", "middle": "ms", "end": "rs"}[e["anchor"]]
            draw.text((e["x"], e["y"]), e["text"], fill=TEXT_COLOR, font=_font(int(e["size"])), anchor=anchor)
    return np.asarray(img, dtype=np.uint8).copy()


def render(spec: ChartSpec, table: MetaTable) -> tuple[str, np.ndarray]:
    """Return ``(svg_text, raster)`` with raster shape (490, 490, 3), uint8."""
    scene = build_scene(spec, table)
    return scene_to_svg(scene, spec.title["text"]), scene_to_raster(scene)


def render_svg(spec: ChartSpec, table: MetaTable) -> str:
    return scene_to_svg(build_scene(spec, table), spec.title["text"])
