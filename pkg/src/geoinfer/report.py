"""Deterministic SVG charts and CSV tables.

Every emitter is a pure function of its input; coordinates are written with
four decimals and no timestamps, so identical specs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import vs_from_n
from .predictor import DecisionGrid, DiscretePosterior, posterior_quantile

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT = 0.1 * WIDTH, 0.9 * WIDTH
TOP, BOTTOM = 0.1 * HEIGHT, 0.9 * HEIGHT

# Diverging blue-white-orange ramp.
RAMP_STOPS = ((0.0, "#2166ac"), (0.5, "#f7f7f7"), (1.0, "#e66101"))
SERIES_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
INDEX_COLOR = "#1f77b4"
OTHER_COLOR = "#ff7f0e"
CLASS_COLORS = {"Clay": "#1f77b4", "Sand": "#ff7f0e"}

KINDS = ("heatmap", "line", "violin", "bar", "scatter")


class SpecError(ValueError):
    pass


@dataclass
class ChartSpec:
    kind: str
    title: str
    x_label: str = ""
    y_label: str = ""
    data: dict = field(default_factory=dict)
    overlays: list[dict] = field(default_factory=list)  # polylines in data coordinates
    markers: list[dict] = field(default_factory=list)  # extra points in data coordinates


def _f(v: float) -> str:
    s = f"{v:.4f}"
    return "0.0000" if s == "-0.0000" else s


def _hex(c: str) -> tuple[int, int, int]:
    return int(c[1:3], 16), int(c[3:5], 16), int(c[5:7], 16)


def ramp_color(t: float) -> str:
    """Color for ``t`` in [0, 1] on the fixed diverging ramp."""
    t = min(max(float(t), 0.0), 1.0) if math.isfinite(t) else 0.5
    for (t0, c0), (t1, c1) in zip(RAMP_STOPS, RAMP_STOPS[1:]):
        if t <= t1:
            u = (t - t0) / (t1 - t0)
            a, b = _hex(c0), _hex(c1)
            return "#" + "".join(f"{round(x + u * (y - x)):02x}" for x, y in zip(a, b))
    return RAMP_STOPS[-1][1]


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, title: str):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
            f'<rect x="{_f(0)}" y="{_f(0)}" width="{_f(WIDTH)}" height="{_f(HEIGHT)}" fill="#ffffff"/>',
            f'<text x="{_f(WIDTH / 2)}" y="{_f(TOP / 2)}" text-anchor="middle" font-size="16">{escape(title)}</text>',
        ]

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, size=11, anchor="middle", extra="") -> None:
        self.add(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" font-size="{size}"{extra}>{escape(str(s))}</text>')

    def line(self, x0, y0, x1, y1, stroke="#000000", width=1.0, extra="") -> None:
        self.add(
            f'<line x1="{_f(x0)}" y1="{_f(y0)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="{stroke}" stroke-width="{_f(width)}"{extra}/>'
        )

    def polyline(self, pts, stroke, width=1.5, extra="") -> None:
        if len(pts) < 2:
            return
        coords = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.add(f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{_f(width)}"{extra}/>')

    def circle(self, x, y, r, fill, stroke="none", cls="", extra="") -> None:
        c = f' class="{cls}"' if cls else ""
        self.add(f'<circle{c} cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}" stroke="{stroke}"{extra}/>')

    def rect(self, x, y, w, h, fill, cls="", extra="") -> None:
        c = f' class="{cls}"' if cls else ""
        self.add(f'<rect{c} x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}"{extra}/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _Axes:
    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x0 + 0.5
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y0 + 0.5

    def px(self, x: float) -> float:
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (RIGHT - LEFT)

    def py(self, y: float) -> float:
        return BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (BOTTOM - TOP)

    def clip(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def draw(self, cv: _Canvas, x_label: str, y_label: str, x_ticks=True, y_ticks=True) -> None:
        cv.line(LEFT, BOTTOM, RIGHT, BOTTOM)
        cv.line(LEFT, TOP, LEFT, BOTTOM)
        if x_ticks:
            for t in _nice_ticks(self.x0, self.x1):
                cv.line(self.px(t), BOTTOM, self.px(t), BOTTOM + 5)
                cv.text(self.px(t), BOTTOM + 18, _tick_label(t))
        if y_ticks:
            for t in _nice_ticks(self.y0, self.y1):
                cv.line(LEFT - 5, self.py(t), LEFT, self.py(t))
                cv.text(LEFT - 8, self.py(t) + 4, _tick_label(t), anchor="end")
        cv.text((LEFT + RIGHT) / 2, HEIGHT - 15, x_label, size=13)
        cv.text(18, (TOP + BOTTOM) / 2, y_label, size=13, extra=f' transform="rotate(-90 18 {_f((TOP + BOTTOM) / 2)})"')


def _padded(lo: float, hi: float, frac: float = 0.05) -> tuple[float, float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    span = hi - lo
    pad = frac * span if span > 0 else max(abs(lo) * 0.1, 0.5)
    return lo - pad, hi + pad


def _draw_overlays(cv: _Canvas, ax: _Axes, spec: ChartSpec) -> None:
    for i, ov in enumerate(spec.overlays):
        pts = [(ax.px(x), ax.py(y)) for x, y in zip(ov["x"], ov["y"]) if ax.clip(x, y)]
        dash = ' stroke-dasharray="6,4"' if ov.get("dashed", True) else ""
        color = ov.get("color", "#333333")
        cv.polyline(pts, color, 1.5, f' class="overlay"{dash}')
        if pts and ov.get("name"):
            x, y = pts[-1]
            cv.text(x - 4, y - 6, ov["name"], size=10, anchor="end")
    for m in spec.markers:
        if not ax.clip(m["x"], m["y"]):
            continue
        cv.circle(ax.px(m["x"]), ax.py(m["y"]), m.get("r", 4), m.get("fill", "#000000"), m.get("stroke", "#000000"), "marker")


# ---------------------------------------------------------------------------
# Marching squares
# ---------------------------------------------------------------------------


def contour_segments(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, level: float):
    """Line segments of the ``level`` iso-line over a grid sampled at (xs, ys)."""
    v = np.asarray(values, dtype=float) - level
    segs = []
    ny, nx = v.shape

    def interp(p, q, vp, vq):
        t = vp / (vp - vq) if vp != vq else 0.5
        return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

    for i in range(ny - 1):
        for j in range(nx - 1):
            corners = [(xs[j], ys[i]), (xs[j + 1], ys[i]), (xs[j + 1], ys[i + 1]), (xs[j], ys[i + 1])]
            vals = [v[i, j], v[i, j + 1], v[i + 1, j + 1], v[i + 1, j]]
            pts = []
            for a in range(4):
                b = (a + 1) % 4
                if (vals[a] >= 0) != (vals[b] >= 0):
                    pts.append(interp(corners[a], corners[b], vals[a], vals[b]))
            if len(pts) == 2:
                segs.append((pts[0], pts[1]))
            elif len(pts) == 4:
                centre = sum(vals) / 4.0
                if (centre >= 0) == (vals[0] >= 0):
                    segs.extend([(pts[0], pts[1]), (pts[2], pts[3])])
                else:
                    segs.extend([(pts[0], pts[3]), (pts[1], pts[2])])
    return segs


# ---------------------------------------------------------------------------
# Renderers per kind
# ---------------------------------------------------------------------------


def _validate(spec: ChartSpec) -> None:
    if spec.kind not in KINDS:
        raise SpecError(f"unknown chart kind {spec.kind!r}")
    d = spec.data
    try:
        if spec.kind == "heatmap":
            vals = np.asarray(d["values"], dtype=float)
            if vals.ndim != 2 or vals.size == 0:
                raise SpecError("heatmap values must be a nonempty 2-d array")
            for key, axis in (("x_labels", 1), ("y_labels", 0)):
                if key in d and len(d[key]) != vals.shape[axis]:
                    raise SpecError(f"{key} length does not match heatmap shape {vals.shape}")
        elif spec.kind == "line":
            n = len(d["x"])
            for s in d["series"]:
                if len(s["y"]) != n:
                    raise SpecError(f"series {s.get('name')!r} length differs from x")
        elif spec.kind == "scatter":
            for s in d["series"]:
                if len(s["x"]) != len(s["y"]):
                    raise SpecError(f"scatter series {s.get('name')!r} has unequal x/y")
        elif spec.kind == "bar":
            if len(d["labels"]) != len(d["values"]) or len(d.get("groups", d["labels"])) != len(d["labels"]):
                raise SpecError("bar labels, values and groups must align")
        elif spec.kind == "violin":
            for v in d["violins"]:
                if len(v["centers"]) != len(v["density"]):
                    raise SpecError("violin centers and density lengths differ")
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed {spec.kind} payload: {exc}") from None


def _render_heatmap(spec: ChartSpec, cv: _Canvas) -> None:
    d = spec.data
    vals = np.asarray(d["values"], dtype=float)
    ny, nx = vals.shape
    vmin, vmax = d.get("vmin", float(np.nanmin(vals))), d.get("vmax", float(np.nanmax(vals)))
    span = vmax - vmin if vmax > vmin else 1.0
    categorical = "x_range" not in d
    if categorical:
        ax = _Axes((0, nx), (0, ny))
    else:
        ax = _Axes(tuple(d["x_range"]), tuple(d["y_range"]))
    cw = (RIGHT - LEFT) / nx
    ch = (BOTTOM - TOP) / ny
    # row 0 is drawn at the top for categorical maps, at the bottom for numeric ones
    for i in range(ny):
        y = TOP + i * ch if categorical else BOTTOM - (i + 1) * ch
        for j in range(nx):
            cv.rect(LEFT + j * cw, y, cw, ch, ramp_color((vals[i, j] - vmin) / span), cls="cell")
    if categorical:
        ax.draw(cv, spec.x_label, spec.y_label, x_ticks=False, y_ticks=False)
        for j, lab in enumerate(d.get("x_labels", [str(j + 1) for j in range(nx)])):
            cv.text(LEFT + (j + 0.5) * cw, BOTTOM + 16, lab, size=10)
        for i, lab in enumerate(d.get("y_labels", [str(i + 1) for i in range(ny)])):
            cv.text(LEFT - 6, TOP + (i + 0.5) * ch + 4, lab, size=10, anchor="end")
    else:
        ax.draw(cv, spec.x_label, spec.y_label)
        xs = np.asarray(d.get("x", ax.x0 + (np.arange(nx) + 0.5) * (ax.x1 - ax.x0) / nx))
        ys = np.asarray(d.get("y", ax.y0 + (np.arange(ny) + 0.5) * (ax.y1 - ax.y0) / ny))
        bold = set(d.get("bold_levels", []))
        for level in d.get("contours", []):
            width, color = (2.5, "#000000") if level in bold else (1.0, "#888888")
            for (xa, ya), (xb, yb) in contour_segments(vals, xs, ys, level):
                cv.line(ax.px(xa), ax.py(ya), ax.px(xb), ax.py(yb), color, width, f' class="contour" data-level="{_f(level)}"')
        _draw_overlays(cv, ax, spec)
    # colour bar
    for k in range(50):
        t = k / 49
        cv.rect(RIGHT + 20, BOTTOM - (k + 1) * (BOTTOM - TOP) / 50, 14, (BOTTOM - TOP) / 50 + 0.5, ramp_color(t))
    cv.text(RIGHT + 40, BOTTOM, _tick_label(vmin), size=10, anchor="start")
    cv.text(RIGHT + 40, TOP + 8, _tick_label(vmax), size=10, anchor="start")


def _render_line(spec: ChartSpec, cv: _Canvas) -> None:
    d = spec.data
    xs = [float(x) for x in d["x"]]
    ys = [float(y) for s in d["series"] for y in s["y"] if y is not None and math.isfinite(y)]
    ys += [float(r) for r in d.get("reference_y", [])]
    ax = _Axes(_padded(min(xs), max(xs), 0.0) if xs else (0, 1), _padded(min(ys), max(ys)) if ys else (0, 1))
    ax.draw(cv, spec.x_label, spec.y_label)
    for r in d.get("reference_y", []):
        cv.line(LEFT, ax.py(r), RIGHT, ax.py(r), "#999999", 1.0, ' stroke-dasharray="4,4" class="reference"')
    for k, s in enumerate(d["series"]):
        color = s.get("color", SERIES_COLORS[k % len(SERIES_COLORS)])
        pts = [(ax.px(x), ax.py(y)) for x, y in zip(xs, s["y"]) if y is not None and math.isfinite(y)]
        cv.polyline(pts, color, 2.0, ' class="series"')
        for x, y in pts:
            cv.circle(x, y, 3, color)
        cv.rect(RIGHT - 110, TOP + 8 + 16 * k, 10, 10, color)
        cv.text(RIGHT - 95, TOP + 17 + 16 * k, s.get("name", ""), size=11, anchor="start")
    _draw_overlays(cv, ax, spec)


def _render_scatter(spec: ChartSpec, cv: _Canvas) -> None:
    d = spec.data
    xs = [float(x) for s in d["series"] for x in s["x"]] + [float(x) for o in spec.overlays for x in o["x"]]
    ys = [float(y) for s in d["series"] for y in s["y"]]
    xr = tuple(d["x_range"]) if "x_range" in d else (_padded(min(xs), max(xs)) if xs else (0, 1))
    yr = tuple(d["y_range"]) if "y_range" in d else (_padded(min(ys), max(ys)) if ys else (0, 1))
    ax = _Axes(xr, yr)
    ax.draw(cv, spec.x_label, spec.y_label)
    if d.get("zero_line"):
        cv.line(LEFT, ax.py(0.0), RIGHT, ax.py(0.0), "#999999", 1.0, ' stroke-dasharray="4,4"')
    _draw_overlays(cv, ax, spec)
    for k, s in enumerate(d["series"]):
        color = s.get("color", SERIES_COLORS[k % len(SERIES_COLORS)])
        shape = s.get("marker", "circle")
        for x, y in zip(s["x"], s["y"]):
            px, py = ax.px(float(x)), ax.py(float(y))
            if shape == "star":
                pts = []
                for m in range(10):
                    r = 7 if m % 2 == 0 else 3
                    a = -math.pi / 2 + m * math.pi / 5
                    pts.append(f"{_f(px + r * math.cos(a))},{_f(py + r * math.sin(a))}")
                cv.add(f'<polygon class="point" points="{" ".join(pts)}" fill="{color}" stroke="#000000" stroke-width="0.5"/>')
            else:
                cv.circle(px, py, 4.5, color, "#000000", "point", ' stroke-width="0.5"')
        cv.rect(RIGHT - 130, TOP + 8 + 16 * k, 10, 10, color)
        cv.text(RIGHT - 115, TOP + 17 + 16 * k, s.get("name", ""), size=11, anchor="start")


def _render_bar(spec: ChartSpec, cv: _Canvas) -> None:
    d = spec.data
    labels, values = list(d["labels"]), [float(v) for v in d["values"]]
    groups = list(d.get("groups", ["" for _ in labels]))
    colors = d.get("group_colors", {})
    top = max(values + [0.0]) or 1.0
    ax = _Axes((0, len(labels)), (min(0.0, min(values + [0.0])), top * 1.1))
    ax.draw(cv, spec.x_label, spec.y_label, x_ticks=False)
    bw = (RIGHT - LEFT) / max(len(labels), 1)
    for k, (lab, v, g) in enumerate(zip(labels, values, groups)):
        y0, y1 = ax.py(0.0), ax.py(v)
        cv.rect(LEFT + k * bw + 0.15 * bw, min(y0, y1), 0.7 * bw, abs(y0 - y1), colors.get(g, SERIES_COLORS[0]), cls="bar")
        cv.text(LEFT + (k + 0.5) * bw, BOTTOM + 16, lab, size=10)
    for k, (g, c) in enumerate(colors.items()):
        cv.rect(RIGHT - 160, TOP + 8 + 16 * k, 10, 10, c)
        cv.text(RIGHT - 145, TOP + 17 + 16 * k, g, size=11, anchor="start")


def _render_violin(spec: ChartSpec, cv: _Canvas) -> None:
    violins = spec.data["violins"]
    lo = [float(v["centers"][0]) for v in violins if len(v["centers"])]
    hi = [float(v["centers"][-1]) for v in violins if len(v["centers"])]
    extra = [float(v[k]) for v in violins for k in ("truth", "observed", "median") if v.get(k) is not None]
    yr = tuple(spec.data["y_range"]) if "y_range" in spec.data else _padded(min(lo + extra), max(hi + extra), 0.02)
    ax = _Axes((0, max(len(violins), 1)), yr)
    ax.draw(cv, spec.x_label, spec.y_label, x_ticks=False)
    slot = (RIGHT - LEFT) / max(len(violins), 1)
    for k, v in enumerate(violins):
        cx = LEFT + (k + 0.5) * slot
        cv.text(cx, BOTTOM + 16, v.get("label", str(k + 1)), size=10)
        dens = np.asarray(v["density"], dtype=float)
        if dens.size:
            half = 0.4 * slot * dens / dens.max() if dens.max() > 0 else np.zeros_like(dens)
            ys = [ax.py(float(c)) for c in v["centers"]]
            left = [(cx - h, y) for h, y in zip(half, ys)]
            right = [(cx + h, y) for h, y in zip(half[::-1], ys[::-1])]
            pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in left + right)
            cv.add(f'<polygon class="violin" points="{pts}" fill="#9ecae1" stroke="#3182bd" stroke-width="0.8"/>')
        if v.get("median") is not None:
            y = ax.py(float(v["median"]))
            cv.line(cx - 0.3 * slot, y, cx + 0.3 * slot, y, "#000000", 2.5, ' class="median"')
        if v.get("truth") is not None:
            cv.circle(cx, ax.py(float(v["truth"])), 5, "#ffd700", "#000000", "truth")
        if v.get("observed") is not None:
            cv.circle(cx, ax.py(float(v["observed"])), 4, "#000000", "#000000", "observed")


_RENDERERS = {
    "heatmap": _render_heatmap,
    "line": _render_line,
    "violin": _render_violin,
    "bar": _render_bar,
    "scatter": _render_scatter,
}


def render_svg(spec: ChartSpec) -> str:
    _validate(spec)
    cv = _Canvas(spec.title)
    _RENDERERS[spec.kind](spec, cv)
    return cv.render()


# ---------------------------------------------------------------------------
# Chart builders
# ---------------------------------------------------------------------------


def _class_curves(n_lo: float, n_hi: float, count: int = 200) -> list[dict]:
    ns = np.linspace(max(n_lo, 1e-6), n_hi, count)
    return [
        {"name": f"Vs = {int(c)} N^(1/3)", "x": ns.tolist(), "y": [vs_from_n(float(n), soil) for n in ns], "dashed": True}
        for soil, c in (("Clay", 100), ("Sand", 80))
    ]


def soil_scatter_chart(train, test) -> ChartSpec:
    series = []
    for name, table, marker in (("train", train, "circle"), ("test", test, "star")):
        labels = table.labels()
        for soil in table.classes:
            rows = [i for i, lab in enumerate(labels) if lab == soil]
            series.append(
                {
                    "name": f"{soil} ({name})",
                    "x": table.column("N")[rows].tolist(),
                    "y": table.column("Vs")[rows].tolist(),
                    "marker": marker,
                    "color": CLASS_COLORS.get(soil, SERIES_COLORS[len(series) % 8]),
                }
            )
    n_all = np.concatenate([train.column("N"), test.column("N")])
    return ChartSpec(
        "scatter",
        "Soil samples in the N - Vs plane",
        "SPT N-value",
        "Vs (m/s)",
        {"series": series},
        overlays=_class_curves(float(n_all.min()), float(n_all.max())),
    )


def probability_heatmap(grid: DecisionGrid, train=None, levels=(0.1, 0.25, 0.5, 0.75, 0.9)) -> ChartSpec:
    x0 = grid.x_axis[0] - 0.5 * (grid.x_axis[1] - grid.x_axis[0])
    x1 = grid.x_axis[-1] + 0.5 * (grid.x_axis[1] - grid.x_axis[0])
    y0 = grid.y_axis[0] - 0.5 * (grid.y_axis[1] - grid.y_axis[0])
    y1 = grid.y_axis[-1] + 0.5 * (grid.y_axis[1] - grid.y_axis[0])
    markers = []
    if train is not None:
        for (n, vs), lab in zip(train.columns(["N", "Vs"]), train.labels()):
            markers.append({"x": float(n), "y": float(vs), "fill": CLASS_COLORS.get(lab, "#000000"), "stroke": "#000000"})
    return ChartSpec(
        "heatmap",
        f"Predicted P({grid.positive_class})",
        "SPT N-value",
        "Vs (m/s)",
        {
            "values": grid.probs.tolist(),
            "x": grid.x_axis.tolist(),
            "y": grid.y_axis.tolist(),
            "x_range": [float(x0), float(x1)],
            "y_range": [float(y0), float(y1)],
            "vmin": 0.0,
            "vmax": 1.0,
            "contours": list(levels),
            "bold_levels": [0.5],
        },
        overlays=_class_curves(float(x0), float(x1)),
        markers=markers,
    )


def similarity_heatmap(matrix, title="Cosine similarity of embeddings (train rows, test columns)") -> ChartSpec:
    """Training samples on rows and test samples on columns."""
    vals = np.asarray(matrix.values).T
    rows = list(matrix.col_labels) or [str(i + 1) for i in range(vals.shape[0])]
    cols = list(matrix.row_labels) or [str(j + 1) for j in range(vals.shape[1])]
    return ChartSpec(
        "heatmap",
        title,
        "test sample",
        "training sample",
        {"values": vals.tolist(), "x_labels": cols, "y_labels": rows, "vmin": 0.0, "vmax": 1.0},
    )


def violin_from_posterior(p: DiscretePosterior, truth: float | None = None, observed: float | None = None, label: str = "") -> ChartSpec:
    """Single-violin chart: density profile, median bar, truth and observed markers."""
    return ChartSpec("violin", label or "Posterior", "", "", {"violins": [violin_entry(p, truth, observed, label)]})


def violin_entry(p: DiscretePosterior | None, truth=None, observed=None, label: str = "") -> dict:
    if p is None:
        return {"label": label, "centers": [], "density": [], "median": None, "truth": truth, "observed": observed}
    return {
        "label": label,
        "centers": p.midpoints.tolist(),
        "density": p.density().tolist(),
        "median": posterior_quantile(p, 0.5),
        "truth": truth,
        "observed": observed,
    }


def violin_chart(entries: Sequence[dict], title: str, y_label: str = "") -> ChartSpec:
    return ChartSpec("violin", title, "test sample", y_label, {"violins": list(entries)})


def rmse_trend_chart(trend: dict[str, list[float] | None]) -> ChartSpec:
    series = [{"name": t, "y": v} for t, v in trend.items() if v is not None]
    n = max((len(s["y"]) for s in series), default=1)
    return ChartSpec(
        "line",
        "Normalised RMSE (RMSE / RMSE at iteration 1)",
        "iteration",
        "normalised RMSE",
        {"x": list(range(1, n + 1)), "series": series, "reference_y": [1.0]},
    )


def shap_bar_chart(summary: dict[str, dict[str, float]], target: str) -> ChartSpec:
    labels, values, groups = [], [], []
    for group, key in (("index property", "index"), ("other parameter", "other")):
        for name, v in summary[key].items():
            labels.append(name)
            values.append(v)
            groups.append(group)
    return ChartSpec(
        "bar",
        f"Mean |SHAP| for {target}",
        "feature",
        "mean |SHAP value|",
        {
            "labels": labels,
            "values": values,
            "groups": groups,
            "group_colors": {"index property": INDEX_COLOR, "other parameter": OTHER_COLOR},
        },
    )


def shap_scatter_chart(pairs: Sequence[tuple[float, float]], target: str, feature: str) -> ChartSpec:
    return ChartSpec(
        "scatter",
        f"SHAP of {feature} for {target}",
        feature,
        f"SHAP value ({feature})",
        {"series": [{"name": feature, "x": [p[0] for p in pairs], "y": [p[1] for p in pairs]}], "zero_line": True},
    )


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    return "" if v is None or (isinstance(v, float) and not math.isfinite(v)) else f"{v:.12g}"


def table_rmse(run) -> str:
    """CSV with columns target, rmse_iter1, rmse_iterK, ratio."""
    from .imputation import rmse_table

    rows = rmse_table(run)
    if rows is None:
        raise ValueError("run has no truth; RMSE table is undefined")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "rmse_iter1", "rmse_iterK", "ratio"])
    for r in rows:
        w.writerow([r["target"], _cell(r["rmse_iter1"]), _cell(r["rmse_iterK"]), _cell(r["ratio"])])
    return buf.getvalue()
