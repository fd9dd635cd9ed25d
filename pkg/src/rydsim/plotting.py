"""Minimal SVG line/scatter plots for result CSVs.

Hand-rolled XML with explicit escaping: the output must survive strict
parsers, carry no external references, and stay byte-deterministic.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 24, 34, 54

META_COLUMNS = {"time_us", "cycle", "label", "trace_error",
                "trajectory", "error"}


def _nice_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + step * 1e-9:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def _fmt_tick(x: float) -> str:
    return f"{x:.6g}"


class _Svg:
    def __init__(self, title: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<title>{escape(title)}</title>',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        ]

    def line(self, x1, y1, x2, y2, color="#333", width=1.0):
        self.parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="{width}"/>'
        )

    def polyline(self, pts, color, width=1.8):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"/>'
        )

    def circle(self, x, y, r, color, opacity=1.0):
        self.parts.append(
            f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.1f}" fill="{color}" '
            f'fill-opacity="{opacity:.2f}"/>'
        )

    def text(self, x, y, s, size=13, anchor="middle", color="#222", rotate=None):
        extra = ""
        if rotate is not None:
            extra = f' transform="rotate({rotate} {x:.2f} {y:.2f})"'
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" '
            f'font-family="sans-serif" text-anchor="{anchor}" '
            f'fill="{color}"{extra}>{escape(s)}</text>'
        )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _Axes:
    """Data-to-pixel mapping plus the frame/tick/label furniture."""

    def __init__(self, svg: _Svg, xlim, ylim, xlabel, ylabel):
        self.svg = svg
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0
        left, right = MARGIN_L, WIDTH - MARGIN_R
        top, bot = MARGIN_T, HEIGHT - MARGIN_B
        self._px = lambda x: left + (x - self.x0) / (self.x1 - self.x0) * (right - left)
        self._py = lambda y: bot - (y - self.y0) / (self.y1 - self.y0) * (bot - top)
        svg.line(left, bot, right, bot)
        svg.line(left, bot, left, top)
        for t in _nice_ticks(self.x0, self.x1):
            px = self._px(t)
            svg.line(px, bot, px, bot + 5)
            svg.text(px, bot + 20, _fmt_tick(t), size=12)
        for t in _nice_ticks(self.y0, self.y1):
            py = self._py(t)
            svg.line(left - 5, py, left, py)
            svg.text(left - 9, py + 4, _fmt_tick(t), size=12, anchor="end")
        svg.text((left + right) / 2, HEIGHT - 14, xlabel, size=14)
        svg.text(18, (top + bot) / 2, ylabel, size=14, rotate=-90)

    def pt(self, x: float, y: float):
        return self._px(x), self._py(y)


def _floats(values: list[str]) -> list[float]:
    return [float(v) if v else math.nan for v in values]


def plot_series(columns: dict[str, list[str]], out_path: str,
                title: str = "population") -> None:
    """Population-vs-cycle (or time) line plot, one curve per data column."""
    if "cycle" in columns:
        xname, xs = "cycle", _floats(columns["cycle"])
    elif "time_us" in columns:
        xname, xs = "time_us", _floats(columns["time_us"])
    else:
        raise ValueError("no cycle or time_us column to plot against")
    curves = [(n, _floats(v)) for n, v in columns.items()
              if n not in META_COLUMNS and n != xname]
    if not curves or not xs:
        raise ValueError("no data series to plot")

    ymax = max((max(ys) for _, ys in curves), default=1.0)
    svg = _Svg(title)
    ax = _Axes(svg, (min(xs), max(xs)), (0.0, max(1.0, ymax)),
               xname, "population")
    for i, (name, ys) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        ax_pts = [ax.pt(x, y) for x, y in zip(xs, ys) if not math.isnan(y)]
        svg.polyline(ax_pts, color)
        lx, ly = WIDTH - MARGIN_R - 150, MARGIN_T + 8 + 18 * i
        svg.line(lx, ly - 4, lx + 24, ly - 4, color, 2.0)
        svg.text(lx + 30, ly, name, size=12, anchor="start")
    svg.text((MARGIN_L + WIDTH - MARGIN_R) / 2, 20, title, size=15)
    with open(out_path, "w") as fh:
        fh.write(svg.render())


def plot_mc(columns: dict[str, list[str]], out_path: str,
            title: str = "thermal survey") -> None:
    """Trajectory finals as dots over temperature, with the mean line."""
    if "temperature_uK" not in columns or "final_population" not in columns:
        raise ValueError("expected temperature_uK and final_population columns")
    temps = _floats(columns["temperature_uK"])
    finals = _floats(columns["final_population"])
    pts = [(t, f) for t, f in zip(temps, finals) if not math.isnan(f)]
    if not pts:
        raise ValueError("no data series to plot")

    by_temp: dict[float, list[float]] = {}
    for t, f in pts:
        by_temp.setdefault(t, []).append(f)
    means = sorted((t, sum(v) / len(v)) for t, v in by_temp.items())

    lo = min(f for _, f in pts)
    svg = _Svg(title)
    ax = _Axes(svg, (min(temps), max(temps)),
               (min(0.9, lo), 1.0), "temperature_uK", "final population")
    for t, f in pts:
        x, y = ax.pt(t, f)
        svg.circle(x, y, 2.4, PALETTE[6], opacity=0.45)
    svg.polyline([ax.pt(t, m) for t, m in means], PALETTE[0], 2.2)
    svg.text((MARGIN_L + WIDTH - MARGIN_R) / 2, 20, title, size=15)
    with open(out_path, "w") as fh:
        fh.write(svg.render())
