"""Minimal deterministic SVG charts: DSC boxplots, optimum histograms, Bland-Altman.

Output depends only on the data; no timestamps or generated ids are embedded,
so re-running on the same inputs yields identical files.
"""

from __future__ import annotations

import math
from html import escape
from typing import Mapping, Sequence

import numpy as np

from segsweep.stats import BlandAltmanResult

WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60
MEDIAN_COLOR = "#d62728"
SERIES_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd")


def _n(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if math.isfinite(x) else "0"


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + step * 1e-9:
        ticks.append(round(t, 10))
        t += step
    return ticks


class Canvas:
    def __init__(self, title: str, xlabel: str, ylabel: str, ylim: tuple[float, float]):
        self.parts: list[str] = []
        self.y0, self.y1 = ylim
        self.plot_w = WIDTH - LEFT - RIGHT
        self.plot_h = HEIGHT - TOP - BOTTOM
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def y(self, v: float) -> float:
        return TOP + self.plot_h * (1 - (v - self.y0) / (self.y1 - self.y0))

    def x_slot(self, k: int, n: int) -> float:
        return LEFT + self.plot_w * (k + 0.5) / n

    def add(self, s: str) -> None:
        self.parts.append(s)

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None) -> None:
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" '
                 f'stroke="{stroke}" stroke-width="{_n(width)}"{d}/>')

    def rect(self, x, y, w, h, fill="none", stroke="#000", opacity=None) -> None:
        o = f' fill-opacity="{_n(opacity)}"' if opacity is not None else ""
        self.add(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" '
                 f'fill="{fill}" stroke="{stroke}"{o}/>')

    def circle(self, x, y, r=2.5, fill="#000") -> None:
        self.add(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="{_n(r)}" fill="{fill}"/>')

    def text(self, x, y, s, anchor="middle", size=12, rotate=None) -> None:
        t = f' transform="rotate({rotate} {_n(x)} {_n(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_n(x)}" y="{_n(y)}" font-size="{size}" '
                 f'text-anchor="{anchor}"{t}>{escape(str(s))}</text>')

    def axes(self, yticks: Sequence[float]) -> None:
        self.line(LEFT, TOP, LEFT, TOP + self.plot_h)
        self.line(LEFT, TOP + self.plot_h, LEFT + self.plot_w, TOP + self.plot_h)
        for t in yticks:
            if self.y0 <= t <= self.y1:
                yy = self.y(t)
                self.line(LEFT - 4, yy, LEFT, yy)
                self.text(LEFT - 7, yy + 4, f"{t:g}", anchor="end", size=11)
        self.text(WIDTH / 2, 22, self.title, size=14)
        self.text(WIDTH / 2, HEIGHT - 15, self.xlabel)
        self.text(18, TOP + self.plot_h / 2, self.ylabel, rotate=-90)

    def svg(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
                f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">')
        body = "\n".join(self.parts)
        return f'{head}\n<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>\n{body}\n</svg>\n'


def box_stats(values: Sequence[float]) -> dict | None:
    """Median, quartiles, 1.5 x IQR whisker ends, and outliers."""
    v = np.asarray(values, dtype=float)
    v = np.sort(v[~np.isnan(v)])
    if v.size == 0:
        return None
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "q1": q1, "median": med, "q3": q3,
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in v if x < lo_fence or x > hi_fence],
    }


def boxplot_svg(
    labels: Sequence[str], groups: Sequence[Sequence[float]], title: str,
    ylabel: str = "DSC", xlabel: str = "Probability threshold", ylim=(0.0, 1.0),
) -> str:
    c = Canvas(title, xlabel, ylabel, ylim)
    c.axes(nice_ticks(*ylim))
    n = len(labels)
    half = 0.3 * c.plot_w / max(n, 1)
    for k, (lab, g) in enumerate(zip(labels, groups)):
        x = c.x_slot(k, n)
        c.text(x, TOP + c.plot_h + 18, lab, size=11)
        b = box_stats(g)
        if b is None:
            continue
        c.line(x, c.y(b["whisker_low"]), x, c.y(b["q1"]), dash="4,3")
        c.line(x, c.y(b["q3"]), x, c.y(b["whisker_high"]), dash="4,3")
        for w in (b["whisker_low"], b["whisker_high"]):
            c.line(x - half / 2, c.y(w), x + half / 2, c.y(w))
        c.rect(x - half, c.y(b["q3"]), 2 * half, max(c.y(b["q1"]) - c.y(b["q3"]), 0.0),
               stroke="#1f77b4")
        c.line(x - half, c.y(b["median"]), x + half, c.y(b["median"]),
               stroke=MEDIAN_COLOR, width=2)
        for o in b["outliers"]:
            c.circle(x, c.y(o), r=2.5, fill="#555")
    return c.svg()


def histogram_svg(
    labels: Sequence[str], series: Mapping[str, Sequence[int]], title: str,
    xlabel: str = "Optimal threshold", ylabel: str = "Number of scans",
) -> str:
    top = max((max(v) for v in series.values() if len(v)), default=1)
    top = max(top, 1)
    c = Canvas(title, xlabel, ylabel, (0.0, top * 1.1))
    c.axes(nice_ticks(0, top * 1.1))
    n = len(labels)
    n_series = max(len(series), 1)
    slot = c.plot_w / max(n, 1)
    bar = 0.8 * slot / n_series
    for k, lab in enumerate(labels):
        c.text(c.x_slot(k, n), TOP + c.plot_h + 18, lab, size=11)
    for s, (name, counts) in enumerate(series.items()):
        color = SERIES_COLORS[s % len(SERIES_COLORS)]
        for k, v in enumerate(counts):
            x = LEFT + slot * k + 0.1 * slot + s * bar
            c.rect(x, c.y(v), bar, c.y(0) - c.y(v), fill=color, stroke=color)
        lx = LEFT + 10 + 150 * s
        c.rect(lx, TOP + 4, 12, 12, fill=color, stroke=color)
        c.text(lx + 16, TOP + 14, name, anchor="start", size=11)
    return c.svg()


def bland_altman_svg(result: BlandAltmanResult, title: str) -> str:
    d = list(result.differences)
    a = list(result.averages)
    ys = d + [result.loa_low, result.loa_high, result.band_halfwidth, -result.band_halfwidth]
    lo, hi = min(ys), max(ys)
    pad = 0.08 * (hi - lo or 1.0)
    c = Canvas(title, "Mean of reference and predicted volume (mm^3)",
               "Relative volume difference (%)", (lo - pad, hi + pad))
    x0, x1 = (min(a), max(a)) if a else (0.0, 1.0)
    if x1 <= x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    xpad = 0.05 * (x1 - x0)
    x0, x1 = x0 - xpad, x1 + xpad

    def x(v: float) -> float:
        return LEFT + c.plot_w * (v - x0) / (x1 - x0)

    band_top = c.y(result.band_halfwidth)
    c.rect(LEFT, band_top, c.plot_w, c.y(-result.band_halfwidth) - band_top,
           fill=MEDIAN_COLOR, stroke="none", opacity=0.25)
    c.axes(nice_ticks(lo - pad, hi + pad))
    for t in nice_ticks(x0, x1):
        if x0 <= t <= x1:
            c.line(x(t), TOP + c.plot_h, x(t), TOP + c.plot_h + 4)
            c.text(x(t), TOP + c.plot_h + 18, f"{t:g}", size=11)
    c.line(LEFT, c.y(0), LEFT + c.plot_w, c.y(0), stroke="#888")
    c.line(LEFT, c.y(result.mean_diff), LEFT + c.plot_w, c.y(result.mean_diff),
           stroke="#1f77b4", width=1.5)
    for v in (result.loa_low, result.loa_high):
        c.line(LEFT, c.y(v), LEFT + c.plot_w, c.y(v), stroke="#1f77b4", dash="6,4")
    c.text(LEFT + c.plot_w - 4, c.y(result.mean_diff) - 4,
           f"mean {result.mean_diff:.2f}%", anchor="end", size=11)
    c.text(LEFT + c.plot_w - 4, c.y(result.loa_high) - 4,
           f"+1.96 SD {result.loa_high:.2f}%", anchor="end", size=11)
    c.text(LEFT + c.plot_w - 4, c.y(result.loa_low) + 14,
           f"-1.96 SD {result.loa_low:.2f}%", anchor="end", size=11)
    for xv, yv in sorted(zip(a, d)):
        c.circle(x(xv), c.y(yv), r=3, fill="#333")
    c.text(LEFT + 6, TOP + 14,
           f"{result.within_band_count}/{result.n} within ±{result.band_halfwidth:g}%",
           anchor="start", size=11)
    return c.svg()
