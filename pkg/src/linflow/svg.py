"""Minimal deterministic SVG line charts and heatmaps."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 420
L, R, T, B = 70, 150, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _header(title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]


def _finite_range(arrays, log: bool):
    vals = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64)) for a in arrays])
    vals = vals[np.isfinite(vals)]
    if log:
        vals = vals[vals > 0]
    if vals.size == 0:
        return (0.0, 1.0)
    lo, hi = float(vals.min()), float(vals.max())
    if log:
        lo, hi = math.log10(lo), math.log10(hi)
    if hi == lo:
        hi, lo = hi + 0.5, lo - 0.5
    return lo, hi


def line_chart(x, series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
               logx: bool = False, logy: bool = False) -> str:
    x = np.asarray(x, dtype=np.float64)
    x0, x1 = _finite_range([x], logx)
    y0, y1 = _finite_range(list(series.values()), logy)
    pw, ph = W - L - R, H - T - B

    def px(v):
        v = math.log10(v) if logx else v
        return L + (v - x0) / (x1 - x0) * pw

    def py(v):
        v = math.log10(v) if logy else v
        return T + ph - (v - y0) / (y1 - y0) * ph

    out = _header(title)
    out.append(f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        xs = _fmt(10 ** xv if logx else xv)
        ys = _fmt(10 ** yv if logy else yv)
        out.append(f'<text x="{L + frac * pw:.2f}" y="{T + ph + 15}" text-anchor="middle">{xs}</text>')
        out.append(f'<text x="{L - 5}" y="{T + ph - frac * ph + 4:.2f}" text-anchor="end">{ys}</text>')
    out.append(f'<text x="{L + pw / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{T + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {T + ph / 2})">{escape(ylabel)}</text>')
    for k, (name, ys) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, np.asarray(ys, dtype=np.float64))
               if math.isfinite(b) and (not logy or b > 0) and (not logx or a > 0)]
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        ly = T + 12 + 14 * k
        out.append(f'<line x1="{W - R + 10}" y1="{ly - 4}" x2="{W - R + 28}" y2="{ly - 4}" stroke="{color}"/>')
        out.append(f'<text x="{W - R + 32}" y="{ly}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _color(v: float, lo: float, hi: float) -> str:
    if not math.isfinite(v):
        return "#cccccc"
    f = 0.0 if hi == lo else min(1.0, max(0.0, (v - lo) / (hi - lo)))
    # blue (lazy, low) to red (rich, high)
    r, g, b = int(255 * f), int(80 * (1 - abs(2 * f - 1))), int(255 * (1 - f))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(rows, cols, cells, title: str = "", row_label: str = "", col_label: str = "") -> str:
    cells = np.asarray(cells, dtype=np.float64)
    lo, hi = _finite_range([cells], False)
    pw, ph = W - L - R, H - T - B
    cw, ch = pw / len(cols), ph / len(rows)
    out = _header(title)
    for i, rv in enumerate(rows):
        y = T + ph - (i + 1) * ch
        out.append(f'<text x="{L - 5}" y="{y + ch / 2 + 4:.2f}" text-anchor="end">{_fmt(rv)}</text>')
        for j, _ in enumerate(cols):
            out.append(f'<rect x="{L + j * cw:.2f}" y="{y:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                       f'fill="{_color(cells[i, j], lo, hi)}"/>')
    for j, cv in enumerate(cols):
        out.append(f'<text x="{L + (j + 0.5) * cw:.2f}" y="{T + ph + 15}" text-anchor="middle">{_fmt(cv)}</text>')
    out.append(f'<text x="{L + pw / 2}" y="{H - 10}" text-anchor="middle">{escape(col_label)}</text>')
    out.append(f'<text x="15" y="{T + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {T + ph / 2})">{escape(row_label)}</text>')
    out.append(f'<text x="{W - R + 10}" y="{T + 12}">max {_fmt(hi)}</text>')
    out.append(f'<text x="{W - R + 10}" y="{T + 26}">min {_fmt(lo)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
