"""Minimal SVG line plots: fixed viewBox, polylines, no timestamps."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, n)


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.2e}"
    return f"{v:.3g}"


def line_plot(series: dict, title: str, xlabel: str, ylabel: str, logy: bool = False) -> str:
    """Render ``{label: (x, y)}`` as an SVG document string.

    Non-finite points are dropped; with ``logy`` non-positive ones too.
    """
    clean = {}
    for label, (x, y) in series.items():
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        keep = np.isfinite(x) & np.isfinite(y)
        if logy:
            keep &= y > 0
        if keep.any():
            clean[label] = (x[keep], np.log10(y[keep]) if logy else y[keep])
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
           f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if clean:
        xs = np.concatenate([v[0] for v in clean.values()])
        ys = np.concatenate([v[1] for v in clean.values()])
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        if x1 == x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

        def px(x):
            return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

        def py(y):
            return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

        for v in _ticks(x0, x1):
            out.append(f'<text x="{px(v):.2f}" y="{HEIGHT - MARGIN["bottom"] + 18}" '
                       f'text-anchor="middle">{_fmt(v)}</text>')
        for v in _ticks(y0, y1):
            shown = 10 ** v if logy else v
            out.append(f'<line x1="{MARGIN["left"]}" x2="{WIDTH - MARGIN["right"]}" '
                       f'y1="{py(v):.2f}" y2="{py(v):.2f}" stroke="#eee"/>')
            out.append(f'<text x="{MARGIN["left"] - 6}" y="{py(v) + 4:.2f}" '
                       f'text-anchor="end">{_fmt(shown)}</text>')
        for i, (label, (x, y)) in enumerate(clean.items()):
            color = COLORS[i % len(COLORS)]
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
            ly = MARGIN["top"] + 14 + 16 * i
            lx = WIDTH - MARGIN["right"] - 150
            out.append(f'<line x1="{lx}" x2="{lx + 20}" y1="{ly - 4}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{lx + 26}" y="{ly}">{escape(label)}</text>')
    else:
        out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT / 2}" text-anchor="middle">no data</text>')
    out.append(f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="black"/>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2}" y="{HEIGHT - 12}" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    ylab = f"{ylabel} (log scale)" if logy else ylabel
    cy = MARGIN["top"] + ph / 2
    out.append(f'<text x="16" y="{cy}" text-anchor="middle" '
               f'transform="rotate(-90 16 {cy})">{escape(ylab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_plot(path, series: dict, title: str, xlabel: str, ylabel: str, logy: bool = False):
    Path(path).write_text(line_plot(series, title, xlabel, ylabel, logy))

