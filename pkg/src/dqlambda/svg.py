"""Small self-contained SVG writers: line charts with error bands and bar panels."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")
POSITIVE = "#3b6fb6"
NEGATIVE = "#2e9e4f"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def line_chart(series: list[dict], title: str = "", x_label: str = "k", y_label: str = "",
               log_y: bool = False, width: int = 720, height: int = 440) -> str:
    """``series`` items: {"label", "x", "y", optional "err"}; bands show y +/- err."""
    left, right, top, bottom = 70, 190, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([np.asarray(s["x"], float) for s in series])
    lows, highs = [], []
    for s in series:
        y = np.asarray(s["y"], float)
        e = np.asarray(s.get("err", np.zeros_like(y)), float)
        lows.append(y - e)
        highs.append(y + e)
    ylo, yhi = float(np.nanmin(np.concatenate(lows))), float(np.nanmax(np.concatenate(highs)))
    if log_y:
        pos = np.concatenate(lows)
        pos = pos[pos > 0]
        ylo = float(pos.min()) if pos.size else 1e-12
        ylo, yhi = math.log10(ylo), math.log10(max(yhi, ylo * 10 + 1e-300))
    if yhi <= ylo:
        yhi = ylo + 1.0
    xlo, xhi = float(xs.min()), float(xs.max())
    if xhi <= xlo:
        xhi = xlo + 1.0

    def px(x):
        return left + (x - xlo) / (xhi - xlo) * pw

    def py(y):
        y = np.asarray(y, float)
        if log_y:
            y = np.log10(np.maximum(y, 10 ** ylo))
        return top + (1 - (y - ylo) / (yhi - ylo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in _ticks(xlo, xhi):
        out.append(f'<text x="{_fmt(px(t))}" y="{top + ph + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(ylo, yhi):
        label = f"{10 ** t:.3g}" if log_y else f"{t:.3g}"
        y = top + (1 - (t - ylo) / (yhi - ylo)) * ph
        out.append(f'<line x1="{left - 4}" x2="{left}" y1="{_fmt(y)}" y2="{_fmt(y)}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{_fmt(y + 4)}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2})">{escape(y_label)}</text>')
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        x = np.asarray(s["x"], float)
        y = np.asarray(s["y"], float)
        if "err" in s:
            e = np.asarray(s["err"], float)
            upper = [f"{_fmt(px(a))},{_fmt(b)}" for a, b in zip(x, py(y + e))]
            lower = [f"{_fmt(px(a))},{_fmt(b)}" for a, b in zip(x[::-1], py((y - e)[::-1]))]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.18" '
                       'stroke="none"/>')
        pts = " ".join(f"{_fmt(px(a))},{_fmt(b)}" for a, b in zip(x, py(y)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 12}" x2="{left + pw + 32}" y1="{ly}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}">{escape(str(s["label"]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_panels(atoms: np.ndarray, panels: list[tuple[str, np.ndarray]], title: str = "",
               panel_width: int = 220, height: int = 260) -> str:
    """One bar chart per panel; negative masses drawn in a separate colour, hatched outline."""
    n = len(panels)
    width = panel_width * n + 20
    top, bottom = 50, 40
    ph = height - top - bottom
    lo = min(0.0, min(float(np.min(p)) for _, p in panels))
    hi = max(float(np.max(p)) for _, p in panels)
    hi = hi if hi > lo else lo + 1.0

    def py(v):
        return top + (1 - (v - lo) / (hi - lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    m = len(atoms)
    for j, (label, masses) in enumerate(panels):
        x0 = 10 + j * panel_width + 15
        pw = panel_width - 30
        bw = pw / m
        zero = py(0.0)
        out.append(f'<text x="{x0 + pw / 2}" y="{top - 10}" text-anchor="middle">{escape(label)}</text>')
        out.append(f'<line x1="{x0}" x2="{x0 + pw}" y1="{_fmt(zero)}" y2="{_fmt(zero)}" stroke="#444"/>')
        for i, v in enumerate(masses):
            y = py(max(v, 0.0))
            h = abs(py(v) - zero)
            if v < 0:
                out.append(f'<rect class="negative" x="{_fmt(x0 + i * bw + 1)}" y="{_fmt(zero)}" '
                           f'width="{_fmt(bw - 2)}" height="{_fmt(h)}" fill="{NEGATIVE}" '
                           'stroke="#114" stroke-dasharray="2,1"/>')
            else:
                out.append(f'<rect class="positive" x="{_fmt(x0 + i * bw + 1)}" y="{_fmt(y)}" '
                           f'width="{_fmt(bw - 2)}" height="{_fmt(h)}" fill="{POSITIVE}"/>')
        out.append(f'<text x="{x0}" y="{height - bottom + 16}">{atoms[0]:.3g}</text>')
        out.append(f'<text x="{x0 + pw}" y="{height - bottom + 16}" text-anchor="end">{atoms[-1]:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
