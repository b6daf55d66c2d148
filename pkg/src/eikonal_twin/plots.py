"""Minimal SVG line and box plots for reports."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

_W, _H = 640, 400
_M = {"l": 70, "r": 20, "t": 40, "b": 50}
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf"]


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _frame(title, xlabel, ylabel, xr, yr, log_y=False):
    x0, x1 = _M["l"], _W - _M["r"]
    y0, y1 = _H - _M["b"], _M["t"]
    fx = _scale(*xr, x0, x1)
    fy = _scale(*yr, y0, y1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2}" y="{_H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="15" y="{(y0 + y1) / 2}" text-anchor="middle" '
           f'transform="rotate(-90 15 {(y0 + y1) / 2})">{escape(ylabel)}</text>']
    for v in np.linspace(*yr, 5):
        y = float(fy(v))
        lab = f"{10 ** v:.3g}" if log_y else f"{v:.3g}"
        out.append(f'<text x="{x0 - 5}" y="{y + 4:.1f}" text-anchor="end">{lab}</text>')
        out.append(f'<line x1="{x0}" y1="{y:.1f}" x2="{x1}" y2="{y:.1f}" stroke="#ddd"/>')
    return out, fx, fy


def line_plot(path, series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              log_y: bool = False) -> None:
    """``series`` maps a label to (x, y) arrays."""
    prepared = {}
    for k, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if log_y:
            y = np.log10(np.maximum(y, 1e-300))
        ok = np.isfinite(x) & np.isfinite(y)
        prepared[k] = (x[ok], y[ok])
    xs = np.concatenate([v[0] for v in prepared.values()] or [np.zeros(1)])
    ys = np.concatenate([v[1] for v in prepared.values()] or [np.zeros(1)])
    if len(xs) == 0:
        xs = ys = np.zeros(1)
    out, fx, fy = _frame(title, xlabel, ylabel, (xs.min(), xs.max()), (ys.min(), ys.max()), log_y)
    for i, (k, (x, y)) in enumerate(prepared.items()):
        c = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(fx(x), fy(y)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.2"/>')
        out.append(f'<text x="{_W - _M["r"] - 5}" y="{_M["t"] + 14 * (i + 1)}" '
                   f'text-anchor="end" fill="{c}">{escape(str(k))}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def box_plot(path, groups: dict, title: str = "", ylabel: str = "") -> None:
    """One box (quartiles, whiskers at min/max) per group of values."""
    vals = [np.asarray(v, dtype=float) for v in groups.values()]
    allv = np.concatenate([v for v in vals if len(v)] or [np.zeros(1)])
    lo, hi = float(allv.min()), float(allv.max())
    pad = 0.05 * (hi - lo if hi > lo else 1.0)
    out, fx, fy = _frame(title, "", ylabel, (0, len(vals) + 1), (lo - pad, hi + pad))
    for i, (k, v) in enumerate(zip(groups, vals), start=1):
        x = float(fx(i))
        if len(v):
            q0, q1, q2, q3, q4 = np.percentile(v, [0, 25, 50, 75, 100])
            Y = [float(fy(q)) for q in (q0, q1, q2, q3, q4)]
            out.append(f'<line x1="{x:.1f}" y1="{Y[0]:.1f}" x2="{x:.1f}" y2="{Y[4]:.1f}" stroke="black"/>')
            out.append(f'<rect x="{x - 15:.1f}" y="{Y[3]:.1f}" width="30" height="{Y[1] - Y[3]:.1f}" '
                       f'fill="#9ecae1" stroke="black"/>')
            out.append(f'<line x1="{x - 15:.1f}" y1="{Y[2]:.1f}" x2="{x + 15:.1f}" y2="{Y[2]:.1f}" '
                       f'stroke="black" stroke-width="2"/>')
        out.append(f'<text x="{x:.1f}" y="{_H - _M["b"] + 15}" text-anchor="middle">{escape(str(k))}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
