"""Minimal SVG emitter: log-log scatter with fitted lines, and bar charts."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 640, 420, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
            f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="black"/>']


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda t: a + (np.asarray(t) - lo) / span * (b - a)


def loglog_plot(path, series: dict, fits: dict | None = None, title: str = "", xlabel: str = "eps",
                ylabel: str = "") -> None:
    """``series``: name -> (x, y); ``fits``: name -> (slope, intercept) of log10 y = s log10 x + c."""
    fits = fits or {}
    xs = np.concatenate([np.log10(np.asarray(x, float)) for x, _ in series.values()])
    ys = np.concatenate([np.log10(np.maximum(np.asarray(y, float), 1e-300)) for _, y in series.values()])
    x0, x1 = xs.min() - 0.1, xs.max() + 0.1
    y0, y1 = ys.min() - 0.2, ys.max() + 0.2
    sx, sy = _scale(x0, x1, PAD, W - PAD), _scale(y0, y1, H - PAD, PAD)
    out = _frame(title, f"log10 {xlabel}", f"log10 {ylabel}")
    for k in range(int(np.ceil(x0)), int(np.floor(x1)) + 1):
        out.append(f'<text x="{sx(k):.1f}" y="{H - PAD + 16}" text-anchor="middle" font-size="10">{k}</text>')
    for k in np.linspace(y0, y1, 5):
        out.append(f'<text x="{PAD - 6}" y="{sy(k):.1f}" text-anchor="end" font-size="10">{k:.1f}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        c = COLORS[i % len(COLORS)]
        lx, ly = np.log10(np.asarray(x, float)), np.log10(np.maximum(np.asarray(y, float), 1e-300))
        for a, b in zip(lx, ly):
            out.append(f'<circle cx="{sx(a):.1f}" cy="{sy(b):.1f}" r="4" fill="{c}"/>')
        label = name
        if name in fits:
            s, c0 = fits[name]
            xa, xb = lx.min(), lx.max()
            out.append(f'<line x1="{sx(xa):.1f}" y1="{sy(s * xa + c0):.1f}" x2="{sx(xb):.1f}" '
                       f'y2="{sy(s * xb + c0):.1f}" stroke="{c}" stroke-dasharray="5,3"/>')
            label = f"{name} (slope {s:.3f})"
        out.append(f'<text x="{PAD + 8}" y="{PAD + 16 + 15 * i}" font-size="11" fill="{c}">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(out) + "\n")


def bar_chart(path, labels, values, title: str = "", log: bool = False) -> None:
    vals = np.asarray(values, dtype=float)
    shown = np.log10(np.maximum(vals, 1e-300)) if log else vals
    finite = shown[np.isfinite(shown)]
    lo = min(0.0, finite.min()) if finite.size else 0.0
    hi = max(finite.max(), lo + 1e-12) if finite.size else 1.0
    n = max(len(vals), 1)
    bw = (W - 2 * PAD) / n
    sy = _scale(lo, hi, H - PAD, PAD)
    out = _frame(title, "", "log10 value" if log else "value")
    for i, (lab, v) in enumerate(zip(labels, shown)):
        if not np.isfinite(v):
            continue
        top, base = sy(max(v, lo)), sy(lo)
        y = min(top, base)
        out.append(f'<rect x="{PAD + i * bw + 1:.1f}" y="{y:.1f}" width="{max(bw - 2, 1):.1f}" '
                   f'height="{abs(base - top):.1f}" fill="{COLORS[0]}"><title>{escape(str(lab))}: '
                   f'{vals[i]:.4g}</title></rect>')
    out.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(out) + "\n")
