"""Dependency-free SVG line plots (accuracy vs number of heads and similar).

Output is a pure function of the inputs: fixed canvas, fixed number formatting,
no timestamps or random ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 150, 40, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


@dataclass
class Series:
    label: str
    xs: Sequence[float]
    ys: Sequence[float]
    yerr: Optional[Sequence[float]] = None


def _f(v: float) -> str:
    return f"{v:.2f}"


def _nice_range(lo: float, hi: float):
    if hi - lo < 1e-9:
        pad = max(abs(hi), 1.0) * 0.05
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.08
    return lo - pad, hi + pad


def line_plot_svg(series: Sequence[Series], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    if not series:
        raise ValueError("line plot needs at least one series")
    for s in series:
        if len(s.xs) != len(s.ys) or not s.xs:
            raise ValueError(f"series {s.label!r}: xs and ys must be non-empty and of equal length")
        if s.yerr is not None and len(s.yerr) != len(s.ys):
            raise ValueError(f"series {s.label!r}: yerr length differs from ys")

    xs = [float(x) for s in series for x in s.xs]
    lows, highs = [], []
    for s in series:
        err = s.yerr or [0.0] * len(s.ys)
        lows += [float(y) - float(e) for y, e in zip(s.ys, err)]
        highs += [float(y) + float(e) for y, e in zip(s.ys, err)]
    x0, x1 = _nice_range(min(xs), max(xs))
    y0, y1 = _nice_range(min(lows), max(highs))
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (float(x) - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN_T + (1.0 - (float(y) - y0) / (y1 - y0)) * ph

    out: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        # axes
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" y2="{MARGIN_T + ph}" stroke="black"/>',
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{MARGIN_T + ph}" stroke="black"/>',
    ]
    for k in range(6):
        yv = y0 + (y1 - y0) * k / 5
        out.append(f'<line x1="{MARGIN_L - 4}" y1="{_f(py(yv))}" x2="{MARGIN_L}" y2="{_f(py(yv))}" stroke="black"/>')
        out.append(
            f'<text x="{MARGIN_L - 8}" y="{_f(py(yv) + 4)}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{yv:.3f}</text>'
        )
    for xv in sorted(set(xs)):
        out.append(f'<line x1="{_f(px(xv))}" y1="{MARGIN_T + ph}" x2="{_f(px(xv))}" y2="{MARGIN_T + ph + 4}" stroke="black"/>')
        out.append(
            f'<text x="{_f(px(xv))}" y="{MARGIN_T + ph + 18}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{xv:g}</text>'
        )
    out.append(
        f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 14}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="18" y="{MARGIN_T + ph / 2:.2f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {MARGIN_T + ph / 2:.2f})">{escape(ylabel)}</text>'
    )

    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in zip(s.xs, s.ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        for k, (x, y) in enumerate(zip(s.xs, s.ys)):
            out.append(f'<circle cx="{_f(px(x))}" cy="{_f(py(y))}" r="3" fill="{color}"/>')
            if s.yerr is not None and s.yerr[k] > 0:
                e = float(s.yerr[k])
                out.append(
                    f'<line x1="{_f(px(x))}" y1="{_f(py(y - e))}" x2="{_f(px(x))}" y2="{_f(py(y + e))}" '
                    f'stroke="{color}"/>'
                )
        ly = MARGIN_T + 10 + 20 * i
        lx = WIDTH - MARGIN_R + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{lx + 26}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(s.label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(series: Sequence[Series], path: Union[str, Path], **labels) -> Path:
    """Render ``series`` as one SVG line plot at ``path``."""
    path = Path(path)
    svg = line_plot_svg(series, **labels)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(svg)
    tmp.replace(path)
    return path
