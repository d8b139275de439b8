"""Minimal SVG line charts: one panel per metric, polylines per series,
optional shaded mean +/- std bands and a log-scaled y axis."""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
from xml.sax.saxutils import escape

__all__ = ["Series", "Panel", "render"]

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")

PANEL_W, PANEL_H = 420, 260
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 30, 36


@dataclass
class Series:
    label: str
    x: Sequence[float]
    y: Sequence[float]
    std: Optional[Sequence[float]] = None


@dataclass
class Panel:
    title: str
    series: List[Series] = field(default_factory=list)
    log_y: bool = False


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick(v: float) -> str:
    return f"{v:.3g}"


def _usable(x, y, log_y):
    pts = []
    for a, b in zip(x, y):
        if a is None or b is None or not math.isfinite(a) or not math.isfinite(b):
            pts.append(None)
        elif log_y and b <= 0:
            pts.append(None)
        else:
            pts.append((float(a), math.log10(b) if log_y else float(b)))
    return pts


def _segments(pts):
    seg = []
    for p in pts:
        if p is None:
            if seg:
                yield seg
            seg = []
        else:
            seg.append(p)
    if seg:
        yield seg


def _panel(panel: Panel, ox: float, oy: float) -> List[str]:
    out = [f'<g transform="translate({_fmt(ox)},{_fmt(oy)})">']
    out.append(f'<rect x="0" y="0" width="{PANEL_W}" height="{PANEL_H}" fill="white" stroke="#cccccc"/>')
    out.append(f'<text x="{PANEL_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(panel.title)}</text>')

    lines, bands = [], []
    for s in panel.series:
        pts = _usable(s.x, s.y, panel.log_y)
        lines.append(pts)
        if s.std is not None:
            lo = [m - d for m, d in zip(s.y, s.std)]
            hi = [m + d for m, d in zip(s.y, s.std)]
            bands.append((_usable(s.x, lo, panel.log_y), _usable(s.x, hi, panel.log_y)))
        else:
            bands.append(None)
    allpts = [p for pts in lines for p in pts if p is not None]
    for b in bands:
        if b:
            allpts += [p for side in b for p in side if p is not None]
    if not allpts:
        out.append(f'<text x="{PANEL_W / 2:.1f}" y="{PANEL_H / 2:.1f}" text-anchor="middle" font-size="11">no data</text>')
        out.append("</g>")
        return out

    x0, x1 = min(p[0] for p in allpts), max(p[0] for p in allpts)
    y0, y1 = min(p[1] for p in allpts), max(p[1] for p in allpts)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = PANEL_W - MARGIN_L - MARGIN_R
    ph = PANEL_H - MARGIN_T - MARGIN_B

    def sx(v):
        return MARGIN_L + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN_T + (1.0 - (v - y0) / (y1 - y0)) * ph

    out.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" y2="{MARGIN_T + ph}" stroke="black"/>'
    )
    out.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{MARGIN_T + ph}" stroke="black"/>')
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        label = _tick(10**yv if panel.log_y else yv)
        out.append(
            f'<text x="{MARGIN_L - 4}" y="{_fmt(sy(yv) + 4)}" text-anchor="end" font-size="10">{label}</text>'
        )
        xv = x0 + frac * (x1 - x0)
        out.append(
            f'<text x="{_fmt(sx(xv))}" y="{MARGIN_T + ph + 14}" text-anchor="middle" font-size="10">{_tick(xv)}</text>'
        )
    out.append(
        f'<text x="{MARGIN_L + pw / 2:.1f}" y="{PANEL_H - 6}" text-anchor="middle" font-size="10">step</text>'
    )
    if panel.log_y:
        out.append(f'<text x="{MARGIN_L + 4}" y="{MARGIN_T - 4}" font-size="9">log scale</text>')

    for i, (pts, band) in enumerate(zip(lines, bands)):
        color = PALETTE[i % len(PALETTE)]
        if band:
            lo, hi = band
            poly = [p for p in hi if p is not None] + [p for p in reversed(lo) if p is not None]
            if poly:
                coords = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in poly)
                out.append(f'<polygon points="{coords}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        for seg in _segments(pts):
            coords = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in seg)
            out.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5">'
                f"<title>{escape(panel.series[i].label)}</title></polyline>"
            )
        ly = MARGIN_T + 12 + 12 * i
        out.append(f'<text x="{MARGIN_L + pw - 4}" y="{ly}" text-anchor="end" font-size="10" '
                   f'fill="{color}">{escape(panel.series[i].label)}</text>')
    out.append("</g>")
    return out


def render(panels: Sequence[Panel], columns: int = 2, title: str = "") -> str:
    """Return an SVG document with the panels laid out on a grid."""
    rows = max(1, math.ceil(len(panels) / columns))
    top = 24 if title else 0
    width = columns * PANEL_W + (columns + 1) * 10
    height = rows * PANEL_H + (rows + 1) * 10 + top
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
    ]
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="15">{escape(title)}</text>')
    for k, panel in enumerate(panels):
        r, c = divmod(k, columns)
        out += _panel(panel, 10 + c * (PANEL_W + 10), top + 10 + r * (PANEL_H + 10))
    out.append("</svg>")
    return "\n".join(out) + "\n"
