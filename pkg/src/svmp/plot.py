"""Minimal SVG line charts with a log-scale x axis."""

from __future__ import annotations

import math
from typing import Sequence, TextIO
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 90, 190, 30, 60
PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]

Curve = tuple[str, Sequence[tuple[float, float]]]


def _num(v: float) -> str:
    return f"{v:.2f}"


def _finite_prefix(points):
    out = []
    for x, y in points:
        if not math.isfinite(y):
            return out, True
        out.append((x, y))
    return out, False


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(v)
        v += step
    return ticks


def emit_svg_plot(curves: Sequence[Curve], sink: TextIO, title: str = "",
                  x_label: str = "ratings accessed", y_label: str = "ELBO") -> None:
    """Write a standalone SVG with one polyline per curve.

    Each curve is cut at its first non-finite y value; a cut curve gets a
    cross marker at its last finite point.
    """
    if not curves:
        raise ValueError("need at least one curve")
    prepared = []
    for label, points in curves:
        points = [(float(x), float(y)) for x, y in points]
        if not points:
            raise ValueError(f"curve {label!r} is empty")
        if any(not (x > 0 and math.isfinite(x)) for x, _ in points):
            raise ValueError(f"curve {label!r} has a non-positive x value")
        kept, cut = _finite_prefix(points)
        prepared.append((label, kept, cut))

    finite = [p for _, kept, _ in prepared for p in kept]
    if finite:
        lx = [math.log10(x) for x, _ in finite]
        ys = [y for _, y in finite]
        x_lo, x_hi = math.floor(min(lx)), math.ceil(max(lx))
        y_lo, y_hi = min(ys), max(ys)
    else:
        x_lo, x_hi, y_lo, y_hi = 0, 1, 0.0, 1.0
    if x_hi == x_lo:
        x_hi += 1
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(x):
        return LEFT + (math.log10(x) - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return TOP + (y_hi - y) / (y_hi - y_lo) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{TOP - 10}" text-anchor="middle">{escape(title)}</text>')
    for d in range(x_lo, x_hi + 1):
        x = _num(sx(10.0 ** d))
        out.append(f'<line x1="{x}" y1="{TOP + ph}" x2="{x}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{TOP + ph + 20}" text-anchor="middle">10<tspan dy="-5" '
                   f'font-size="9">{d}</tspan></text>')
    for v in _nice_ticks(y_lo, y_hi):
        y = _num(sy(v))
        out.append(f'<line x1="{LEFT - 5}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">{v:.6g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle">'
               f'{escape(x_label)} (log scale)</text>')
    out.append(f'<text x="20" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 20 {TOP + ph / 2:.2f})">{escape(y_label)}</text>')

    for idx, (label, kept, cut) in enumerate(prepared):
        color = PALETTE[idx % len(PALETTE)]
        if kept:
            pts = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in kept)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        if cut and kept:
            cx, cy = sx(kept[-1][0]), sy(kept[-1][1])
            out.append(f'<path class="diverged" d="M{_num(cx - 5)},{_num(cy - 5)} L{_num(cx + 5)},{_num(cy + 5)} '
                       f'M{_num(cx - 5)},{_num(cy + 5)} L{_num(cx + 5)},{_num(cy - 5)}" '
                       f'stroke="{color}" stroke-width="2"/>')
        ly = TOP + 10 + 18 * idx
        lx = LEFT + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        suffix = " (diverged)" if cut else ""
        out.append(f'<text x="{lx + 26}" y="{ly}" dominant-baseline="middle">{escape(label)}{suffix}</text>')
    out.append("</svg>")
    sink.write("\n".join(out) + "\n")
