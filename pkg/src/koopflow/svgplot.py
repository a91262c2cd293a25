"""Hand-emitted SVG line plots and phase portraits (no plotting dependency).

Output is a pure function of the input data: fixed canvas, fixed palette,
fixed "%.2f" coordinate formatting, so identical inputs give identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 16, 34, 44
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _ticks(lo: float, hi: float, count: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10.0 ** np.floor(np.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = np.ceil(lo / step) * step
    vals = []
    v = start
    while v <= hi + 1e-12 * step:
        vals.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return vals


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _fmt_tick(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, xlo, xhi, ylo, yhi):
        if xhi <= xlo:
            xhi = xlo + 1.0
        if yhi <= ylo:
            pad = max(1e-12, abs(ylo)) * 0.5 + 0.5
            ylo, yhi = ylo - pad, ylo + pad
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi

    def x(self, v):
        span = self.xhi - self.xlo
        return MARGIN_L + (v - self.xlo) / span * (WIDTH - MARGIN_L - MARGIN_R)

    def y(self, v):
        span = self.yhi - self.ylo
        return HEIGHT - MARGIN_B - (v - self.ylo) / span * (HEIGHT - MARGIN_T - MARGIN_B)


def _render(path, series, title, xlabel, ylabel):
    """series: list of (name, x array, y array)."""
    finite = [
        (np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)) for _, xs, ys in series
    ]
    all_x = np.concatenate([xs for xs, _ in finite]) if finite else np.array([0.0, 1.0])
    all_y = np.concatenate([ys for _, ys in finite]) if finite else np.array([0.0, 1.0])
    cv = _Canvas(float(all_x.min()), float(all_x.max()), float(all_y.min()), float(all_y.max()))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="20" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # Axes frame.
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    out.append(
        f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
        f'fill="none" stroke="#444" stroke-width="1"/>'
    )
    for v in _ticks(cv.xlo, cv.xhi):
        px = cv.x(v)
        out.append(f'<line x1="{_fmt(px)}" y1="{y0}" x2="{_fmt(px)}" y2="{y0 + 5}" stroke="#444"/>')
        out.append(
            f'<text x="{_fmt(px)}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{_fmt_tick(v)}</text>'
        )
    for v in _ticks(cv.ylo, cv.yhi):
        py = cv.y(v)
        out.append(f'<line x1="{x0 - 5}" y1="{_fmt(py)}" x2="{x0}" y2="{_fmt(py)}" stroke="#444"/>')
        out.append(
            f'<text x="{x0 - 8}" y="{_fmt(py + 4)}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{_fmt_tick(v)}</text>'
        )
    out.append(
        f'<text x="{(x0 + x1) // 2}" y="{HEIGHT - 8}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{xlabel}</text>'
    )
    out.append(
        f'<text x="16" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(y0 + y1) // 2})">{ylabel}</text>'
    )
    for i, (name, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(
            f"{_fmt(cv.x(float(a)))},{_fmt(cv.y(float(b)))}" for a, b in zip(xs, ys)
        )
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.3"/>'
        )
        out.append(
            f'<text x="{x1 - 8}" y="{y1 + 16 + 15 * i}" text-anchor="end" font-size="12" '
            f'font-family="sans-serif" fill="{color}">{name}</text>'
        )
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def line_plot(path, series, title="", xlabel="t", ylabel="value", log10=False):
    """Overlayed line series; log10=True plots log10(values) and annotates the axis."""
    if log10:
        series = [
            (name, xs, np.log10(np.maximum(np.asarray(ys, dtype=float), 1e-300)))
            for name, xs, ys in series
        ]
        ylabel = f"log10({ylabel})"
    _render(path, series, title, xlabel, ylabel)


def phase_portrait(path, xs, ys, title="", xlabel="x", ylabel="y"):
    """Single-curve 2-D projection of a trajectory."""
    _render(path, [("trajectory", xs, ys)], title, xlabel, ylabel)
