"""Minimal deterministic SVG charts.

Plots are a pure function of the data handed in: fixed float formatting, no
timestamps or random ids, so output bytes are stable across runs. Enough for
the harness's line charts and bar charts; nothing more.
"""

from __future__ import annotations

from typing import Optional, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 40, 60


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return [lo + span * i / (n - 1) for i in range(n)]


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim):
        self.parts = []
        self.xlim = xlim
        self.ylim = ylim
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">'
        )
        self.parts.append(f'<rect width="{_W}" height="{_H}" fill="white"/>')
        self.parts.append(
            f'<text x="{_W / 2}" y="22" text-anchor="middle" font-size="15" '
            f'font-family="sans-serif">{title}</text>'
        )
        self.parts.append(
            f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif">{xlabel}</text>'
        )
        self.parts.append(
            f'<text x="16" y="{_H / 2}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 16 {_H / 2})">{ylabel}</text>'
        )

    def px(self, x: float) -> float:
        lo, hi = self.xlim
        return _ML + (x - lo) / (hi - lo or 1.0) * (_W - _ML - _MR)

    def py(self, y: float) -> float:
        lo, hi = self.ylim
        return _H - _MB - (y - lo) / (hi - lo or 1.0) * (_H - _MT - _MB)

    def axes(self):
        x0, x1 = _ML, _W - _MR
        y0, y1 = _H - _MB, _MT
        self.parts.append(
            f'<path d="M {x0} {y1} L {x0} {y0} L {x1} {y0}" fill="none" stroke="black"/>'
        )
        for tx in _ticks(*self.xlim):
            px = self.px(tx)
            self.parts.append(f'<line x1="{_fmt(px)}" y1="{y0}" x2="{_fmt(px)}" y2="{y0 + 5}" stroke="black"/>')
            self.parts.append(
                f'<text x="{_fmt(px)}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
                f'font-family="sans-serif">{_fmt(tx)}</text>'
            )
        for ty in _ticks(*self.ylim):
            py = self.py(ty)
            self.parts.append(f'<line x1="{x0 - 5}" y1="{_fmt(py)}" x2="{x0}" y2="{_fmt(py)}" stroke="black"/>')
            self.parts.append(
                f'<text x="{x0 - 8}" y="{_fmt(py + 4)}" text-anchor="end" font-size="11" '
                f'font-family="sans-serif">{_fmt(ty)}</text>'
            )

    def legend(self, labels):
        x = _ML + 10
        y = _MT + 8
        for i, label in enumerate(labels):
            color = PALETTE[i % len(PALETTE)]
            self.parts.append(
                f'<line x1="{x}" y1="{y + 16 * i}" x2="{x + 22}" y2="{y + 16 * i}" '
                f'stroke="{color}" stroke-width="2"/>'
            )
            self.parts.append(
                f'<text x="{x + 28}" y="{y + 16 * i + 4}" font-size="11" '
                f'font-family="sans-serif">{label}</text>'
            )

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(
    series: Sequence[tuple],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    ylim: Optional[tuple] = None,
    logy: bool = False,
) -> str:
    """Render ``series`` = [(label, xs, ys), ...] as an SVG line chart."""
    import math

    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if not math.isinf(y)]
    if logy:
        ys_all = [math.log10(max(y, 1e-300)) for y in ys_all]
    xlim = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    if ylim is None:
        ylim = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
        if ylim[0] == ylim[1]:
            ylim = (ylim[0] - 0.5, ylim[1] + 0.5)
    cv = _Canvas(title, xlabel, ("log10 " if logy else "") + ylabel, xlim, ylim)
    cv.axes()
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = []
        for x, y in zip(xs, ys):
            if logy:
                y = math.log10(max(y, 1e-300))
            pts.append(f"{_fmt(cv.px(x))},{_fmt(cv.py(y))}")
        if pts:
            cv.parts.append(
                f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
            for p in pts:
                px, py = p.split(",")
                cv.parts.append(f'<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>')
    cv.legend([label for label, _, _ in series])
    return cv.render()


def bar_chart(
    labels: Sequence[str],
    values: Sequence[float],
    title: str = "",
    ylabel: str = "",
    ylim: Optional[tuple] = None,
) -> str:
    """Render one bar per label as an SVG bar chart."""
    if ylim is None:
        top = max(values) if values else 1.0
        ylim = (0.0, max(top, 1e-9))
    cv = _Canvas(title, "", ylabel, (0.0, float(len(labels))), ylim)
    cv.axes()
    width = (_W - _ML - _MR) / max(len(labels), 1)
    for i, (label, value) in enumerate(zip(labels, values)):
        x = _ML + i * width
        y = cv.py(value)
        color = PALETTE[i % len(PALETTE)]
        cv.parts.append(
            f'<rect x="{_fmt(x + 0.15 * width)}" y="{_fmt(y)}" width="{_fmt(0.7 * width)}" '
            f'height="{_fmt(_H - _MB - y)}" fill="{color}"/>'
        )
        cv.parts.append(
            f'<text x="{_fmt(x + 0.5 * width)}" y="{_H - _MB + 16}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{label}</text>'
        )
        cv.parts.append(
            f'<text x="{_fmt(x + 0.5 * width)}" y="{_fmt(y - 4)}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{_fmt(value)}</text>'
        )
    return cv.render()
