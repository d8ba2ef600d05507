"""Dependency-free SVG line charts.

Output is a pure function of the data: fixed number formatting and no
timestamps, so identical inputs give byte-identical files.
"""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_chart(
    series: dict[str, tuple[Sequence[float], Sequence[float]]],
    title: str = "",
    width: int = 800,
    panel_height: int = 140,
    stacked: bool = True,
) -> str:
    """One polyline per series; ``stacked`` gives each series its own panel over a shared x axis."""
    if not series:
        raise ValueError("no series to draw")
    margin_l, margin_r, margin_t, gap = 60, 20, 30, 24
    n_panels = len(series) if stacked else 1
    height = margin_t + n_panels * (panel_height + gap)
    xs_all = [x for xs, _ in series.values() for x in xs]
    if not xs_all:
        raise ValueError("series are empty")
    x0, x1 = min(xs_all), max(xs_all)
    xspan = (x1 - x0) or 1.0
    plot_w = width - margin_l - margin_r

    def yrange(names: list[str]) -> tuple[float, float]:
        ys = [y for n in names for y in series[n][1]]
        lo, hi = min(ys), max(ys)
        return (lo, hi) if hi > lo else (lo - 1.0, hi + 1.0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    names = list(series)
    panels = [[n] for n in names] if stacked else [names]
    for p, group in enumerate(panels):
        top = margin_t + p * (panel_height + gap)
        lo, hi = yrange(group)
        out.append(
            f'<rect x="{margin_l}" y="{top}" width="{plot_w}" height="{panel_height}" '
            'fill="none" stroke="#999" stroke-width="0.5"/>'
        )
        out.append(f'<text x="{margin_l - 4}" y="{top + 10}" text-anchor="end">{_fmt(hi)}</text>')
        out.append(f'<text x="{margin_l - 4}" y="{top + panel_height}" text-anchor="end">{_fmt(lo)}</text>')
        for name in group:
            color = PALETTE[names.index(name) % len(PALETTE)]
            xs, ys = series[name]
            pts = " ".join(
                f"{_fmt(margin_l + (x - x0) / xspan * plot_w)},{_fmt(top + panel_height - (y - lo) / (hi - lo) * panel_height)}"
                for x, y in zip(xs, ys)
            )
            out.append(
                f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>'
            )
            ly = top + 12 + 12 * group.index(name)
            out.append(f'<text x="{margin_l + 6}" y="{ly}" fill="{color}">{escape(name)}</text>')
    out.append(f'<text x="{margin_l}" y="{height - 4}">{_fmt(x0)}</text>')
    out.append(f'<text x="{width - margin_r}" y="{height - 4}" text-anchor="end">{_fmt(x1)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
