"""Tiny dependency-free SVG line plots for sweep results.

Each plotted point carries its numeric value in data-x / data-y attributes
so the figure stays machine-checkable against the CSV it came from.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

__all__ = ["plot_sweep_metric", "SERIES_COLORS"]

SERIES_COLORS = {
    "i": "#d62728",
    "ii": "#1f77b4",
    "iii": "#2ca02c",
    "nocopy": "#7f7f7f",
    "transplant": "#9467bd",
}

_W, _H = 560, 400
_ML, _MR, _MT, _MB = 70, 20, 36, 56


def _median(values):
    v = sorted(values)
    k = len(v)
    mid = k // 2
    return v[mid] if k % 2 else 0.5 * (v[mid - 1] + v[mid])


def plot_sweep_metric(rows, metric: str, path, title: str = "", ylabel: str = "") -> None:
    """One polyline per method: median of `metric` over seeds vs N_new."""
    series: dict[str, dict[int, list[float]]] = {}
    for row in rows:
        value = getattr(row, metric)
        if row.method == "transplant" or not math.isfinite(value):
            continue
        series.setdefault(row.method, {}).setdefault(row.n_new, []).append(value)
    points = {
        method: sorted((n, _median(vals)) for n, vals in by_n.items())
        for method, by_n in series.items()
    }
    if not points:
        raise ValueError("no finite data to plot")

    xs = sorted({n for pts in points.values() for n, _ in pts})
    ys = [y for pts in points.values() for _, y in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, max(ys) * 1.08 + 1e-12
    span_x = max(x_hi - x_lo, 1)

    def px(x):
        return _ML + (x - x_lo) / span_x * (_W - _ML - _MR)

    def py(y):
        return _H - _MB - (y - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    # axes
    parts.append(
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" stroke="black"/>'
    )
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>')
    for x in xs:
        parts.append(
            f'<text x="{px(x):.1f}" y="{_H - _MB + 18}" text-anchor="middle">{x}</text>'
        )
    for k in range(5):
        y = y_lo + (y_hi - y_lo) * k / 4
        parts.append(
            f'<text x="{_ML - 6}" y="{py(y):.1f}" text-anchor="end" '
            f'dominant-baseline="middle">{y:.3g}</text>'
        )
    parts.append(
        f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle">N_new</text>'
    )
    parts.append(
        f'<text x="16" y="{_H / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_H / 2})">{escape(ylabel or metric)}</text>'
    )

    legend_y = _MT + 4
    for method in sorted(points):
        pts = points[method]
        color = SERIES_COLORS.get(method, "#000000")
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for x, y in pts:
            parts.append(
                f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3.5" fill="{color}" '
                f'data-method="{escape(method)}" data-x="{x}" data-y="{y!r}"/>'
            )
        parts.append(
            f'<rect x="{_W - _MR - 110}" y="{legend_y}" width="14" height="3" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{_W - _MR - 90}" y="{legend_y + 5}">({escape(method)})</text>'
        )
        legend_y += 18
    parts.append("</svg>")
    with open(path, "w") as out:
        out.write("\n".join(parts) + "\n")
