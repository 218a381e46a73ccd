"""Minimal deterministic SVG charts (line charts and grouped bars)."""
from __future__ import annotations

from xml.sax.saxutils import escape

__all__ = ["line_chart", "bar_chart"]

W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 56, 16, 28, 44
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(x):
    return f"{x:.2f}"


def _span(lo, hi):
    if hi - lo <= 0:
        return lo - 0.5, hi + 0.5
    return lo, hi


def _frame(title, xlabel, ylabel, x0, x1, y0, y1):
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{LEFT + pw / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{TOP + ph / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {TOP + ph / 2})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        t = i / 4
        gx = LEFT + t * pw
        gy = TOP + ph - t * ph
        out.append(f'<text x="{_fmt(gx)}" y="{TOP + ph + 14}" text-anchor="middle" font-size="9">{x0 + t * (x1 - x0):.3g}</text>')
        out.append(f'<text x="{LEFT - 4}" y="{_fmt(gy + 3)}" text-anchor="end" font-size="9">{y0 + t * (y1 - y0):.3g}</text>')
    return out


def line_chart(series, title="", xlabel="", ylabel="", xlim=None, ylim=None) -> str:
    """``series``: list of ``(label, xs, ys)``. Returns the SVG document text."""
    if not series:
        raise ValueError("nothing to plot")
    xs_all = [float(x) for _, xs, _ in series for x in xs]
    ys_all = [float(y) for _, _, ys in series for y in ys]
    if not xs_all:
        raise ValueError("series are empty")
    x0, x1 = _span(*(xlim or (min(xs_all), max(xs_all))))
    y0, y1 = _span(*(ylim or (min(ys_all), max(ys_all))))
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    out = _frame(title, xlabel, ylabel, x0, x1, y0, y1)
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(
            f"{_fmt(LEFT + (float(x) - x0) / (x1 - x0) * pw)},{_fmt(TOP + ph - (float(y) - y0) / (y1 - y0) * ph)}"
            for x, y in zip(xs, ys)
        )
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = TOP + 12 + 13 * i
        out.append(f'<text x="{W - RIGHT - 6}" y="{ly}" text-anchor="end" font-size="10" fill="{color}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(groups, series_labels, values, title="", xlabel="", ylabel="", ylim=(0.0, 1.0)) -> str:
    """Grouped bars: ``values[g][s]`` for group ``groups[g]`` and series ``series_labels[s]``."""
    if not groups:
        raise ValueError("nothing to plot")
    y0, y1 = _span(*ylim)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    out = _frame(title, xlabel, ylabel, 0, len(groups), y0, y1)
    # replace the numeric x ticks with group names
    out = [line for line in out if 'font-size="9">' not in line or 'text-anchor="end"' in line]
    slot = pw / len(groups)
    bw = 0.8 * slot / max(1, len(series_labels))
    for g, name in enumerate(groups):
        gx = LEFT + g * slot
        out.append(f'<text x="{_fmt(gx + slot / 2)}" y="{TOP + ph + 14}" text-anchor="middle" font-size="9">{escape(str(name))}</text>')
        for s, _ in enumerate(series_labels):
            val = min(max(float(values[g][s]), y0), y1)
            h = (val - y0) / (y1 - y0) * ph
            x = gx + 0.1 * slot + s * bw
            out.append(f'<rect x="{_fmt(x)}" y="{_fmt(TOP + ph - h)}" width="{_fmt(bw)}" height="{_fmt(h)}" '
                       f'fill="{PALETTE[s % len(PALETTE)]}"/>')
    for s, label in enumerate(series_labels):
        out.append(f'<text x="{W - RIGHT - 6}" y="{TOP + 12 + 13 * s}" text-anchor="end" font-size="10" '
                   f'fill="{PALETTE[s % len(PALETTE)]}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
