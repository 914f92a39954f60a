"""Minimal SVG charts for experiment outputs (CSV files stay the normative record)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
W, H, PAD = 640, 360, 50


def _frame(title: str, y_lo: float, y_hi: float, body: list[str]) -> str:
    ticks = []
    for k in range(5):
        v = y_lo + (y_hi - y_lo) * k / 4
        y = H - PAD - (H - 2 * PAD) * k / 4
        ticks.append(f'<line x1="{PAD}" y1="{y:.1f}" x2="{W - PAD}" y2="{y:.1f}" stroke="#ddd"/>'
                     f'<text x="{PAD - 6}" y="{y + 4:.1f}" font-size="10" text-anchor="end">{v:.2f}</text>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif">\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2}" y="20" font-size="14" text-anchor="middle">{escape(title)}</text>\n'
            + "\n".join(ticks) + "\n" + "\n".join(body) + "\n</svg>\n")


def _sy(v: float, lo: float, hi: float) -> float:
    span = hi - lo or 1.0
    return H - PAD - (H - 2 * PAD) * (v - lo) / span


def line_chart(path, title: str, x_labels, series: dict[str, list[float]],
               y_range: tuple[float, float] | None = None) -> Path:
    vals = [v for s in series.values() for v in s]
    lo, hi = y_range or (min(vals, default=0.0), max(vals, default=1.0))
    n = max(len(x_labels) - 1, 1)
    sx = [PAD + (W - 2 * PAD - 110) * i / n for i in range(len(x_labels))]
    body = [f'<text x="{x:.1f}" y="{H - PAD + 16}" font-size="10" text-anchor="middle">{escape(str(l))}</text>'
            for x, l in zip(sx, x_labels)]
    for k, (name, ys) in enumerate(series.items()):
        c = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{x:.1f},{_sy(y, lo, hi):.1f}" for x, y in zip(sx, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        body.append(f'<text x="{W - PAD - 100}" y="{PAD + 12 * k}" font-size="10" fill="{c}">{escape(name)}</text>')
    out = Path(path)
    out.write_text(_frame(title, lo, hi, body))
    return out


def bar_chart(path, title: str, labels, groups: dict[str, list[float]],
              y_range: tuple[float, float] | None = None) -> Path:
    vals = [v for g in groups.values() for v in g]
    lo, hi = y_range or (0.0, max(vals, default=1.0))
    n, k = len(labels), max(len(groups), 1)
    slot = (W - 2 * PAD) / max(n, 1)
    bw = slot * 0.8 / k
    body = []
    for i, label in enumerate(labels):
        x0 = PAD + slot * i + slot * 0.1
        body.append(f'<text x="{x0 + slot * 0.4:.1f}" y="{H - PAD + 14}" font-size="8" '
                    f'text-anchor="middle">{escape(str(label))}</text>')
        for j, (name, g) in enumerate(groups.items()):
            y = _sy(g[i], lo, hi)
            body.append(f'<rect x="{x0 + j * bw:.1f}" y="{y:.1f}" width="{bw:.1f}" '
                        f'height="{H - PAD - y:.1f}" fill="{PALETTE[j % len(PALETTE)]}"/>')
    for j, name in enumerate(groups):
        body.append(f'<text x="{W - PAD - 100}" y="{PAD + 12 * j}" font-size="10" '
                    f'fill="{PALETTE[j % len(PALETTE)]}">{escape(name)}</text>')
    out = Path(path)
    out.write_text(_frame(title, lo, hi, body))
    return out


def step_chart(path, title: str, t_ms, series: dict[str, list[int]], levels=("idle", "press", "slip")) -> Path:
    """Stage-vs-time traces, one polyline per series, offset slightly for legibility."""
    t_ms = list(t_ms)
    t0, t1 = (t_ms[0], t_ms[-1]) if t_ms else (0, 1)
    span = (t1 - t0) or 1
    body = [f'<text x="{PAD - 6}" y="{_sy(i, -0.5, 2.5) + 4:.1f}" font-size="10" text-anchor="end">{l}</text>'
            for i, l in enumerate(levels)]
    for k, (name, ys) in enumerate(series.items()):
        c = PALETTE[k % len(PALETTE)]
        off = 0.06 * k
        pts = " ".join(f"{PAD + (W - 2 * PAD) * (t - t0) / span:.1f},{_sy(y + off, -0.5, 2.5):.1f}"
                       for t, y in zip(t_ms, ys))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1"/>')
        body.append(f'<text x="{W - PAD - 100}" y="{PAD + 12 * k}" font-size="10" fill="{c}">{escape(name)}</text>')
    out = Path(path)
    svg = _frame(title, -0.5, 2.5, body)
    out.write_text(svg)
    return out
