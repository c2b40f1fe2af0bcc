"""Minimal SVG charts with no plotting dependency."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .outputs import atomic_write_text

W, H = 480, 320
ML, MR, MT, MB = 56, 16, 32, 48
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _num(v: float) -> str:
    return f"{v:.2f}"


class _Frame:
    def __init__(self, title: str, xlabel: str, ylabel: str, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
            f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
            f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
        ]
        for i in range(5):
            yv = self.y0 + (self.y1 - self.y0) * i / 4
            y = self.py(yv)
            self.parts.append(f'<text x="{ML - 4}" y="{_num(y + 4)}" text-anchor="end" font-size="10">{yv:.3g}</text>')
            self.parts.append(f'<line x1="{ML}" y1="{_num(y)}" x2="{W - MR}" y2="{_num(y)}" stroke="#ddd"/>')

    def px(self, v: float) -> float:
        return ML + (v - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, v: float) -> float:
        return H - MB - (v - self.y0) / (self.y1 - self.y0) * (H - MT - MB)

    def xtick(self, v: float, label: str) -> None:
        self.parts.append(f'<text x="{_num(self.px(v))}" y="{H - MB + 14}" text-anchor="middle" '
                          f'font-size="10">{escape(label)}</text>')

    def legend(self, names: Sequence[str]) -> None:
        for i, name in enumerate(names):
            y = MT + 4 + 14 * i
            col = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{W - MR - 110}" y="{y}" width="10" height="10" fill="{col}"/>')
            self.parts.append(f'<text x="{W - MR - 96}" y="{y + 9}" font-size="10">{escape(name)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _bounds(values, pad_zero: bool = True) -> tuple[float, float]:
    vals = [float(v) for v in values]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if pad_zero:
        lo = min(lo, 0.0)
    return lo, hi


def line_chart(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> Path:
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    fr = _Frame(title, xlabel, ylabel, _bounds(xs, False), _bounds(ys))
    for x in sorted(set(xs)):
        fr.xtick(x, f"{x:g}")
    for i, (name, (xv, yv)) in enumerate(series.items()):
        pts = " ".join(f"{_num(fr.px(x))},{_num(fr.py(y))}" for x, y in zip(xv, yv))
        col = PALETTE[i % len(PALETTE)]
        fr.parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
    fr.legend(list(series))
    return atomic_write_text(path, fr.render())


def bar_chart(path, labels: Sequence[str], values: Sequence[float], title: str = "",
              ylabel: str = "") -> Path:
    n = max(len(labels), 1)
    fr = _Frame(title, "", ylabel, (0, n), _bounds(values))
    bw = (W - ML - MR) / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = ML + i * bw + bw * 0.1
        y0, y1 = fr.py(0.0), fr.py(float(v))
        top, h = min(y0, y1), abs(y1 - y0)
        fr.parts.append(f'<rect x="{_num(x)}" y="{_num(top)}" width="{_num(bw * 0.8)}" height="{_num(h)}" '
                        f'fill="{PALETTE[0]}"/>')
        fr.xtick(i + 0.5, lab)
    return atomic_write_text(path, fr.render())


def histogram(path, groups: dict[str, Sequence[tuple[float, int]]], title: str = "",
              xlabel: str = "") -> Path:
    """Overlaid step histograms; each group is a list of (bin centre, count)."""
    centres = [c for rows in groups.values() for c, _ in rows]
    counts = [n for rows in groups.values() for _, n in rows]
    fr = _Frame(title, xlabel, "count", _bounds(centres, False), _bounds(counts))
    for i, (name, rows) in enumerate(groups.items()):
        col = PALETTE[i % len(PALETTE)]
        half = (rows[1][0] - rows[0][0]) / 2 if len(rows) > 1 else 0.5
        for c, n in rows:
            x0, x1 = fr.px(c - half), fr.px(c + half)
            y = fr.py(n)
            fr.parts.append(f'<rect x="{_num(x0)}" y="{_num(y)}" width="{_num(x1 - x0)}" '
                            f'height="{_num(fr.py(0) - y)}" fill="{col}" fill-opacity="0.45"/>')
    fr.legend(list(groups))
    return atomic_write_text(path, fr.render())
