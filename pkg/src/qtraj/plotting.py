"""Minimal SVG output: line plots, histograms and quiver maps.

Kept dependency-free and behind :class:`SvgFigure` so another backend can
replace it without touching the CLI.
"""
from __future__ import annotations

from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class SvgFigure:
    """Single-axes figure in data coordinates."""

    def __init__(self, xlim, ylim, width: int = 480, height: int = 360, title: str = "",
                 xlabel: str = "", ylabel: str = "", equal: bool = False):
        self.W, self.H = width, height
        self.m = 50  # margin
        x0, x1 = map(float, xlim)
        y0, y1 = map(float, ylim)
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        if equal:
            self.W = self.H = min(width, height)
        self.items = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        w, h = self.W - 2 * self.m, self.H - 2 * self.m
        return (self.m + (np.asarray(x) - x0) / (x1 - x0) * w,
                self.H - self.m - (np.asarray(y) - y0) / (y1 - y0) * h)

    def line(self, x, y, color=COLORS[0], width=1.5, dash: Optional[str] = None):
        X, Y = self.px(x, y)
        ok = np.isfinite(X) & np.isfinite(Y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(X[ok], Y[ok]))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>')

    def points(self, x, y, color=COLORS[0], r=2.0):
        X, Y = self.px(x, y)
        for a, b in zip(X, Y):
            if np.isfinite(a) and np.isfinite(b):
                self.items.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="{r}" fill="{color}"/>')

    def bars(self, edges, heights, color=COLORS[0]):
        for lo, hi, h in zip(edges[:-1], edges[1:], heights):
            (xa, ya), (xb, yb) = self.px(lo, h), self.px(hi, 0.0)
            self.items.append(f'<rect x="{xa:.2f}" y="{ya:.2f}" width="{max(xb - xa, 0):.2f}" '
                              f'height="{max(yb - ya, 0):.2f}" fill="{color}" fill-opacity="0.7"/>')

    def arrows(self, x, y, u, v, scale=1.0, color=COLORS[0], heads: bool = True):
        X0, Y0 = self.px(x, y)
        X1, Y1 = self.px(np.asarray(x) + scale * np.asarray(u), np.asarray(y) + scale * np.asarray(v))
        for a, b, c, d in zip(X0, Y0, X1, Y1):
            self.items.append(f'<line x1="{a:.2f}" y1="{b:.2f}" x2="{c:.2f}" y2="{d:.2f}" '
                              f'stroke="{color}" stroke-width="1"/>')
            if heads:
                self.items.append(f'<circle cx="{c:.2f}" cy="{d:.2f}" r="1.2" fill="{color}"/>')

    def text(self, x, y, s, size=11):
        X, Y = self.px(x, y)
        self.items.append(f'<text x="{float(X):.2f}" y="{float(Y):.2f}" font-size="{size}">{escape(s)}</text>')

    def to_svg(self) -> str:
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        m, W, H = self.m, self.W, self.H
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
               f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
               f'<rect x="{m}" y="{m}" width="{W - 2 * m}" height="{H - 2 * m}" fill="none" stroke="black"/>']
        for val, anchor in ((x0, "start"), (x1, "end")):
            X, _ = self.px(val, y0)
            out.append(f'<text x="{float(X):.1f}" y="{H - m + 14}" font-size="10" text-anchor="{anchor}">{val:.3g}</text>')
        for val in (y0, y1):
            _, Y = self.px(x0, val)
            out.append(f'<text x="{m - 4}" y="{float(Y):.1f}" font-size="10" text-anchor="end">{val:.3g}</text>')
        if self.title:
            out.append(f'<text x="{W / 2}" y="{m / 2}" font-size="13" text-anchor="middle">{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text x="{W / 2}" y="{H - 12}" font-size="11" text-anchor="middle">{escape(self.xlabel)}</text>')
        if self.ylabel:
            out.append(f'<text x="14" y="{H / 2}" font-size="11" text-anchor="middle" '
                       f'transform="rotate(-90 14 {H / 2})">{escape(self.ylabel)}</text>')
        out += self.items
        out.append("</svg>")
        return "\n".join(out)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_svg())


def _lims(a, pad=0.05):
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    if a.size == 0:
        return (0.0, 1.0)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo or abs(hi) or 1.0
    return lo - pad * span, hi + pad * span


def line_plot(path, x, ys: Sequence, labels: Sequence[str] = (), title="", xlabel="", ylabel=""):
    ys = [np.asarray(y, dtype=float) for y in ys]
    fig = SvgFigure(_lims(x), _lims(np.concatenate(ys)), title=title, xlabel=xlabel, ylabel=ylabel)
    for k, y in enumerate(ys):
        fig.line(x, y, color=COLORS[k % len(COLORS)])
    for k, lab in enumerate(labels):
        fig.items.append(f'<text x="{fig.W - fig.m - 4}" y="{fig.m + 14 * (k + 1)}" font-size="10" '
                         f'text-anchor="end" fill="{COLORS[k % len(COLORS)]}">{escape(lab)}</text>')
    fig.save(path)
    return fig


def histogram(path, values, bins: int = 50, range_=None, title="", xlabel="", marker: Optional[float] = None):
    h, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=range_)
    fig = SvgFigure((edges[0], edges[-1]), (0, max(h.max(), 1) * 1.05), title=title, xlabel=xlabel, ylabel="count")
    fig.bars(edges, h)
    if marker is not None:
        fig.line([marker, marker], [0, h.max()], color=COLORS[1], dash="4 3")
    fig.save(path)
    return fig


def quiver(path, centers, vectors, title="", labels=("y", "z"), scale: Optional[float] = None):
    """Arrows on the unit disc; ``scale`` defaults to filling about one bin per arrow."""
    c = np.asarray(centers, dtype=float)
    v = np.asarray(vectors, dtype=float)
    fig = SvgFigure((-1.05, 1.05), (-1.05, 1.05), title=title, xlabel=labels[0], ylabel=labels[1], equal=True)
    t = np.linspace(0, 2 * np.pi, 200)
    fig.line(np.cos(t), np.sin(t), color="#999999", width=1)
    if len(v):
        vmax = np.max(np.linalg.norm(v, axis=1))
        if scale is None:
            scale = 0.09 / vmax if vmax > 0 else 1.0
        fig.arrows(c[:, 0], c[:, 1], v[:, 0], v[:, 1], scale=scale)
    fig.save(path)
    return fig
