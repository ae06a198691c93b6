"""Self-contained deterministic SVG line charts (fixed 800x600 viewBox)."""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 800, 600
_MARGIN = 55


def _fmt(x: float) -> str:
    return f"{x:.6g}"


class Panel:
    """One axis-aligned plotting area inside the fixed canvas."""

    def __init__(self, x0, y0, x1, y1, xlim, ylim):
        self.x0, self.y0, self.x1, self.y1 = x0, y0, x1, y1
        self.xlim, self.ylim = xlim, ylim

    def _map(self, xs, ys):
        xa, xb = self.xlim
        ya, yb = self.ylim
        if xb == xa:
            xb = xa + 1.0
        if yb == ya:
            ya, yb = ya - 1.0, yb + 1.0
        px = self.x0 + (np.asarray(xs) - xa) / (xb - xa) * (self.x1 - self.x0)
        py = self.y1 - (np.asarray(ys) - ya) / (yb - ya) * (self.y1 - self.y0)
        return px, py

    def polyline(self, xs, ys, color, width=1.5, dash=None) -> str:
        px, py = self._map(xs, ys)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<polyline fill="none" stroke="{color}" '
                f'stroke-width="{width}"{d} points="{pts}"/>')

    def frame(self, label="") -> str:
        parts = [f'<rect x="{self.x0}" y="{self.y0}" '
                 f'width="{self.x1 - self.x0}" height="{self.y1 - self.y0}" '
                 'fill="none" stroke="#333" stroke-width="1"/>']
        xa, xb = self.xlim
        ya, yb = self.ylim
        parts.append(f'<text x="{self.x0}" y="{self.y1 + 16}" '
                     f'font-size="11" fill="#333">{_fmt(xa)}</text>')
        parts.append(f'<text x="{self.x1 - 30}" y="{self.y1 + 16}" '
                     f'font-size="11" fill="#333">{_fmt(xb)}</text>')
        parts.append(f'<text x="{self.x0 - 50}" y="{self.y1}" '
                     f'font-size="11" fill="#333">{_fmt(ya)}</text>')
        parts.append(f'<text x="{self.x0 - 50}" y="{self.y0 + 10}" '
                     f'font-size="11" fill="#333">{_fmt(yb)}</text>')
        if label:
            parts.append(f'<text x="{self.x0 + 6}" y="{self.y0 + 16}" '
                         f'font-size="13" fill="#111">{label}</text>')
        return "\n".join(parts)


def _document(body: str) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n'
            f"{body}\n</svg>\n")


def _lim(arr, pad=0.05):
    lo, hi = float(np.min(arr)), float(np.max(arr))
    span = hi - lo or 1.0
    return lo - pad * span, hi + pad * span


def omega_chart(t, u, omega, m) -> str:
    """Stacked graphs of u and its m-argument with the reference line m*t."""
    t = np.asarray(t)
    mt = m * t
    top = Panel(_MARGIN, 30, WIDTH - 20, 280, (0.0, float(t[-1])), _lim(u))
    bot = Panel(_MARGIN, 330, WIDTH - 20, HEIGHT - 30,
                (0.0, float(t[-1])), _lim(np.r_[omega, mt]))
    body = "\n".join([
        top.frame("u(t)"),
        top.polyline(t, u, "#1f77b4"),
        bot.frame(f"omega_{m}(t), dotted: {m} t"),
        bot.polyline(t, mt, "#999", width=1.0, dash="4 4"),
        bot.polyline(t, omega, "#d62728"),
    ])
    return _document(body)


def wall_chart(t, u, omega, m, s, wall) -> str:
    """Stage-4 frame: u above, the angle between the closing walls below."""
    t = np.asarray(t)
    mt = m * t
    top = Panel(_MARGIN, 30, WIDTH - 20, 280, (0.0, float(t[-1])), _lim(u))
    ybands = np.r_[omega, mt + wall, mt - wall]
    bot = Panel(_MARGIN, 330, WIDTH - 20, HEIGHT - 30,
                (0.0, float(t[-1])), _lim(ybands))
    body = "\n".join([
        top.frame(f"u(t) at s = {s:.4g}"),
        top.polyline(t, u, "#1f77b4"),
        bot.frame(f"omega_{m} between walls m t +- {wall:.4g}"),
        bot.polyline(t, mt, "#999", width=1.0, dash="4 4"),
        bot.polyline(t, mt + wall, "#2ca02c", width=1.0, dash="6 3"),
        bot.polyline(t, mt - wall, "#2ca02c", width=1.0, dash="6 3"),
        bot.polyline(t, omega, "#d62728"),
    ])
    return _document(body)
