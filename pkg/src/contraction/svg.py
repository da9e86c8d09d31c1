"""Minimal deterministic SVG plots for Picard runs and conjugacy runs.

Output is byte-stable: coordinates are rounded to two decimals in pixel
space and elements are emitted in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .numcore import IntegrationError, matrix_exponential

WIDTH, HEIGHT = 800, 600
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    color: str
    label: str | None = None
    width: float = 1.5
    dashed: bool = False
    markers: bool = False


@dataclass
class Panel:
    """One set of axes occupying the pixel box ``(left, top, width, height)``."""

    box: tuple[float, float, float, float]
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    rects: list[tuple[float, float, float, float, str]] = field(default_factory=list)
    xlim: tuple[float, float] | None = None
    ylim: tuple[float, float] | None = None

    def limits(self):
        xs = [s.x for s in self.series] + [np.array([r[0], r[2]]) for r in self.rects]
        ys = [s.y for s in self.series] + [np.array([r[1], r[3]]) for r in self.rects]
        return (self.xlim or _padded_range(np.concatenate(xs)),
                self.ylim or _padded_range(np.concatenate(ys)))


def _padded_range(v: np.ndarray) -> tuple[float, float]:
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (-1.0, 1.0)
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi - lo < 1e-300:
        pad = max(abs(lo) * 0.1, 1e-3)
    else:
        pad = 0.05 * (hi - lo)
    return (lo - pad, hi + pad)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if abs(v) < 1e-12:
        return "0"
    return f"{v:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _render_panel(panel: Panel, out: list[str]) -> None:
    left, top, w, h = panel.box
    (x0, x1), (y0, y1) = panel.limits()

    def px(x):
        return left + (np.asarray(x, dtype=float) - x0) / (x1 - x0) * w

    def py(y):
        return top + h - (np.asarray(y, dtype=float) - y0) / (y1 - y0) * h

    clip = f"clip{int(left)}_{int(top)}"
    out.append(f'<clipPath id="{clip}"><rect x="{_fmt(left)}" y="{_fmt(top)}" '
               f'width="{_fmt(w)}" height="{_fmt(h)}"/></clipPath>')
    out.append(f'<rect x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(w)}" height="{_fmt(h)}" '
               'fill="white" stroke="black" stroke-width="1"/>')
    for t in _ticks(x0, x1):
        X = float(px(t))
        out.append(f'<line x1="{_fmt(X)}" y1="{_fmt(top + h)}" x2="{_fmt(X)}" '
                   f'y2="{_fmt(top + h + 5)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(X)}" y="{_fmt(top + h + 18)}" font-size="11" '
                   f'text-anchor="middle">{_tick_label(t)}</text>')
    for t in _ticks(y0, y1):
        Y = float(py(t))
        out.append(f'<line x1="{_fmt(left - 5)}" y1="{_fmt(Y)}" x2="{_fmt(left)}" '
                   f'y2="{_fmt(Y)}" stroke="black"/>')
        out.append(f'<text x="{_fmt(left - 8)}" y="{_fmt(Y + 4)}" font-size="11" '
                   f'text-anchor="end">{_tick_label(t)}</text>')
    out.append(f'<text x="{_fmt(left + w / 2)}" y="{_fmt(top - 10)}" font-size="14" '
               f'text-anchor="middle">{escape(panel.title)}</text>')
    out.append(f'<text x="{_fmt(left + w / 2)}" y="{_fmt(top + h + 36)}" font-size="12" '
               f'text-anchor="middle">{escape(panel.xlabel)}</text>')
    ylx, yly = left - 48, top + h / 2
    out.append(f'<text x="{_fmt(ylx)}" y="{_fmt(yly)}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 {_fmt(ylx)} {_fmt(yly)})">{escape(panel.ylabel)}</text>')
    out.append(f'<g clip-path="url(#{clip})">')
    for (ax, ay, bx, by, color) in panel.rects:
        X0, X1 = sorted((float(px(ax)), float(px(bx))))
        Y0, Y1 = sorted((float(py(ay)), float(py(by))))
        out.append(f'<rect x="{_fmt(X0)}" y="{_fmt(Y0)}" width="{_fmt(X1 - X0)}" '
                   f'height="{_fmt(Y1 - Y0)}" fill="none" stroke="{color}" '
                   'stroke-width="1.5" stroke-dasharray="6 4"/>')
    for s in panel.series:
        X, Y = px(s.x), py(s.y)
        ok = np.isfinite(X) & np.isfinite(Y)
        if s.markers:
            for a, b in zip(X[ok], Y[ok]):
                out.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2" fill="{s.color}"/>')
            continue
        dash = ' stroke-dasharray="4 3"' if s.dashed else ""
        # one polyline per run of finite points
        breaks = np.flatnonzero(np.diff(ok.astype(int)) != 0) + 1
        for seg in np.split(np.arange(X.size), breaks):
            if seg.size < 2 or not ok[seg[0]]:
                continue
            pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(X[seg], Y[seg]))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{s.color}" '
                       f'stroke-width="{s.width}"{dash}/>')
    out.append("</g>")


def render(panels: Sequence[Panel], legend: Sequence[tuple[str, str]], title: str) -> str:
    """Assemble panels and a legend into one standalone SVG document."""
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="22.00" font-size="16" text-anchor="middle">'
           f'{escape(title)}</text>']
    for panel in panels:
        _render_panel(panel, out)
    lx, ly = 90.0, HEIGHT - 40.0
    for k, (label, color) in enumerate(legend[:8]):
        x = lx + (k % 4) * 175
        y = ly + (k // 4) * 16
        out.append(f'<line x1="{_fmt(x)}" y1="{_fmt(y)}" x2="{_fmt(x + 20)}" y2="{_fmt(y)}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_fmt(x + 26)}" y="{_fmt(y + 4)}" font-size="11">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def picard_svg(run) -> str:
    """Iterates ``phi_0 .. phi_final`` overlaid on the rectangle ``R``."""
    if not run.iterates:
        raise ValueError("no iterates to plot")
    R = run.rectangle
    panel = Panel((90, 50, 680, 440), "Picard iterates", "x", "y",
                  rects=[(R.x0 - R.a, R.y0 - R.b, R.x0 + R.a, R.y0 + R.b, "#444444")])
    stride = max(1, (run.final.n_nodes - 1) // 256)
    x = run.x_nodes[::stride]
    count = len(run.iterates)
    shown = list(range(count)) if count <= 10 else sorted(
        {round(k * (count - 1) / 9) for k in range(10)})
    legend = []
    for slot, k in enumerate(shown):
        color = PALETTE[slot % len(PALETTE)]
        panel.series.append(Series(x, run.iterates[k].values[::stride], color, f"phi_{k}"))
        legend.append((f"phi_{k}", color))
    if len(legend) > 7:
        # room for seven entries: the first six and the final iterate
        legend = legend[:6] + legend[-1:]
    legend.append(("rectangle R", "#444444"))
    return render([panel], legend, f"y' = {run.ivp.f}, y({run.ivp.x0:g}) = {run.ivp.y0:g}")


def conjugacy_svg(run, n_traj: int = 8, steps: int = 30, dt: float = 0.1) -> str:
    """Nonlinear portrait (left) and linear portrait with H-mapped orbits (right)."""
    system = run.problem.system
    s0 = run.constants.s0
    n = system.dim
    angles = (np.arange(n_traj) + 0.5) * 2 * np.pi / n_traj
    starts = np.zeros((n_traj, n))
    starts[:, 0] = 0.5 * s0 * np.cos(angles)
    if n > 1:
        starts[:, 1] = 0.5 * s0 * np.sin(angles)
    else:
        starts[:, 0] = 0.5 * s0 * np.where(np.cos(angles) >= 0, 1, -1) * (1 + np.arange(n_traj)) / n_traj

    far = 4.0 * s0

    def orbit(step):
        # points far outside the plot box are dropped rather than integrated on
        pts = [starts]
        cur = starts.copy()
        for _ in range(steps):
            live = np.all(np.isfinite(cur), axis=1) & np.all(np.abs(cur) <= far, axis=1)
            nxt = np.full_like(cur, np.nan)
            if np.any(live):
                try:
                    nxt[live] = step(cur[live])
                except (IntegrationError, ArithmeticError):
                    pass
            cur = nxt
            pts.append(cur)
        return np.stack(pts, axis=1)

    fwd_lin = matrix_exponential(dt * system.split.block)
    bwd_lin = matrix_exponential(-dt * system.split.block)
    nonlinear = np.concatenate([orbit(lambda p: system.flow(p, -dt))[:, ::-1],
                                orbit(lambda p: system.flow(p, dt))[:, 1:]], axis=1)
    h_starts = run.H(starts)

    def lin_orbit(M, base):
        pts = [base]
        cur = base
        for _ in range(steps):
            cur = cur @ M.T
            pts.append(cur)
        return np.stack(pts, axis=1)

    linear = np.concatenate([lin_orbit(bwd_lin, h_starts)[:, ::-1],
                             lin_orbit(fwd_lin, h_starts)[:, 1:]], axis=1)
    box = 1.2 * s0
    inside = lambda P: np.all(np.abs(P) <= box, axis=-1)
    t_axis = dt * np.arange(-steps, steps + 1)

    def coords(P):
        return (t_axis, P[:, 0]) if n == 1 else (P[:, 0], P[:, 1])

    labels = ("t", "y1") if n == 1 else (("y1", "z1") if system.ds == 1 and n == 2
                                         else ("w1", "w2"))
    lim = (-box, box)
    xlim = (t_axis[0], t_axis[-1]) if n == 1 else lim
    left = Panel((80, 60, 310, 440), "nonlinear time-t flow", *labels, xlim=xlim, ylim=lim)
    right = Panel((460, 60, 310, 440), "linear flow and H(orbits)", *labels, xlim=xlim, ylim=lim)
    for k in range(n_traj):
        color = PALETTE[k % len(PALETTE)]
        P = np.where(inside(nonlinear[k])[:, None], nonlinear[k], np.nan)
        left.series.append(Series(*coords(P), color))
        Q = np.where(inside(linear[k])[:, None], linear[k], np.nan)
        right.series.append(Series(*coords(Q), "#999999", dashed=True))
        keep = inside(P) & np.all(np.isfinite(P), axis=1)
        mapped = np.full_like(P, np.nan)
        if np.any(keep):
            mapped[keep] = run.H(P[keep])
        right.series.append(Series(*coords(mapped), color, markers=True))
    legend = [("nonlinear orbit", PALETTE[0]), ("linear orbit", "#999999"),
              ("H(nonlinear orbit)", PALETTE[1])]
    return render([left, right], legend,
                  f"time-1 conjugacy, s0 = {s0:.6g}, residual = {run.residual:.3g}")
