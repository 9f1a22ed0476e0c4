"""Deterministic SVG renderings of trajectories and per-frame timing.

Output depends only on the input numbers: fixed canvas, fixed palette,
coordinates printed with a fixed number of decimals and no timestamps, so
files can be compared byte for byte.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

from .evaluation import TimingRow, TrajectoryEstimate

WIDTH = 800
HEIGHT = 600
MARGIN = 40
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def _header(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{MARGIN}" y="{MARGIN // 2 + 5}" font-family="sans-serif" font-size="14">{_escape(title)}</text>',
    ]


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


class _Frame:
    """Maps data coordinates into the plot area, optionally with equal axes."""

    def __init__(self, xs: Sequence[float], ys: Sequence[float], equal: bool):
        x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
        y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
        # degenerate spans (a single point, a constant series) get unit width
        if x1 - x0 < 1e-12:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 - y0 < 1e-12:
            y0, y1 = y0 - 0.5, y1 + 0.5
        w, h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
        sx, sy = w / (x1 - x0), h / (y1 - y0)
        if equal:
            sx = sy = min(sx, sy)
        self.x0, self.y0, self.sx, self.sy = x0, y0, sx, sy
        # centre the data inside the plot area
        self.ox = MARGIN + (w - sx * (x1 - x0)) / 2.0
        self.oy = MARGIN + (h - sy * (y1 - y0)) / 2.0
        self.h = h

    def point(self, x: float, y: float) -> str:
        px = self.ox + (x - self.x0) * self.sx
        py = HEIGHT - (self.oy + (y - self.y0) * self.sy)  # SVG y grows downward
        return f"{_fmt(px)},{_fmt(py)}"


def _polyline(frame: _Frame, pts: Sequence[tuple[float, float]], color: str, dashed: bool, cls: str) -> str:
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    coords = " ".join(frame.point(x, y) for x, y in pts)
    return f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{coords}"/>'


def trajectory_svg(
    gt: Mapping[str, TrajectoryEstimate],
    est: Mapping[str, TrajectoryEstimate],
    title: str = "ground truth (dashed) vs estimate",
) -> str:
    """Top-down x/z overlay; agents are drawn in sorted order."""
    agents = sorted(set(gt) | set(est), key=lambda a: (a != "ego", a))
    xs, ys = [], []
    for src in (gt, est):
        for t in src.values():
            for p in t.poses.values():
                xs.append(p.x)
                ys.append(p.z)
    frame = _Frame(xs, ys, equal=True)
    out = _header(title)
    for k, agent in enumerate(agents):
        color = PALETTE[k % len(PALETTE)]
        if agent in gt and gt[agent].poses:
            pts = [(p.x, p.z) for p in gt[agent].poses.values()]
            out.append(_polyline(frame, pts, color, True, f"gt {agent}"))
        if agent in est and est[agent].poses:
            pts = [(p.x, p.z) for p in est[agent].poses.values()]
            out.append(_polyline(frame, pts, color, False, f"est {agent}"))
        out.append(
            f'<text x="{WIDTH - MARGIN - 120}" y="{MARGIN + 16 * (k + 1)}" font-family="sans-serif" '
            f'font-size="12" fill="{color}">{_escape(agent)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def timing_svg(rows: Sequence[TimingRow], title: str = "per-frame solve time (ms)") -> str:
    """Per-frame wall time as a polyline, with the peak value annotated."""
    pts = [(float(r.frame), 1e3 * r.time_s) for r in rows]
    frame = _Frame([p[0] for p in pts], [p[1] for p in pts], equal=False)
    out = _header(title)
    out.append(
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>'
    )
    out.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>')
    if pts:
        out.append(_polyline(frame, pts, PALETTE[0], False, "timing"))
        peak = max(p[1] for p in pts)
        if math.isfinite(peak):
            out.append(
                f'<text x="{MARGIN + 5}" y="{MARGIN - 5}" font-family="sans-serif" font-size="12">'
                f"max {_fmt(peak)} ms</text>"
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: Path, svg: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(svg)
