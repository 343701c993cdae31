"""Stacked load charts as standalone SVG.

Normal load is drawn at the bottom, fill-in load stacked on top of it and
the available capacity as a line. Each sample covers one minute, so the
areas are step shaped. Output depends only on the input samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from farm.sim.model import LoadSample
from farm.sim.trace import read_trace

WIDTH, HEIGHT = 800, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 50


@dataclass(frozen=True)
class ChartSpec:
    trace: str
    output: str
    title: str = "load"
    normal_color: str = "#1f4e9c"
    fillin_color: str = "#3aa655"
    capacity_color: str = "#0a1f66"


def _steps(samples: list[LoadSample], value) -> list[tuple[float, float]]:
    pts = []
    for s in samples:
        v = value(s)
        pts.append((s.t, v))
        pts.append((s.t + 1, v))
    return pts


def chart_geometry(samples: list[LoadSample]) -> dict[str, list[tuple[float, float]]]:
    """Polygons and the capacity polyline in data units (minutes, cores)."""
    if not samples:
        return {"normal": [], "fillin": [], "capacity": []}
    lower = _steps(samples, lambda s: 0)
    mid = _steps(samples, lambda s: s.normal_cores)
    top = _steps(samples, lambda s: s.normal_cores + s.fillin_cores)
    return {
        "normal": mid + lower[::-1],
        "fillin": top + mid[::-1],
        "capacity": _steps(samples, lambda s: s.capacity),
    }


def nice_step(span: float, target: int = 8) -> float:
    if span <= 0:
        return 1.0
    raw = span / target
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_svg(samples: list[LoadSample], title: str = "load", normal_color: str = "#1f4e9c",
               fillin_color: str = "#3aa655", capacity_color: str = "#0a1f66") -> str:
    geom = chart_geometry(samples)
    t0 = min((s.t for s in samples), default=0)
    t1 = max((s.t + 1 for s in samples), default=1)
    ymax = max((max(s.capacity, s.normal_cores + s.fillin_cores) for s in samples), default=1) or 1
    ystep = nice_step(ymax)
    ytop = math.ceil(ymax / ystep) * ystep
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def x(t):
        return LEFT + (t - t0) / (t1 - t0) * pw

    def y(v):
        return TOP + ph - v / ytop * ph

    def points(pts):
        return " ".join(f"{_fmt(x(a))},{_fmt(y(b))}" for a, b in pts)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:g}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    if geom["normal"]:
        out.append(f'<polygon class="normal" fill="{normal_color}" points="{points(geom["normal"])}"/>')
        out.append(f'<polygon class="fillin" fill="{fillin_color}" points="{points(geom["fillin"])}"/>')
        out.append(f'<polyline class="capacity" fill="none" stroke="{capacity_color}" stroke-width="1.5" '
                   f'points="{points(geom["capacity"])}"/>')
    # axes
    out.append(f'<line class="axis" x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>')
    xstep = nice_step(t1 - t0)
    tick = math.ceil(t0 / xstep) * xstep
    while tick <= t1:
        px = _fmt(x(tick))
        out.append(f'<line x1="{px}" y1="{TOP + ph}" x2="{px}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px}" y="{TOP + ph + 18}" text-anchor="middle">{_fmt(tick)}</text>')
        tick += xstep
    tick = 0.0
    while tick <= ytop:
        py = _fmt(y(tick))
        out.append(f'<line x1="{LEFT - 5}" y1="{py}" x2="{LEFT}" y2="{py}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{py}" text-anchor="end" dominant-baseline="middle">{_fmt(tick)}</text>')
        tick += ystep
    out.append(f'<text x="{LEFT + pw / 2:g}" y="{HEIGHT - 12}" text-anchor="middle">time [min]</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:g}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:g})">cores</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_chart(spec: ChartSpec) -> None:
    samples = read_trace(spec.trace)
    svg = render_svg(samples, spec.title, spec.normal_color, spec.fillin_color, spec.capacity_color)
    Path(spec.output).write_text(svg)
