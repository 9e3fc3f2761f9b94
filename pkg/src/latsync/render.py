"""SVG snapshots of scenes and detection overlays."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .world import BoxSet, Scenario

AGENT_COLORS = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


class _Canvas:
    def __init__(self, lo: float, hi: float, px: int = 512):
        self.lo, self.hi, self.px = lo, hi, px
        self.scale = px / (hi - lo)
        self.items: list[str] = []

    def xy(self, x, y):
        # world y points up, SVG y points down
        return (x - self.lo) * self.scale, (self.hi - y) * self.scale

    def rect(self, box, stroke, fill="none", width=1.5, dash=None, opacity=1.0):
        x0, y1 = self.xy(box[0], box[1])
        x1, y0 = self.xy(box[2], box[3])
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(x1 - x0)}" height="{_fmt(y1 - y0)}" '
            f'fill="{fill}" stroke="{stroke}" stroke-width="{width}" opacity="{_fmt(opacity)}"{extra}/>')

    def sector(self, pos, orientation, half_angle, radius, color):
        cx, cy = self.xy(*pos)
        pts = [f"{_fmt(cx)},{_fmt(cy)}"]
        for a in np.linspace(orientation - half_angle, orientation + half_angle, 16):
            px, py = self.xy(pos[0] + radius * math.cos(a), pos[1] + radius * math.sin(a))
            pts.append(f"{_fmt(px)},{_fmt(py)}")
        self.items.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.08" '
                          f'stroke="{color}" stroke-opacity="0.4"/>')

    def dot(self, pos, color, label=None):
        cx, cy = self.xy(*pos)
        self.items.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="5" fill="{color}"/>')
        if label:
            self.items.append(f'<text x="{_fmt(cx + 7)}" y="{_fmt(cy - 7)}" font-size="11" '
                              f'font-family="monospace">{escape(label)}</text>')

    def text(self, x, y, s):
        self.items.append(f'<text x="{x}" y="{y}" font-size="12" font-family="monospace">{escape(s)}</text>')

    def svg(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.px}" height="{self.px}" '
                f'viewBox="0 0 {self.px} {self.px}">')
        body = "\n".join(self.items)
        return f'{head}\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'


def render_frame_svg(scenario: Scenario, frame: int, predictions: BoxSet | None = None,
                     ground_truth: bool = True, title: str | None = None, px: int = 512) -> str:
    """Agents with view sectors, ground-truth boxes (black) and predictions (red, dashed)."""
    cfg = scenario.config
    c = _Canvas(cfg.lo, cfg.hi, px)
    for i, agent in enumerate(scenario.agents):
        color = AGENT_COLORS[i % len(AGENT_COLORS)]
        c.sector(agent.position, agent.orientation, agent.half_angle, agent.range, color)
        c.dot(agent.position, color, f"a{i}")
    if ground_truth:
        for box in scenario.boxes_at(frame):
            c.rect(box, "black", fill="#cccccc", width=1.0, opacity=0.8)
    if predictions is not None:
        for box, score in zip(predictions.boxes, predictions.scores):
            c.rect(box, "#d62728", width=1.5, dash="4,2", opacity=float(0.3 + 0.7 * score))
    c.text(6, 16, title if title is not None else f"frame {frame}")
    return c.svg()
