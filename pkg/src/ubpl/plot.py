"""Deterministic SVG line charts of metrics-CSV curves.

The SVG is written by hand so that identical inputs give byte-identical files
(no timestamps, ids or font metrics from a plotting backend).
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import read_metrics

__all__ = ["PlotError", "collect_series", "render_svg", "plot_metrics"]

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 160, "top": 40, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class PlotError(ValueError):
    pass


def collect_series(csv_paths: Sequence, metric: str, split: Optional[str] = None) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """One (label, epochs, values) series per (file, run_id) that logged ``metric``."""
    series = []
    known = set()
    for path in csv_paths:
        rows = read_metrics(path)
        known.update(r["metric_name"] for r in rows)
        runs: dict[str, list] = {}
        for r in rows:
            if r["metric_name"] == metric and (split is None or r["split"] == split):
                runs.setdefault(r["run_id"], []).append((r["epoch"], r["value"]))
        for run_id, points in runs.items():
            points.sort()
            label = run_id if len(csv_paths) == 1 else f"{Path(path).parent.name or Path(path).stem}:{run_id}"
            series.append((label, np.array([p[0] for p in points], float), np.array([p[1] for p in points], float)))
    if not series:
        raise PlotError(f"unknown metric {metric!r}; available: {', '.join(sorted(known))}")
    return series


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(series, title: str, ylabel: str) -> str:
    xs = np.concatenate([s[1] for s in series])
    ys = np.concatenate([s[2] for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{_fmt(sy(yv) + 4)}" text-anchor="end" font-family="sans-serif" font-size="11">{yv:.4g}</text>')
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{_fmt(sx(xv))}" y="{HEIGHT - MARGIN["bottom"] + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{xv:.4g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">epoch</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.0f})">{escape(ylabel)}</text>')
    for k, (label, ex, ey) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(ex, ey))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN["top"] + 14 + 18 * k
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}" font-family="sans-serif" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_metrics(csv_paths, metric: str, out_path, split: Optional[str] = None, title: Optional[str] = None) -> Path:
    """Plot ``metric`` against epoch for every run found in ``csv_paths``."""
    paths = [csv_paths] if isinstance(csv_paths, (str, Path)) else list(csv_paths)
    series = collect_series(paths, metric, split)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(series, title or metric, metric))
    return out
