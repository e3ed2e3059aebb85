"""Dependency-free SVG rendering of estimated curves with confidence bands.

Output is a pure function of the input table, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=56, right=16, top=32, bottom=40)


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def curve_svg(curve: pd.DataFrame, column: str = "delta", title: str = "",
              x_range: tuple | None = None) -> str:
    """SVG with the band ``{column}_lo..{column}_hi`` as a polygon and the
    point estimate as a polyline.

    ``x_range`` labels the horizontal axis in calendar years when given.
    """
    for c in ("tau", column, f"{column}_lo", f"{column}_hi"):
        if c not in curve.columns:
            raise KeyError(f"curve table lacks column {c!r}")
    tau = curve["tau"].to_numpy(dtype=float)
    mid = curve[column].to_numpy(dtype=float)
    lo = curve[f"{column}_lo"].to_numpy(dtype=float)
    hi = curve[f"{column}_hi"].to_numpy(dtype=float)

    ymin, ymax = float(np.min(lo)), float(np.max(hi))
    if ymax - ymin < 1e-12:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    pad = 0.05 * (ymax - ymin)
    ymin, ymax = ymin - pad, ymax + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(t):
        return MARGIN["left"] + pw * (t - tau.min()) / max(tau.max() - tau.min(), 1e-12)

    def sy(v):
        return MARGIN["top"] + ph * (ymax - v) / (ymax - ymin)

    band = [(sx(t), sy(v)) for t, v in zip(tau, hi)] + [(sx(t), sy(v)) for t, v in zip(tau[::-1], lo[::-1])]
    line = [(sx(t), sy(v)) for t, v in zip(tau, mid)]
    pts = lambda seq: " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in seq)

    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = MARGIN["top"], HEIGHT - MARGIN["bottom"]
    left_label = f"{x_range[0]}" if x_range else _fmt(tau.min())
    right_label = f"{x_range[1]}" if x_range else _fmt(tau.max())
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<polygon class="band" points="{pts(band)}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>',
        f'<polyline class="estimate" points="{pts(line)}" fill="none" stroke="#08519c" stroke-width="1.5"/>',
        f'<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    if ymin < 0 < ymax:
        parts.append(f'<line x1="{x0}" y1="{_fmt(sy(0.0))}" x2="{x1}" y2="{_fmt(sy(0.0))}" '
                     'stroke="gray" stroke-dasharray="4,3"/>')
    parts += [
        f'<text x="{x0}" y="{y1 + 16}" font-size="11">{escape(left_label)}</text>',
        f'<text x="{x1}" y="{y1 + 16}" font-size="11" text-anchor="end">{escape(right_label)}</text>',
        f'<text x="{x0 - 4}" y="{y0 + 4}" font-size="11" text-anchor="end">{_fmt(ymax)}</text>',
        f'<text x="{x0 - 4}" y="{y1}" font-size="11" text-anchor="end">{_fmt(ymin)}</text>',
        f'<text x="{WIDTH / 2:.1f}" y="20" font-size="13" text-anchor="middle">{escape(title)}</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def plot_emit(curve_files, out_dir, columns=("delta", "omega"), x_range=None) -> list:
    """Write one SVG per (curve file, column). Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in curve_files:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing curve file: {path}")
        table = pd.read_csv(path)
        for col in columns:
            if col not in table.columns:
                continue
            target = out_dir / f"{path.stem}_{col}.svg"
            target.write_text(curve_svg(table, col, title=f"{path.stem}: {col}", x_range=x_range),
                              encoding="utf-8")
            written.append(target)
    return written
