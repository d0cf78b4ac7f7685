"""Deterministic SVG overlays of scene grid, observations and predictions."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import GridArtifacts, cell_bounds, subgrid_bounds

WIDTH = 640
MARGIN = 20
STYLE = {
    "observed": 'stroke="#1f3a93" stroke-width="2.5" fill="none"',
    "future": 'stroke="#2e7d32" stroke-width="2" stroke-dasharray="6,4" fill="none"',
    "predicted": 'stroke="#c62828" stroke-width="2" fill="none"',
}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    def __init__(self, bounds):
        self.x0, self.y0, self.x1, self.y1 = bounds
        self.scale = (WIDTH - 2 * MARGIN) / (self.x1 - self.x0)
        self.height = int(round((self.y1 - self.y0) * self.scale)) + 2 * MARGIN

    def xy(self, x: float, y: float) -> tuple[str, str]:
        # SVG y grows downwards
        return (_fmt(MARGIN + (x - self.x0) * self.scale),
                _fmt(self.height - MARGIN - (y - self.y0) * self.scale))

    def unit_rect(self, ub, attrs: str) -> str:
        u0, v0, u1, v1 = ub
        w, h = self.x1 - self.x0, self.y1 - self.y0
        ax, ay = self.xy(self.x0 + u0 * w, self.y0 + v1 * h)
        rw = _fmt((u1 - u0) * w * self.scale)
        rh = _fmt((v1 - v0) * h * self.scale)
        return f'<rect x="{ax}" y="{ay}" width="{rw}" height="{rh}" {attrs}/>'


def render_svg(art: GridArtifacts, observed: np.ndarray, future: np.ndarray | None = None,
               predicted: np.ndarray | None = None, title: str = "", note: str = "") -> str:
    """One window over its scene; NonLinear cells shaded, common subgrids highlighted."""
    cv = _Canvas(art.bounds)
    spec = art.spec
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{cv.height}" '
           f'viewBox="0 0 {WIDTH} {cv.height}">']
    if note:
        out.append(f"<!-- {note} -->")
    if title:
        out.append(f"<title>{title}</title>")
    out.append(cv.unit_rect((0, 0, 1, 1), 'fill="#ffffff" stroke="#000000"'))
    for cell in np.flatnonzero(art.nonlinear).tolist():
        out.append(cv.unit_rect(cell_bounds(cell, spec), 'class="nonlinear" fill="#fde9c9"'))
        for sub in sorted(art.table.common_subgrids(cell)):
            out.append(cv.unit_rect(subgrid_bounds(cell, sub, spec),
                                    'class="common" fill="#f6b26b"'))
    w, h = cv.x1 - cv.x0, cv.y1 - cv.y0
    for k in range(1, spec.n):
        xa, ya = cv.xy(cv.x0 + k / spec.n * w, cv.y0)
        xb, yb = cv.xy(cv.x0 + k / spec.n * w, cv.y1)
        out.append(f'<line x1="{xa}" y1="{ya}" x2="{xb}" y2="{yb}" stroke="#9e9e9e"/>')
        xa, ya = cv.xy(cv.x0, cv.y0 + k / spec.n * h)
        xb, yb = cv.xy(cv.x1, cv.y0 + k / spec.n * h)
        out.append(f'<line x1="{xa}" y1="{ya}" x2="{xb}" y2="{yb}" stroke="#9e9e9e"/>')
    for name, pts in (("observed", observed), ("future", future), ("predicted", predicted)):
        if pts is None or len(pts) == 0:
            continue
        coords = " ".join(",".join(cv.xy(x, y)) for x, y in np.asarray(pts, dtype=float))
        out.append(f'<polyline class="{name}" points="{coords}" {STYLE[name]}/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svgs(items: Sequence[tuple[str, str]], out_dir: str | Path) -> list[Path]:
    """Write (file stem, svg text) pairs; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for stem, text in items:
        path = out_dir / f"{stem}.svg"
        path.write_text(text)
        paths.append(path)
    return paths
