"""Plain-text SVG of a discrete map: source mesh on the left, image on the
right, triangles colored by the sign of their Jacobian.

No plotting library is used; output depends only on the input arrays, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .diagnostics import ORIENT_TOL, check_orientation
from .geometry import DiscreteMap, PolygonalDomain

COLORS = {"positive": "#9ecae1", "zero": "#bdbdbd", "negative": "#e6550d"}
EDGE_COLOR = "#31506b"
TARGET_COLOR = "#2b8c3e"
FOLD_COLOR = "#a50f15"
PANEL = 360.0
MARGIN = 20.0
HEADER = 28.0


def _num(x: float) -> str:
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


class _Frame:
    """Maps a bounding box into a square panel (y up)."""

    def __init__(self, lo, hi, x0: float, y0: float, size: float):
        span = max(float(hi[0] - lo[0]), float(hi[1] - lo[1]), 1e-300)
        self.k = size / span
        self.lo = np.asarray(lo, float)
        cx = 0.5 * (size - self.k * (hi[0] - lo[0]))
        cy = 0.5 * (size - self.k * (hi[1] - lo[1]))
        self.ox = x0 + cx
        self.top = y0 + size - cy

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        x = self.ox + self.k * (pts[:, 0] - self.lo[0])
        y = self.top - self.k * (pts[:, 1] - self.lo[1])
        return np.column_stack([x, y])


def _path(pts: np.ndarray, close: bool = True) -> str:
    body = " L".join(f"{_num(x)} {_num(y)}" for x, y in pts)
    return "M" + body + (" Z" if close else "")


def _triangles(out: list, P: np.ndarray, tris: np.ndarray, classes: np.ndarray, width: float):
    for name in ("positive", "zero", "negative"):
        idx = np.flatnonzero(classes == name)
        if not idx.size:
            continue
        out.append(f'<g class="{name}" fill="{COLORS[name]}" stroke="{EDGE_COLOR}" '
                   f'stroke-width="{_num(width)}" stroke-linejoin="round">')
        for t in idx:
            a, b, c = P[tris[t]]
            out.append(f'<path d="M{_num(a[0])} {_num(a[1])} L{_num(b[0])} {_num(b[1])} '
                       f'L{_num(c[0])} {_num(c[1])} Z"/>')
        out.append("</g>")


def emit_svg(fmap: DiscreteMap, target: PolygonalDomain | None = None,
             fold_radius: float | None = None, title: str | None = None,
             panel: float = PANEL, tol: float = ORIENT_TOL) -> str:
    """SVG document showing the source mesh and its image side by side.

    Image triangles are filled by Jacobian sign (positive, zero, negative);
    the same coloring is repeated on the source side so folded regions can
    be located. ``fold_radius`` draws a circle of that radius about the
    origin on the source panel; ``target`` outlines the target domain on the
    image panel.
    """
    mesh = fmap.mesh
    census = check_orientation(fmap, tol)
    classes = np.empty(mesh.n_triangles, dtype=object)
    classes[census.positive_triangles] = "positive"
    classes[census.zero_triangles] = "zero"
    classes[census.negative_triangles] = "negative"
    src = np.asarray(mesh.vertices, float)
    img = np.asarray(fmap.images, float)
    W = 2 * panel + 3 * MARGIN
    H = panel + 2 * MARGIN + HEADER
    width = max(0.2, min(1.0, 30.0 / math.sqrt(max(mesh.n_triangles, 1))))

    fs = _Frame(src.min(0), src.max(0), MARGIN, HEADER + MARGIN, panel)
    lo, hi = img.min(0), img.max(0)
    if target is not None:
        b = target.bounds
        lo, hi = np.minimum(lo, b[:2]), np.maximum(hi, b[2:])
    fi = _Frame(lo, hi, 2 * MARGIN + panel, HEADER + MARGIN, panel)

    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(W)}" height="{_num(H)}" '
           f'viewBox="0 0 {_num(W)} {_num(H)}">',
           f'<rect width="{_num(W)}" height="{_num(H)}" fill="#ffffff"/>']
    head = f"positive {census.positive}, zero {census.zero}, negative {census.negative}"
    if title:
        head = f"{title}: {head}"
    out.append(f'<text x="{_num(MARGIN)}" y="{_num(HEADER - 8)}" font-family="sans-serif" '
               f'font-size="13" fill="#222222">{escape(head)}</text>')

    out.append('<g id="source">')
    _triangles(out, fs(src), mesh.triangles, classes, width)
    if fold_radius is not None:
        c = fs([[0.0, 0.0]])[0]
        out.append(f'<circle class="fold" cx="{_num(c[0])}" cy="{_num(c[1])}" '
                   f'r="{_num(fold_radius * fs.k)}" fill="none" stroke="{FOLD_COLOR}" '
                   f'stroke-width="1.5" stroke-dasharray="5 3"/>')
    out.append("</g>")

    out.append('<g id="image">')
    # negative triangles last so folds sit on top
    _triangles(out, fi(img), mesh.triangles, classes, width)
    if target is not None:
        for loop in target.loops:
            out.append(f'<path class="target" d="{_path(fi(loop))}" fill="none" '
                       f'stroke="{TARGET_COLOR}" stroke-width="1"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_map_svg(fmap: DiscreteMap, path, target: PolygonalDomain | None = None,
                  title: str | None = None, fold_radius: float | None = None) -> Path:
    path = Path(path)
    path.write_text(emit_svg(fmap, target=target, fold_radius=fold_radius, title=title),
                    encoding="utf-8")
    return path
