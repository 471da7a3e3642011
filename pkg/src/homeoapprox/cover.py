"""Square-cell covers of a polygonal target with overlap multiplicity <= 3.

Cells are closed axis-aligned squares laid out in brick-offset rows: squares
in a row overlap their neighbours by ``overlap_fraction`` of the side, and
consecutive rows are shifted by half a step. For overlap_fraction < 1/3 the
vertical overlap strips of adjacent rows never line up, so no point lies in
more than three squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, Polygon, box

from .errors import InvalidArgumentError, ResourceError
from .geometry import PolygonalDomain

DEFAULT_OVERLAP = 0.2
DEFAULT_MAX_CELLS = 20000
SIDE_MARGIN = 1e-9


# ------------------------------------------------------- boundary curves

def _ccw_ring(poly: Polygon) -> np.ndarray:
    ring = np.asarray(poly.exterior.coords)[:-1]
    x, y = ring[:, 0], ring[:, 1]
    if np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y) < 0:
        ring = ring[::-1]
    return ring


def polygon_kernel(ring: np.ndarray) -> np.ndarray | None:
    """Kernel (visibility region) of a CCW simple polygon, or None if empty.

    Clips the bounding box by the left half-plane of every edge.
    """
    lo, hi = ring.min(0), ring.max(0)
    poly = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        e = b - a
        side = e[0] * (poly[:, 1] - a[1]) - e[1] * (poly[:, 0] - a[0])
        out = []
        m = len(poly)
        for j in range(m):
            p, q = poly[j], poly[(j + 1) % m]
            sp_, sq = side[j], side[(j + 1) % m]
            if sp_ >= 0:
                out.append(p)
            if (sp_ >= 0) != (sq >= 0):
                t = sp_ / (sp_ - sq)
                out.append(p + t * (q - p))
        if len(out) < 3:
            return None
        poly = np.array(out)
    return poly


@dataclass(frozen=True, eq=False)
class BoundaryCurve:
    """Closed CCW polygon with arclength parametrization t in [0, length)."""

    ring: np.ndarray

    @cached_property
    def seg_start(self) -> np.ndarray:
        return self.ring

    @cached_property
    def seg_vec(self) -> np.ndarray:
        return np.roll(self.ring, -1, axis=0) - self.ring

    @cached_property
    def seg_len(self) -> np.ndarray:
        return np.hypot(self.seg_vec[:, 0], self.seg_vec[:, 1])

    @cached_property
    def cum(self) -> np.ndarray:
        return np.r_[0.0, np.cumsum(self.seg_len)]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point(self, t) -> np.ndarray:
        t = np.mod(np.asarray(t, float), self.length)
        k = np.clip(np.searchsorted(self.cum, t, side="right") - 1, 0, len(self.ring) - 1)
        frac = (t - self.cum[k]) / np.where(self.seg_len[k] > 0, self.seg_len[k], 1.0)
        return self.seg_start[k] + frac[..., None] * self.seg_vec[k]

    def nearest(self, pts, segments=None) -> np.ndarray:
        """Arclength parameter of the nearest boundary point (optionally
        restricted to a subset of segment indices)."""
        pts = np.atleast_2d(np.asarray(pts, float))
        segs = np.arange(len(self.ring)) if segments is None else np.asarray(segments)
        a = self.seg_start[segs]
        e = self.seg_vec[segs]
        ee = (e ** 2).sum(1)
        w = pts[:, None, :] - a[None, :, :]
        u = np.clip((w * e[None]).sum(-1) / np.where(ee > 0, ee, 1.0), 0, 1)
        d = np.hypot(*(w - u[..., None] * e[None]).transpose(2, 0, 1))
        j = np.argmin(d, axis=1)
        rows = np.arange(len(pts))
        return self.cum[segs[j]] + u[rows, j] * self.seg_len[segs[j]]

    def central(self, pts, center) -> np.ndarray:
        """Arclength parameter where the ray from ``center`` through each
        point first meets the boundary. Points at the center fall back to
        the nearest boundary point."""
        pts = np.atleast_2d(np.asarray(pts, float))
        c = np.asarray(center, float)
        d = pts - c
        a = self.seg_start
        e = self.seg_vec
        # solve c + lam*d = a + mu*e
        den = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
        ac = a[None] - c
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (ac[..., 0] * e[None, :, 1] - ac[..., 1] * e[None, :, 0]) / den
            mu = (ac[..., 0] * d[:, None, 1] - ac[..., 1] * d[:, None, 0]) / den
        ok = (np.abs(den) > 1e-300) & (lam > 0) & (mu >= -1e-12) & (mu <= 1 + 1e-12)
        lam = np.where(ok, lam, np.inf)
        j = np.argmin(lam, axis=1)
        rows = np.arange(len(pts))
        t = self.cum[j] + np.clip(mu[rows, j], 0, 1) * self.seg_len[j]
        bad = ~np.isfinite(lam[rows, j]) | (np.hypot(d[:, 0], d[:, 1]) == 0)
        if np.any(bad):
            t[bad] = self.nearest(pts[bad])
        return t


# ----------------------------------------------------------------- cells

@dataclass(frozen=True, eq=False)
class Cell:
    index: int
    center: tuple
    half_width: float
    kind: str                      # "internal" or "boundary"
    row: int = 0
    col: int = 0
    region_ring: np.ndarray | None = None       # CCW ring of cell ∩ target
    external_range: tuple | None = None         # (t0, t1) on the region ring

    @property
    def diameter(self) -> float:
        return 2.0 * math.sqrt(2.0) * self.half_width

    @property
    def bounds(self) -> tuple:
        cx, cy = self.center
        h = self.half_width
        return (cx - h, cy - h, cx + h, cy + h)

    @property
    def square(self) -> Polygon:
        return box(*self.bounds)

    def contains(self, pts, tol: float = 0.0, grow: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        h = self.half_width + grow + tol
        return (np.abs(pts[:, 0] - self.center[0]) <= h) & (np.abs(pts[:, 1] - self.center[1]) <= h)

    def distance(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        d = np.abs(pts - np.asarray(self.center)) - self.half_width
        return np.hypot(np.maximum(d[:, 0], 0), np.maximum(d[:, 1], 0))

    @cached_property
    def curve(self) -> BoundaryCurve:
        ring = self.region_ring if self.region_ring is not None else _ccw_ring(self.square)
        return BoundaryCurve(np.asarray(ring, float))

    @cached_property
    def star_center(self) -> np.ndarray:
        """Centroid of the kernel of the cell region (its centroid if the
        region is not star-shaped)."""
        ring = self.curve.ring
        ker = polygon_kernel(ring)
        if ker is None:
            return np.asarray(Polygon(ring).centroid.coords[0])
        pk = Polygon(ker)
        if pk.area <= 0:
            return ker.mean(0)
        return np.asarray(pk.centroid.coords[0])

    @cached_property
    def hull_curve(self) -> BoundaryCurve | None:
        """Boundary of the convex hull of the cell region, or None when the
        region is already convex."""
        poly = Polygon(self.curve.ring)
        hull = poly.convex_hull
        if hull.area - poly.area <= 1e-12 * max(hull.area, 1e-300):
            return None
        return BoundaryCurve(_ccw_ring(hull))

    def straighten(self, pts, inverse: bool = False) -> np.ndarray:
        """Radial map from the star center taking the cell region onto its
        convex hull (or back with ``inverse``). Identity for convex regions."""
        pts = np.atleast_2d(np.asarray(pts, float))
        hull = self.hull_curve
        if hull is None or not len(pts):
            return pts.copy()
        c = self.star_center
        src, dst = (hull, self.curve) if inverse else (self.curve, hull)
        a = np.hypot(*(src.point(src.central(pts, c)) - c).T)
        b = np.hypot(*(dst.point(dst.central(pts, c)) - c).T)
        factor = np.where(a > 0, b / np.where(a > 0, a, 1.0), 1.0)
        return c + (pts - c) * factor[:, None]

    @property
    def external_face(self) -> np.ndarray | None:
        if self.external_range is None:
            return None
        t0, t1 = self.external_range
        L = self.curve.length
        if t1 < t0:
            t1 += L
        ts = [t0] + [c for c in self.curve.cum[:-1] if t0 < c < t1] \
            + [c + L for c in self.curve.cum[:-1] if t0 < c + L < t1] + [t1]
        return self.curve.point(np.array(ts))

    def to_json(self) -> dict:
        d = {"index": self.index, "center": list(self.center), "half_width": self.half_width,
             "kind": self.kind, "row": self.row, "col": self.col}
        ef = self.external_face
        d["external_face"] = None if ef is None else ef.tolist()
        return d


@dataclass
class CellCover:
    cells: list
    epsilon: float
    multiplicity: int
    overlap_fraction: float = DEFAULT_OVERLAP
    side: float = 0.0
    halvings: int = 0

    def __len__(self):
        return len(self.cells)

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "multiplicity": self.multiplicity,
                "overlap_fraction": self.overlap_fraction, "side": self.side,
                "halvings": self.halvings, "cells": [c.to_json() for c in self.cells]}


def _brick_squares(bounds, side: float, overlap: float):
    x0, y0, x1, y1 = bounds
    W, H = x1 - x0, y1 - y0
    step = side * (1.0 - overlap)
    nrow = max(1, math.ceil(max(H - side, 0) / step - 1e-12) + 1)
    ncol = max(1, math.ceil(max(W - side, 0) / step - 1e-12) + 1)
    span_y = side + (nrow - 1) * step
    span_x = side + (ncol - 1) * step
    by = y0 - 0.5 * (span_y - H)
    bx = x0 - 0.5 * (span_x - W)
    out = []
    for i in range(nrow):
        cy = by + side / 2 + i * step
        if i % 2 == 0 or ncol == 1 and W <= side:
            xs = [bx + side / 2 + j * step for j in range(ncol)]
        else:
            xs = [bx + side / 2 - step / 2 + j * step for j in range(ncol + 1)]
        for j, cx in enumerate(xs):
            out.append((i, j, cx, cy))
    return out


def _external_range(ring: np.ndarray, target: PolygonalDomain, tol: float):
    """Arclength range of the ring lying on the target boundary, if it is a
    single contiguous run; returns (status, range)."""
    curve = BoundaryCurve(ring)
    mids = ring + 0.5 * curve.seg_vec
    bd = shapely.distance(target.shape.boundary, shapely.points(mids))
    on = bd <= tol
    if not on.any():
        return "none", None
    if on.all():
        return "all", None
    n = len(on)
    starts = [k for k in range(n) if on[k] and not on[k - 1]]
    if len(starts) != 1:
        return "multi", None
    k0 = starts[0]
    k = k0
    while on[k % n]:
        k += 1
    t0 = float(curve.cum[k0])
    t1 = float(curve.cum[k % n]) if k % n else 0.0
    return "single", (t0, t1)


def build_cell_cover(target: PolygonalDomain, epsilon: float,
                     overlap_fraction: float = DEFAULT_OVERLAP,
                     max_cells: int = DEFAULT_MAX_CELLS, max_side: float | None = None) -> CellCover:
    """Brick-layout cover by squares of diagonal < epsilon.

    If any boundary cell meets the target boundary in more than one arc, or
    its intersection with the target is not a single simply connected
    region, every square is halved and the layout rebuilt. ``max_side``
    optionally caps the side length below the epsilon-derived value.
    """
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    if not 0 < overlap_fraction < 1.0 / 3.0:
        raise InvalidArgumentError("overlap_fraction must lie in (0, 1/3) for multiplicity <= 3")
    side = epsilon / math.sqrt(2.0) * (1 - SIDE_MARGIN)
    if max_side is not None:
        side = min(side, max_side)
    Y = target.shape
    tol = 1e-9 * target.diameter
    halvings = 0
    while True:
        squares = _brick_squares(target.bounds, side, overlap_fraction)
        if len(squares) > max_cells:
            raise ResourceError(
                f"cover needs more than the cap of {max_cells} cells at side {side:.3g}; "
                f"increase epsilon or max_cells")
        cells, ok = [], True
        for (i, j, cx, cy) in squares:
            sq = box(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)
            inter = sq.intersection(Y)
            if inter.is_empty or inter.area <= tol * side:
                continue
            if Y.contains_properly(sq):
                cells.append(Cell(len(cells), (cx, cy), side / 2, "internal", i, j,
                                  _ccw_ring(sq), None))
                continue
            if inter.geom_type != "Polygon" or len(inter.interiors):
                ok = False
                break
            ring = _ccw_ring(inter)
            status, rng = _external_range(ring, target, tol)
            if status == "multi":
                ok = False
                break
            cells.append(Cell(len(cells), (cx, cy), side / 2, "boundary", i, j, ring,
                              rng if status == "single" else None))
        if ok:
            break
        side /= 2.0
        halvings += 1
    cover = CellCover(cells, float(epsilon), 0, overlap_fraction, side, halvings)
    cover.multiplicity = exact_max_multiplicity(cells)
    return cover


def exact_max_multiplicity(cells) -> int:
    """Maximum number of closed squares sharing a point (over the plane)."""
    if not cells:
        return 0
    b = np.array([c.bounds for c in cells])
    best = 1
    for x in np.unique(b[:, 0]):
        act = b[(b[:, 0] <= x) & (b[:, 2] >= x)]
        if len(act) <= best:
            continue
        ev = np.concatenate([np.column_stack([act[:, 1], -np.ones(len(act))]),
                             np.column_stack([act[:, 3], np.ones(len(act))])])
        # closed intervals: openings before closings at equal coordinates
        ev = ev[np.lexsort((ev[:, 1], ev[:, 0]))]
        depth = np.cumsum(-ev[:, 1])
        best = max(best, int(depth.max()))
    return best


@dataclass
class CoverVerification:
    passed: bool
    misses: np.ndarray
    histogram: dict
    max_multiplicity: int
    max_diameter: float
    problems: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"pass": self.passed, "misses": self.misses.tolist(),
                "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
                "max_multiplicity": self.max_multiplicity, "max_diameter": self.max_diameter,
                "problems": list(self.problems)}


def default_sample_points(target: PolygonalDomain, grid: int = 200) -> np.ndarray:
    x0, y0, x1, y1 = target.bounds
    xs = np.linspace(x0, x1, grid)
    ys = np.linspace(y0, y1, grid)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts = pts[target.contains(pts)]
    return np.concatenate([pts, *target.loops])


def verify_cover(cover: CellCover, target: PolygonalDomain, sample_points=None) -> CoverVerification:
    """Check coverage, multiplicity <= 3, diameters < epsilon and the
    single-arc property of boundary cells. Failures are reported, not raised."""
    pts = default_sample_points(target)
    if sample_points is not None:
        pts = np.concatenate([pts, np.asarray(sample_points, float).reshape(-1, 2)])
    problems = []
    tol = 1e-12 * max(target.diameter, 1.0)
    if cover.cells:
        cnt = np.zeros(len(pts), np.int64)
        for c in cover.cells:
            cnt += c.contains(pts, tol=tol)
    else:
        cnt = np.zeros(len(pts), np.int64)
    misses = pts[cnt == 0]
    if len(misses):
        problems.append(f"{len(misses)} sample points not covered")
    hist = {int(k): int(v) for k, v in zip(*np.unique(cnt, return_counts=True))}
    mult = max(exact_max_multiplicity(cover.cells), int(cnt.max()) if len(cnt) else 0)
    if mult > 3:
        problems.append(f"multiplicity {mult} exceeds 3")
    maxd = max((c.diameter for c in cover.cells), default=0.0)
    if maxd >= cover.epsilon:
        problems.append(f"cell diameter {maxd!r} is not below epsilon {cover.epsilon!r}")
    for c in cover.cells:
        if c.kind == "internal" and not target.shape.contains_properly(c.square):
            problems.append(f"internal cell {c.index} is not inside the target")
        if c.kind == "boundary":
            inter = c.square.intersection(target.shape.boundary)
            if isinstance(inter, (LineString, MultiLineString)):
                merged = shapely.line_merge(inter) if isinstance(inter, MultiLineString) else inter
                if isinstance(merged, MultiLineString) and len(merged.geoms) > 1:
                    problems.append(f"boundary cell {c.index} meets the boundary in "
                                    f"{len(merged.geoms)} arcs")
    return CoverVerification(not problems, misses, hist, mult, maxd, problems)
