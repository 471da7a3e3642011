"""Turn a monotone discrete map into a discrete homeomorphism.

One pass over a square-cell cover of the target. For each cell:

1. pre-cell: the largest edge-connected set of triangles touching the
   open (extended) cell, with holes filled and pinch vertices split;
2. trace repair: the pre-cell boundary loop is pushed onto the boundary of
   cell ∩ target and made cyclically monotone, collapsed runs spread out;
3. replacement: coordinate-wise p-harmonic solve inside the pre-cell with
   the repaired loop as Dirichlet data.

A step that would fold a triangle is redone on a grown pre-cell, then with
fallback settings, and any fold left is cleared by moving single vertices
into the region where their triangles are positive. A step is dropped
when the map is already positively oriented around the pre-cell and the
replacement would only raise the energy. Everything that moves is measured
and reported.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import shapely
from shapely.geometry import Polygon
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .cover import Cell, CellCover, build_cell_cover
from .diagnostics import check_injectivity, check_monotone_fibers
from .errors import (ConsistencyError, InvalidArgumentError, NonConvergenceError,
                     PreconditionError)
from .functionals import basis_gradients, w1p_distance
from .geometry import (DiscreteMap, PolygonalDomain, shoelace, signed_areas, trace_loops,
                       triangle_components)
from .psolver import PSolveProblem, SolverConfig, solve_scalar_p_dirichlet
from .svg import write_map_svg

GUARD_KEEP = 1e-2       # a guarded move keeps at least this share of a triangle's area
GUARD_HALVINGS = 30


# ---------------------------------------------------------------- config

@dataclass
class ChainConfig:
    p: float = 2.0
    epsilon: float = 0.3
    overlap_fraction: float = 0.2
    solver: SolverConfig = field(default_factory=SolverConfig)
    guard: bool = False
    side_slope: float = 0.5
    lateral_extension: bool = False
    precell_rule: str = "touching"
    check_monotone: bool = True
    monotone_grid: int = 40
    max_cells: int = 20000
    fallbacks: bool = True
    grow_rounds: int = 4
    untangle: bool = True
    keep_homeomorphic: bool = True

    def __post_init__(self):
        if not self.p > 1:
            raise InvalidArgumentError(f"exponent p must exceed 1, got {self.p}")
        if not self.epsilon > 0:
            raise InvalidArgumentError("epsilon must be positive")
        if self.solver.p != self.p:
            self.solver = SolverConfig.from_dict({**self.solver.to_dict(), "p": self.p})

    @classmethod
    def from_dict(cls, d: dict | None) -> "ChainConfig":
        d = dict(d or {})
        known = {"p", "epsilon", "cover", "solver", "repair", "precondition"}
        extra = set(d) - known
        if extra:
            raise InvalidArgumentError(f"unknown chain config keys: {sorted(extra)}")
        p = float(d.get("p", 2.0))
        cov = d.get("cover") or {}
        rep = d.get("repair") or {}
        pre = d.get("precondition") or {}
        solver = SolverConfig.from_dict({**(d.get("solver") or {}), "p": p})
        return cls(p=p, epsilon=float(d.get("epsilon", 0.3)),
                   overlap_fraction=float(cov.get("overlap_fraction", 0.2)),
                   max_cells=int(cov.get("max_cells", 20000)),
                   solver=solver, guard=bool(rep.get("guard", False)),
                   side_slope=float(rep.get("side_slope", 0.5)),
                   lateral_extension=bool(rep.get("lateral_extension", False)),
                   precell_rule=str(rep.get("precell_rule", "touching")),
                   fallbacks=bool(rep.get("fallbacks", True)),
                   grow_rounds=int(rep.get("grow_rounds", 4)),
                   untangle=bool(rep.get("untangle", True)),
                   keep_homeomorphic=bool(rep.get("keep_homeomorphic", True)),
                   check_monotone=bool(pre.get("check", True)),
                   monotone_grid=int(pre.get("sample_grid", 40)))

    def to_dict(self) -> dict:
        return {"p": self.p, "epsilon": self.epsilon,
                "cover": {"overlap_fraction": self.overlap_fraction, "max_cells": self.max_cells},
                "solver": self.solver.to_dict(),
                "repair": {"guard": self.guard, "side_slope": self.side_slope,
                           "lateral_extension": self.lateral_extension,
                           "precell_rule": self.precell_rule, "fallbacks": self.fallbacks,
                           "grow_rounds": self.grow_rounds, "untangle": self.untangle,
                           "keep_homeomorphic": self.keep_homeomorphic},
                "precondition": {"check": self.check_monotone, "sample_grid": self.monotone_grid}}


def _open_target_mask(target: PolygonalDomain, pts: np.ndarray, tol: float) -> np.ndarray:
    inside = shapely.contains_xy(target.shape, pts[:, 0], pts[:, 1])
    if not inside.any():
        return inside
    d = shapely.distance(target.shape.boundary, shapely.points(pts[inside]))
    out = inside.copy()
    out[np.flatnonzero(inside)[d <= tol]] = False
    return out


def _tol(fmap: DiscreteMap) -> float:
    img = fmap.images
    span = float(np.hypot(*(img.max(0) - img.min(0)))) if len(img) else 1.0
    return 1e-12 * max(span, 1.0)


# -------------------------------------------------------------- pre-cells

@dataclass
class PreCell:
    cell_index: int
    kind: str
    triangles: np.ndarray
    boundary_vertices: np.ndarray           # outer loop, counterclockwise in the source
    interior_vertices: np.ndarray
    other_loops: tuple = ()
    pinches_split: int = 0
    holes_filled: int = 0

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def __len__(self):
        return len(self.triangles)

    def to_json(self) -> dict:
        return {"cell_index": self.cell_index, "kind": self.kind,
                "triangles": self.triangles.tolist(),
                "boundary_vertices": self.boundary_vertices.tolist(),
                "interior_vertices": self.interior_vertices.tolist(),
                "other_loops": [list(map(int, l)) for l in self.other_loops],
                "pinches_split": self.pinches_split, "holes_filled": self.holes_filled}


def _largest_component(mesh, tris: np.ndarray) -> np.ndarray:
    comps = triangle_components(mesh, tris)
    if not comps:
        return np.empty(0, np.int64)
    best = max(comps, key=lambda c: (len(c), -int(c[0])))
    return best


def _fill_holes(mesh, tris: np.ndarray) -> tuple[np.ndarray, int]:
    """Add complement components that touch neither the mesh boundary nor
    anything but the set itself."""
    mask = np.zeros(mesh.n_triangles, bool)
    mask[tris] = True
    rest = np.flatnonzero(~mask)
    if not rest.size:
        return tris, 0
    on_boundary = np.diff(mesh.triangle_adjacency.indptr) < 3
    filled = 0
    for comp in triangle_components(mesh, rest):
        if not on_boundary[comp].any():
            mask[comp] = True
            filled += 1
    return np.flatnonzero(mask), filled


def _boundary_directed(mesh, tris: np.ndarray) -> np.ndarray:
    t = mesh.triangles[tris]
    d = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    n = mesh.n_vertices
    fwd = d[:, 0] * n + d[:, 1]
    rev = d[:, 1] * n + d[:, 0]
    return d[~np.isin(fwd, rev)]


def _split_pinches(mesh, tris: np.ndarray) -> tuple[np.ndarray, int]:
    """Remove all but the largest triangle fan at each pinch vertex (a vertex
    with more than two boundary edges of the set)."""
    bd = _boundary_directed(mesh, tris)
    if not len(bd):
        return tris, 0
    cnt = np.bincount(bd[:, 0], minlength=mesh.n_vertices)
    pinches = np.flatnonzero(cnt > 1)
    if not pinches.size:
        return tris, 0
    mask = np.zeros(mesh.n_triangles, bool)
    mask[tris] = True
    VT = mesh.vertex_triangles
    A = mesh.triangle_adjacency
    for v in pinches:
        fan = VT.indices[VT.indptr[v]:VT.indptr[v + 1]]
        fan = np.sort(fan[mask[fan]])
        if len(fan) < 2:
            continue
        # fan components: neighbours sharing an edge through v
        sub = A[fan][:, fan].tocoo()
        tv = mesh.triangles[fan]
        keep_edge = []
        for a, b in zip(sub.row, sub.col):
            shared = np.intersect1d(tv[a], tv[b])
            keep_edge.append(v in shared)
        keep_edge = np.asarray(keep_edge, bool)
        G = coo_matrix((np.ones(keep_edge.sum()), (sub.row[keep_edge], sub.col[keep_edge])),
                       shape=(len(fan), len(fan)))
        nc, lab = connected_components(G, directed=False)
        if nc < 2:
            continue
        sizes = np.bincount(lab)
        firsts = np.array([fan[lab == k].min() for k in range(nc)])
        best = max(range(nc), key=lambda k: (sizes[k], -firsts[k]))
        mask[fan[lab != best]] = False
    return np.flatnonzero(mask), len(pinches)


PRECELL_RULES = ("closed", "touching")


def precell_vertex_mask(fmap: DiscreteMap, cell: Cell, target: PolygonalDomain | None = None,
                        lateral_extension: bool = False, open_cell: bool = False) -> np.ndarray:
    """Vertices whose image lies in the discrete cell.

    For a boundary cell the square is extended by one half-width past the
    external face: images outside the closed target count as inside when
    they lie within the dilated square. With ``lateral_extension`` images
    on the target boundary beside the cell count as well.
    """
    img = fmap.images
    tol = _tol(fmap)
    inside = cell.contains(img, tol=-tol if open_cell else tol)
    if cell.kind == "boundary" and target is not None:
        grown = cell.contains(img, tol=-tol if open_cell else tol, grow=cell.half_width) & ~inside
        if grown.any():
            idx = np.flatnonzero(grown)
            pts = img[idx]
            if lateral_extension:
                off = ~_open_target_mask(target, pts, tol)
            else:
                off = ~target.contains(pts, tol=tol)
            inside[idx[off]] = True
    return inside


def pinned_vertices(fmap: DiscreteMap, target: PolygonalDomain | None) -> np.ndarray:
    """Mesh-boundary vertices whose image is on or outside the target boundary."""
    mesh = fmap.mesh
    out = np.zeros(mesh.n_vertices, bool)
    if target is None:
        return out
    bv = np.flatnonzero(mesh.is_boundary_vertex)
    out[bv] = ~_open_target_mask(target, fmap.images[bv], _tol(fmap))
    return out


def precell_triangles(fmap: DiscreteMap, cell: Cell, target: PolygonalDomain | None = None,
                      lateral_extension: bool = False, rule: str = "closed") -> np.ndarray:
    """Candidate pre-cell triangles.

    rule "closed": all three vertex images in the closed (extended) cell.
    rule "touching": some vertex image in the open (extended) cell, so that
    every vertex imaged inside the cell is an interior vertex of the set;
    triangles with a pinned vertex outside the closed cell are left out so
    the repair never drags boundary images off the target boundary.
    """
    if rule not in PRECELL_RULES:
        raise InvalidArgumentError(f"unknown pre-cell rule {rule!r}; choose from {PRECELL_RULES}")
    t = fmap.mesh.triangles
    closed = precell_vertex_mask(fmap, cell, target, lateral_extension)
    if rule == "closed":
        return np.flatnonzero(closed[t].all(1))
    m = precell_vertex_mask(fmap, cell, target, lateral_extension, open_cell=True)
    blocked = blocked_vertices(fmap, cell, target, closed)
    return np.flatnonzero(m[t].any(1) & ~blocked[t].any(1))


def blocked_vertices(fmap: DiscreteMap, cell: Cell, target: PolygonalDomain | None,
                     closed: np.ndarray | None = None) -> np.ndarray:
    """Pinned vertices a pre-cell of ``cell`` must not contain: those imaged
    outside the closed cell, except beside the external face of a boundary
    cell, where boundary images can slide along the face."""
    if closed is None:
        closed = precell_vertex_mask(fmap, cell, target)
    blocked = pinned_vertices(fmap, target) & ~closed
    if blocked.any() and cell.kind == "boundary" and cell.external_range is not None:
        idx = np.flatnonzero(blocked)
        d = shapely.distance(shapely.linestrings(cell.external_face),
                             shapely.points(fmap.images[idx]))
        blocked[idx[d <= cell.half_width]] = False
    return blocked


def compute_precell(fmap: DiscreteMap, cell: Cell, target: PolygonalDomain | None = None,
                    lateral_extension: bool = False, rule: str = "closed") -> PreCell:
    tris = precell_triangles(fmap, cell, target, lateral_extension, rule)
    return _assemble_precell(fmap.mesh, cell, tris)


def grow_precell(fmap: DiscreteMap, precell: PreCell, cell: Cell, vertices,
                 target: PolygonalDomain | None = None) -> PreCell:
    """Add the triangles around ``vertices`` to the pre-cell and clean up
    again. Triangles with a blocked vertex stay out."""
    mesh = fmap.mesh
    VT = mesh.vertex_triangles
    vs = np.unique(np.asarray(vertices, np.int64))
    extra = np.unique(np.concatenate([VT.indices[VT.indptr[v]:VT.indptr[v + 1]] for v in vs]))
    blocked = blocked_vertices(fmap, cell, target)
    blocked[precell.boundary_vertices] = False
    blocked[precell.interior_vertices] = False
    extra = extra[~blocked[mesh.triangles[extra]].any(1)]
    tris = np.unique(np.concatenate([precell.triangles, extra]))
    return _assemble_precell(mesh, cell, tris)


def _assemble_precell(mesh, cell: Cell, tris: np.ndarray) -> PreCell:
    """Largest component, holes filled, pinches split, loops traced."""
    e = np.empty(0, np.int64)
    if not tris.size:
        return PreCell(cell.index, cell.kind, e, e, e)
    tris = _largest_component(mesh, tris)
    tris, filled = _fill_holes(mesh, tris)
    pinches = 0
    for _ in range(100):
        tris2, k = _split_pinches(mesh, tris)
        if not k:
            break
        pinches += k
        tris = _largest_component(mesh, tris2)
        tris, f = _fill_holes(mesh, tris)
        filled += f
    bd = _boundary_directed(mesh, tris)
    loops = trace_loops(bd)
    src = mesh.vertices
    loops.sort(key=lambda l: (-shoelace(src[l]), l[0]))
    outer = np.asarray(loops[0], np.int64)
    others = tuple(np.asarray(l, np.int64) for l in loops[1:])
    allv = np.unique(mesh.triangles[tris])
    bverts = np.unique(bd)
    interior = np.setdiff1d(allv, bverts, assume_unique=True)
    return PreCell(cell.index, cell.kind, tris, outer, interior, others, pinches, filled)


# ----------------------------------------------------------- trace repair

@dataclass
class RepairResult:
    values: np.ndarray
    magnitude: float
    parameters: np.ndarray
    mode: str
    clamped: int = 0
    pooled: int = 0
    spread: int = 0

    def summary(self) -> dict:
        return {"magnitude": self.magnitude, "mode": self.mode, "clamped": self.clamped,
                "pooled": self.pooled, "spread": self.spread}


def isotonic(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit (pool adjacent violators)."""
    y = np.asarray(y, float)
    w = np.ones_like(y) if w is None else np.asarray(w, float)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v1, w1, s1 = vals.pop(), wts.pop(), sizes.pop()
            v0, w0, s0 = vals.pop(), wts.pop(), sizes.pop()
            ww = w0 + w1
            vals.append((v0 * w0 + v1 * w1) / ww)
            wts.append(ww)
            sizes.append(s0 + s1)
    return np.repeat(vals, sizes)


def _runs(tau: np.ndarray, tol: float):
    """Maximal index ranges [a, b] of equal values."""
    out, a = [], 0
    for i in range(1, len(tau) + 1):
        if i == len(tau) or abs(tau[i] - tau[a]) > tol:
            out.append((a, i - 1))
            a = i
    return out


def _spread_block(tau: np.ndarray, lo: float, hi: float, edge_w: np.ndarray, edge_before: float,
                  force_lo: bool, force_hi: bool, tol: float, cyclic_length: float | None = None,
                  raw: np.ndarray | None = None):
    """Spread runs of equal values over the space to their neighbours.

    ``edge_w[i]`` is the source length of the loop edge leaving sequence
    position i; ``edge_before`` is the edge entering position 0. Runs of one element
    only move when they sit on a forced end of the block. With ``raw`` (the
    values before pooling), a run whose raw values differ stays inside their
    span, so undoing a backtrack moves no vertex farther than the backtrack.
    """
    tau = tau.copy()
    runs = _runs(tau, tol)
    spread = 0
    for ri, (a, b) in enumerate(runs):
        m = tau[a]
        at_lo = abs(m - lo) <= tol
        at_hi = abs(m - hi) <= tol
        if a == b and not (at_lo and force_lo) and not (at_hi and force_hi):
            continue
        if ri > 0:
            left = m - 0.5 * (m - tau[runs[ri - 1][0]])
        elif cyclic_length is not None and len(runs) > 1:
            left = m - 0.5 * (m - (tau[runs[-1][0]] - cyclic_length))
        elif cyclic_length is not None:
            left = m - 0.5 * cyclic_length
        else:
            left = lo
        if ri < len(runs) - 1:
            right = m + 0.5 * (tau[runs[ri + 1][0]] - m)
        elif cyclic_length is not None and len(runs) > 1:
            right = m + 0.5 * (tau[runs[0][0]] + cyclic_length - m)
        elif cyclic_length is not None:
            right = m + 0.5 * cyclic_length
        else:
            right = hi
        if cyclic_length is None:
            left, right = max(left, lo), min(right, hi)
            if at_lo:
                left = m
            if at_hi:
                right = m
        if raw is not None and a < b:
            r_lo, r_hi = float(raw[a:b + 1].min()), float(raw[a:b + 1].max())
            if r_hi - r_lo > tol:
                left, right = max(left, r_lo), min(right, r_hi)
        w_in = edge_w[a:b]
        pad_l = 0.5 * (edge_w[a - 1] if a > 0 else edge_before)
        pad_r = 0.5 * edge_w[b]
        c = pad_l + np.r_[0.0, np.cumsum(w_in)]
        total = c[-1] + pad_r
        tau[a:b + 1] = left + (right - left) * c / total
        spread += b - a + 1
    return tau, spread


def _min_slope_fit(tau: np.ndarray, lo: float, hi: float, edge_w: np.ndarray,
                   edge_before: float, beta: float) -> np.ndarray:
    """Nondecreasing fit in (lo, hi) whose steps are at least beta times the
    arclength-proportional share of each loop edge.

    Subtracting the minimum slope turns the constraint into plain
    monotonicity, so this is an isotonic fit on shifted data.
    """
    c = 0.5 * edge_before + np.r_[0.0, np.cumsum(edge_w[:-1])]
    C = c[-1] + 0.5 * edge_w[-1]
    mu = beta * (hi - lo) / C
    fit = isotonic(tau - mu * c)
    return np.clip(fit, lo, hi - mu * C) + mu * c


def _project(curve, cell: Cell, pts: np.ndarray, center) -> np.ndarray:
    """Boundary parameter for each point: central projection from the star
    center for points inside the region, nearest boundary point outside."""
    t = curve.central(pts, center)
    if len(pts):
        outside = ~shapely.contains_xy(Polygon(curve.ring), pts[:, 0], pts[:, 1])
        if outside.any():
            t[outside] = curve.nearest(pts[outside])
    return t


def repair_boundary_trace(values, cell: Cell, external=None, weights=None,
                          epsilon: float | None = None, side_slope: float = 0.0) -> RepairResult:
    """Project a loop of image values onto ∂(cell ∩ target) and make it an
    injective, cyclically monotone trace.

    values: (k, 2) images of the pre-cell boundary loop in counterclockwise
        source order.
    external: optional mask of loop vertices that are mesh-boundary vertices
        with images on the target boundary; they go to the nearest point of
        the cell's external face. All others are centrally projected from the
        star center of the region and kept off the external face.
    weights: source lengths of loop edges (i, i+1); uniform by default.
    epsilon: consistency radius (defaults to the cell diameter).
    side_slope: for boundary cells, the internal vertices are spaced at
        least side_slope times their arclength-proportional share along the
        non-external part of the region boundary (0 disables it). Collapsed
        runs squeezed against the external face get room this way.
    """
    if not 0 <= side_slope < 1:
        raise InvalidArgumentError("side_slope must lie in [0, 1)")
    vals = np.asarray(values, float).reshape(-1, 2)
    k = len(vals)
    if k == 0:
        return RepairResult(vals.copy(), 0.0, np.empty(0), "empty")
    eps = cell.diameter if epsilon is None else float(epsilon)
    far = cell.distance(vals)
    if np.any(far > eps):
        i = int(np.argmax(far))
        raise ConsistencyError(f"loop value {i} lies {far[i]!r} from cell {cell.index}, "
                               f"more than {eps!r}; the pre-cell is inconsistent")
    ext = np.zeros(k, bool) if external is None else np.asarray(external, bool).copy()
    w = np.ones(k) if weights is None else np.asarray(weights, float)
    if w.shape != (k,) or np.any(w <= 0):
        raise InvalidArgumentError("weights must be positive, one per loop edge")
    curve = cell.curve
    L = curve.length
    tol = 1e-12 * max(L, 1.0)
    center = cell.star_center

    use_split = cell.external_range is not None and ext.any() and not ext.all()
    clamped = 0
    if use_split:
        # keep only the longest contiguous run of external vertices
        starts = [i for i in range(k) if ext[i] and not ext[i - 1]]
        lens = []
        for s in starts:
            n = 0
            while ext[(s + n) % k] and n < k:
                n += 1
            lens.append(n)
        best = max(range(len(starts)), key=lambda j: (lens[j], -starts[j]))
        s0, n0 = starts[best], lens[best]
        ext[:] = False
        ext[(s0 + np.arange(n0)) % k] = True
        order = (s0 + n0 + np.arange(k)) % k           # first internal vertex after the run
        t0, t1 = cell.external_range
        LE = (t1 - t0) % L
        LS = L - LE
        e_ord = ext[order]
        tau = np.empty(k)
        tb = _project(curve, cell, vals[order][~e_ord], center)
        tb = (tb - t1) % L
        over = tb > LS + tol
        clamped += int(over.sum())
        tb[over] = np.where(tb[over] - LS < L - tb[over], LS, 0.0)
        tau[~e_ord] = np.minimum(tb, LS)
        segs = [j for j in range(len(curve.ring))
                if (curve.cum[j] - t0) % L < LE - tol or (LE >= L - tol)]
        ta = curve.nearest(vals[order][e_ord], segments=np.asarray(segs))
        s = (ta - t0) % L
        s[s > LE + 0.5 * LS] = 0.0
        tau[e_ord] = LS + np.clip(s, 0.0, LE)
        origin = t1
        tau_in = tau.copy()
        fit = isotonic(tau)
        pooled = int(np.sum(np.abs(fit - tau) > tol))
        fit[~e_ord] = np.clip(fit[~e_ord], 0.0, LS)
        fit[e_ord] = np.clip(fit[e_ord], LS, L)
        ew = w[order]                                  # edge order[i] -> order[i+1]
        nb = int((~e_ord).sum())
        if side_slope > 0 and nb:
            fb = _min_slope_fit(tau[:nb], 0.0, LS, ew[:nb], ew[-1], side_slope)
            sp1 = int(np.sum(np.abs(fb - tau[:nb]) > tol))
        else:
            fb, sp1 = _spread_block(fit[:nb], 0.0, LS, ew[:nb], ew[-1], True, True, tol,
                                    raw=tau[:nb])
        fa, sp2 = _spread_block(fit[nb:], LS, L, ew[nb:], ew[nb - 1], True, True, tol,
                                raw=tau[nb:])
        fit = np.r_[fb, fa]
        spread = sp1 + sp2
        mode = "split"
    else:
        t = _project(curve, cell, vals, center)
        if cell.external_range is not None and ext.all():
            t_ext = curve.nearest(vals)
            t = t_ext
        jumps = np.roll(t, -1) - t
        i = int(np.argmin(jumps)) if k > 1 else 0
        order = (i + 1 + np.arange(k)) % k
        tau = t[order]
        tau_in = tau.copy()
        fit = isotonic(tau)
        pooled = int(np.sum(np.abs(fit - tau) > tol))
        fit = np.clip(fit, 0.0, L)
        fit, spread = _spread_block(fit, 0.0, L, w[order], w[order][-1], False, False, tol,
                                    cyclic_length=L, raw=tau_in)
        origin = 0.0
        mode = "cyclic"

    out = np.empty_like(vals)
    pts = curve.point((fit + origin) % L)
    # leave untouched vertices bit-identical
    same = (np.abs(fit - tau_in) <= tol) & (np.hypot(*(pts - vals[order]).T) <= 1e3 * tol)
    pts[same] = vals[order][same]
    out[order] = pts
    params = np.empty(k)
    params[order] = (fit + origin) % L
    mag = float(np.max(np.hypot(*(out - vals).T)))
    return RepairResult(out, mag, params, mode, clamped, pooled, spread)


# ------------------------------------------------------------ replacement

@dataclass
class StepRecord:
    cell_index: int
    kind: str
    precell_size: int
    energy_before: float = 0.0
    energy_after: float = 0.0
    repair_energy_delta: float = 0.0
    sup_displacement: float = 0.0
    boundary_repair_magnitude: float = 0.0
    cell_diameter: float = 0.0
    step_bound: float = 0.0
    guard_scaled: int = 0
    rkc_violations: int = 0
    rkc_violation: bool = False
    solver_iterations: int = 0
    solver_converged: bool = True
    repair: dict = field(default_factory=dict)
    skipped: bool = False
    attempts: int = 1
    grown: int = 0
    damaged: int = 0
    untangle_moves: int = 0
    untangle_energy_delta: float = 0.0
    moved_outside: int = 0
    kept: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def _local_energy(mesh, images: np.ndarray, tris: np.ndarray, p: float) -> np.ndarray:
    G = basis_gradients(mesh)[tris]
    vals = images[mesh.triangles[tris]]
    gu = np.einsum("tij,ti->tj", G, vals[:, :, 0])
    gv = np.einsum("tij,ti->tj", G, vals[:, :, 1])
    su, sv = (gu ** 2).sum(1), (gv ** 2).sum(1)
    if p != 2:
        su, sv = su ** (p / 2), sv ** (p / 2)
    return mesh.areas[tris] * (su + sv)


def _guard_moves(mesh, images: np.ndarray, loop: np.ndarray, new: np.ndarray,
                 protected: np.ndarray) -> int:
    """Move loop vertices toward their repaired positions, in loop order, by
    the largest step 1, 1/2, ... that keeps every positive protected
    triangle positive. Works in place; returns how many moves were scaled."""
    VT = mesh.vertex_triangles
    scaled = 0
    for v, target in zip(loop, new):
        old = images[v].copy()
        if np.array_equal(old, target):
            continue
        ts = VT.indices[VT.indptr[v]:VT.indptr[v + 1]]
        ts = ts[protected[ts]]
        if ts.size:
            a0 = signed_areas(images, mesh.triangles[ts])
            ts = ts[a0 > 0]
            a0 = a0[a0 > 0]
        alpha = 1.0
        for _ in range(GUARD_HALVINGS + 1):
            images[v] = old + alpha * (target - old)
            if not ts.size or np.all(signed_areas(images, mesh.triangles[ts]) >= GUARD_KEEP * a0):
                break
            alpha *= 0.5
        else:
            images[v] = old
            alpha = 0.0
        if alpha < 1.0:
            scaled += 1
    return scaled


def replace_on_precell(fmap: DiscreteMap, precell: PreCell, cell: Cell, p: float = 2.0,
                       config: ChainConfig | None = None,
                       target: PolygonalDomain | None = None) -> tuple[DiscreteMap, StepRecord]:
    """Repair the boundary trace of a pre-cell and re-solve its interior.

    Vertices outside the pre-cell keep their images bit for bit, except for
    loop vertices moved by the repair. Raises NonConvergenceError from the
    solver.
    """
    if precell.empty:
        raise InvalidArgumentError("pre-cell is empty")
    cfg = config or ChainConfig(p=p)
    mesh = fmap.mesh
    old = np.array(fmap.images, float)
    img = old.copy()
    loop = precell.boundary_vertices
    tris = precell.triangles
    tol = _tol(fmap)

    ext = np.zeros(len(loop), bool)
    if cell.kind == "boundary" and target is not None:
        onb = mesh.is_boundary_vertex[loop]
        if onb.any():
            ext[onb] = ~_open_target_mask(target, img[loop[onb]], tol)
    src = mesh.vertices
    w = np.hypot(*(src[np.roll(loop, -1)] - src[loop]).T)
    # loop vertices of a touching pre-cell sit up to one image edge outside the cell
    T = img[mesh.triangles[tris]]
    reach = float(np.max(np.hypot(*(T - np.roll(T, 1, axis=1)).reshape(-1, 2).T)))
    rep = repair_boundary_trace(img[loop], cell, external=ext, weights=w,
                                epsilon=max(cfg.epsilon, cell.diameter) + reach,
                                side_slope=cfg.side_slope)

    free = precell.interior_vertices
    is_free = np.zeros(mesh.n_vertices, bool)
    is_free[free] = True
    solved = np.zeros(mesh.n_triangles, bool)
    solved[tris[is_free[mesh.triangles[tris]].any(1)]] = True

    # triangles whose energy can change in this step
    VT = mesh.vertex_triangles
    touched_v = np.concatenate([loop, free])
    touched = np.unique(np.concatenate(
        [VT.indices[VT.indptr[v]:VT.indptr[v + 1]] for v in touched_v]))
    e_before = _local_energy(mesh, img, touched, cfg.p)

    if cfg.guard:
        scaled = _guard_moves(mesh, img, loop, rep.values, ~solved)
    else:
        img[loop] = rep.values
        scaled = 0
    e_repaired = _local_energy(mesh, img, touched, cfg.p)

    iters, converged = 0, True
    if free.size:
        bnd = np.setdiff1d(np.unique(mesh.triangles[tris]), free, assume_unique=True)
        # solve on the convex hull of the region, then map the interior back
        work = img.copy()
        work[bnd] = cell.straighten(img[bnd])
        work[free] = cell.straighten(img[free])
        for c in range(2):
            prob = PSolveProblem(mesh, free, bnd, work[bnd, c], p=cfg.p,
                                 tolerance=cfg.solver.tolerance,
                                 max_iterations=cfg.solver.max_iterations,
                                 regularization_delta=cfg.solver.delta, triangles=tris,
                                 fast_path_p2=cfg.solver.fast_path_p2)
            x, r = solve_scalar_p_dirichlet(prob, work[free, c])
            iters += r.iterations
            converged &= r.converged
            work[free, c] = x
        img[free] = cell.straighten(work[free], inverse=True)
    e_after = _local_energy(mesh, img, touched, cfg.p)

    band = 1e-12 * (float(np.hypot(*(img.max(0) - img.min(0)))) / mesh.scale) ** 2
    st = np.flatnonzero(solved)
    jac = signed_areas(img, mesh.triangles[st]) / mesh.areas[st]
    bad = int(np.sum(jac <= band))
    disp = float(np.max(np.hypot(*(img - old).T)))
    before = math.fsum(e_before)
    rec = StepRecord(
        cell_index=cell.index, kind=cell.kind, precell_size=len(tris),
        energy_before=before,
        energy_after=math.fsum(e_after),
        repair_energy_delta=math.fsum(e_repaired) - before,
        sup_displacement=disp,
        boundary_repair_magnitude=float(np.max(np.hypot(*(img[loop] - old[loop]).T))),
        cell_diameter=cell.diameter, guard_scaled=scaled, rkc_violations=bad,
        rkc_violation=bad > 0, solver_iterations=iters, solver_converged=bool(converged),
        repair=rep.summary())
    # displacement bound: diameter of the discrete cell plus the repair
    reach = cell.diameter * (2.0 if cell.kind == "boundary" else 1.0)
    rec.step_bound = reach + rec.boundary_repair_magnitude
    return fmap.with_images(img), rec


# ------------------------------------------------------------------ chain

@dataclass
class ChainReport:
    epsilon: float
    p: float
    multiplicity: int
    n_cells: int
    steps: list = field(default_factory=list)
    initial_energy: float = 0.0
    final_energy: float = 0.0
    final_sup_distance_to_input: float = 0.0
    total_repair_magnitude: float = 0.0
    total_repair_energy_delta: float = 0.0
    sup_bound: float = 0.0
    sup_bound_holds: bool = False
    energy_monotone_modulo_repair: bool = True
    jacobian_census: dict = field(default_factory=dict)
    injective: bool = False
    overlap_witnesses: int = 0
    rkc_violations: int = 0
    royden_distance: float | None = None
    aborted: bool = False
    abort_reason: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["steps"] = [s if isinstance(s, dict) else s.to_json() for s in self.steps]
        return d


class ChainAbortedError(NonConvergenceError):
    """A step's solver failed. ``report`` is the partial ChainReport and
    ``map`` the last completed map."""

    def __init__(self, message: str, report: ChainReport, fmap: DiscreteMap):
        super().__init__(message, report)
        self.map = fmap


def _energy_total(mesh, images, p) -> float:
    return math.fsum(_local_energy(mesh, images, np.arange(mesh.n_triangles), p))


def check_chain_precondition(fmap: DiscreteMap, target: PolygonalDomain, config: ChainConfig):
    tol = 1e-9 * max(target.diameter, 1.0)
    out = np.flatnonzero(~target.contains(fmap.images, tol=tol))
    if out.size:
        raise PreconditionError(
            f"{out.size} vertex images lie outside the target (first: vertex {int(out[0])})",
            out.tolist())
    if config.check_monotone:
        rep = check_monotone_fibers(fmap, target, sample_grid=config.monotone_grid)
        if not rep.passed:
            pts = [tuple(map(float, x)) for x in rep.failing_points]
            raise PreconditionError(
                f"input map is not discrete-monotone: {len(pts)} sampled fibers are disconnected",
                pts)


def _damaged(mesh, before: np.ndarray, after: np.ndarray, band: float) -> tuple[np.ndarray, int]:
    """Triangles turned non-positive by a step, and how many non-positive
    triangles the step leaves among those it touched."""
    moved = np.flatnonzero(np.any(before != after, axis=1))
    if not moved.size:
        return np.empty(0, np.int64), 0
    VT = mesh.vertex_triangles
    ts = np.unique(np.concatenate([VT.indices[VT.indptr[v]:VT.indptr[v + 1]] for v in moved]))
    tri = mesh.triangles[ts]
    a0 = signed_areas(before, tri) / mesh.areas[ts]
    a1 = signed_areas(after, tri) / mesh.areas[ts]
    return ts[(a0 > band) & (a1 <= band)], int(np.sum(a1 <= band))


UNTANGLE_ROUNDS = 20


def _fan_halfplanes(mesh, images: np.ndarray, v: int):
    """Rows (a, b) with a @ x <= b iff every triangle around v has
    nonnegative signed area when v is placed at x."""
    VT = mesh.vertex_triangles
    ts = VT.indices[VT.indptr[v]:VT.indptr[v + 1]]
    tri = mesh.triangles[ts]
    k = np.argmax(tri == v, axis=1)
    rows = np.arange(len(ts))
    pa = images[tri[rows, (k + 1) % 3]]
    pb = images[tri[rows, (k + 2) % 3]]
    # cross(pa - x, pb - x) >= 0  <=>  A @ x <= c
    A = np.column_stack([pb[:, 1] - pa[:, 1], pa[:, 0] - pb[:, 0]])
    c = pa[:, 0] * pb[:, 1] - pa[:, 1] * pb[:, 0]
    return A, c


def _feasible_point(A: np.ndarray, c: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Centroid of {A x <= c} clipped to the box [lo, hi], or None when the
    region has no interior."""
    poly = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    for a, ci in zip(A, c):
        side = ci - poly @ a
        keep = side >= 0
        if keep.all():
            continue
        if not keep.any():
            return None
        nxt = np.roll(poly, -1, axis=0)
        snxt = np.roll(side, -1)
        out = []
        for j in range(len(poly)):
            if keep[j]:
                out.append(poly[j])
            if keep[j] != (snxt[j] >= 0):
                out.append(poly[j] + side[j] / (side[j] - snxt[j]) * (nxt[j] - poly[j]))
        if len(out) < 3:
            return None
        poly = np.array(out)
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cr = x * yn - xn * y
    area = 0.5 * cr.sum()
    if not area > 1e-14 * max(float(np.ptp(poly)), 1e-300) ** 2:
        return None
    return np.array([((x + xn) * cr).sum(), ((y + yn) * cr).sum()]) / (6 * area)


def untangle(fmap: DiscreteMap, triangles, movable: np.ndarray, band: float,
             rounds: int = UNTANGLE_ROUNDS) -> tuple[DiscreteMap, int]:
    """Clear non-positive triangles by moving single vertices.

    A vertex of a non-positive triangle is moved to the centroid of the
    region where all triangles around it are positive; a move only
    happens when that region is nonempty, so no triangle gets worse.
    ``movable`` masks the vertices that may move. Returns the new map and
    the number of moves.
    """
    mesh = fmap.mesh
    img = np.array(fmap.images, float)
    VT = mesh.vertex_triangles
    cand = np.unique(np.asarray(triangles, np.int64))
    moves = 0
    for _ in range(rounds):
        jac = signed_areas(img, mesh.triangles[cand]) / mesh.areas[cand]
        bad = cand[jac <= band]
        if not bad.size:
            break
        progress = False
        for t in bad:
            if signed_areas(img, mesh.triangles[t:t + 1])[0] / mesh.areas[t] > band:
                continue
            for v in mesh.triangles[t]:
                if not movable[v]:
                    continue
                A, c = _fan_halfplanes(mesh, img, v)
                ring = img[mesh.triangles[VT.indices[VT.indptr[v]:VT.indptr[v + 1]]]]
                got = _feasible_point(A, c, ring.reshape(-1, 2).min(0), ring.reshape(-1, 2).max(0))
                if got is None:
                    continue
                img[v] = got
                moves += 1
                progress = True
                ts = VT.indices[VT.indptr[v]:VT.indptr[v + 1]]
                cand = np.union1d(cand, ts)
                break
        if not progress:
            break
    return fmap.with_images(img), moves


def _careful_step(fmap: DiscreteMap, pc: PreCell, cell: Cell, cfg: ChainConfig,
                  target: PolygonalDomain):
    """Replacement that avoids creating folds.

    When a step turns a positive triangle non-positive, the pre-cell is
    grown by the stars of that triangle's vertices and the step redone, up
    to ``cfg.grow_rounds`` times; after that a flat side fit and the closed
    pre-cell rule are tried. The variant doing the least damage wins.
    Returns (map, step record, pre-cell actually used).
    """
    mesh = fmap.mesh
    band = 1e-12 * (float(np.hypot(*np.ptp(fmap.images, axis=0))) / mesh.scale) ** 2
    variants = [(cfg.precell_rule, cfg.side_slope)]
    if cfg.fallbacks:
        for v in [(cfg.precell_rule, 0.0), ("closed", cfg.side_slope), ("closed", 0.0)]:
            if v not in variants:
                variants.append(v)
    best = None
    attempts = 0
    for k, (rule, slope) in enumerate(variants):
        pcv = pc if k == 0 else compute_precell(fmap, cell, target, cfg.lateral_extension, rule)
        if pcv.empty:
            continue
        c = cfg if k == 0 else _replace_cfg(cfg, rule, slope)
        for g in range(cfg.grow_rounds + 1):
            attempts += 1
            try:
                nxt, rec = replace_on_precell(fmap, pcv, cell, c.p, c, target)
            except ConsistencyError:
                if g == 0:
                    raise
                break
            bad, left = _damaged(mesh, fmap.images, nxt.images, band)
            if len(bad) and cfg.untangle:
                fixed, moves = _untangle_step(fmap, nxt, pcv, bad, band)
                bad2, left2 = _damaged(mesh, fmap.images, fixed.images, band)
                if (len(bad2), left2) < (len(bad), left):
                    rec.untangle_moves = moves
                    rec.untangle_energy_delta = _energy_change(mesh, nxt.images, fixed.images,
                                                               cfg.p)
                    rec.energy_after += rec.untangle_energy_delta
                    nxt, bad, left = fixed, bad2, left2
            rec.attempts = attempts
            rec.damaged = len(bad)
            rec.grown = g
            inside = np.zeros(mesh.n_vertices, bool)
            inside[mesh.triangles[pcv.triangles].ravel()] = True
            rec.moved_outside = int(np.count_nonzero(
                np.any(fmap.images != nxt.images, axis=1) & ~inside))
            score = (len(bad), left)
            if best is None or score < best[0]:
                best = (score, nxt, rec, pcv)
            if not len(bad) or g == cfg.grow_rounds:
                break
            grown = grow_precell(fmap, pcv, cell, mesh.triangles[bad].ravel(), target)
            if len(grown.triangles) == len(pcv.triangles):
                break
            pcv = grown
        if best[0][0] == 0:
            break
    return best[1], best[2], best[3]


def _energy_change(mesh, before: np.ndarray, after: np.ndarray, p: float) -> float:
    moved = np.flatnonzero(np.any(before != after, axis=1))
    if not moved.size:
        return 0.0
    VT = mesh.vertex_triangles
    ts = np.unique(np.concatenate([VT.indices[VT.indptr[v]:VT.indptr[v + 1]] for v in moved]))
    return math.fsum(_local_energy(mesh, after, ts, p)) - math.fsum(_local_energy(mesh, before, ts, p))


def _untangle_step(fmap: DiscreteMap, nxt: DiscreteMap, pc: PreCell, bad: np.ndarray,
                   band: float):
    """Untangle after a step, moving only pre-cell vertices off the mesh boundary."""
    mesh = fmap.mesh
    movable = np.zeros(mesh.n_vertices, bool)
    movable[np.unique(mesh.triangles[pc.triangles])] = True
    movable &= ~mesh.is_boundary_vertex
    moved = np.flatnonzero(np.any(fmap.images != nxt.images, axis=1))
    VT = mesh.vertex_triangles
    near = np.unique(np.concatenate([VT.indices[VT.indptr[v]:VT.indptr[v + 1]] for v in moved]))
    jac = signed_areas(nxt.images, mesh.triangles[near]) / mesh.areas[near]
    return untangle(nxt, np.union1d(bad, near[jac <= band]), movable, band)


def _keep_current(cur: DiscreteMap, nxt: DiscreteMap, pc: PreCell, rec: StepRecord) -> bool:
    """Decide whether a step should leave the map alone: the map is already
    positively oriented around the pre-cell and the replacement would only
    raise the energy. The record is rewritten as a no-op when kept."""
    if rec.energy_after <= rec.energy_before:
        return False
    mesh = cur.mesh
    VT = mesh.vertex_triangles
    vs = np.unique(np.concatenate([mesh.triangles[pc.triangles].ravel(),
                                   np.flatnonzero(np.any(cur.images != nxt.images, axis=1))]))
    star = np.unique(np.concatenate([VT.indices[VT.indptr[v]:VT.indptr[v + 1]] for v in vs]))
    band = 1e-12 * (float(np.hypot(*np.ptp(cur.images, axis=0))) / mesh.scale) ** 2
    jac = signed_areas(cur.images, mesh.triangles[star]) / mesh.areas[star]
    if np.any(jac <= band):
        return False
    rec.kept = True
    rec.energy_after = rec.energy_before
    rec.repair_energy_delta = rec.untangle_energy_delta = 0.0
    rec.sup_displacement = rec.boundary_repair_magnitude = 0.0
    rec.rkc_violations, rec.rkc_violation = 0, False
    rec.damaged = rec.untangle_moves = rec.moved_outside = 0
    return True


def _replace_cfg(cfg: ChainConfig, rule: str, slope: float) -> ChainConfig:
    d = cfg.to_dict()
    d["repair"] = {**d["repair"], "precell_rule": rule, "side_slope": slope}
    return ChainConfig.from_dict(d)


def homeomorphize_chain(fmap: DiscreteMap, target: PolygonalDomain,
                        cover: CellCover | None = None, p: float | None = None,
                        config: ChainConfig | None = None,
                        snapshot_dir: str | None = None) -> tuple[DiscreteMap, ChainReport]:
    """Run one pass of pre-cell replacements over the cover in row-major order."""
    cfg = config or ChainConfig(p=2.0 if p is None else p)
    if p is not None and p != cfg.p:
        cfg = ChainConfig.from_dict({**cfg.to_dict(), "p": p})
    if cover is None:
        cover = build_cell_cover(target, cfg.epsilon, cfg.overlap_fraction, cfg.max_cells)
    check_chain_precondition(fmap, target, cfg)
    mesh = fmap.mesh
    report = ChainReport(cover.epsilon, cfg.p, cover.multiplicity, len(cover.cells))
    report.initial_energy = _energy_total(mesh, fmap.images, cfg.p)
    cur = fmap
    energy = report.initial_energy
    slack_tol = cfg.solver.tolerance
    for cell in cover.cells:
        pc = compute_precell(cur, cell, target, cfg.lateral_extension, cfg.precell_rule)
        if pc.empty:
            report.steps.append(StepRecord(cell.index, cell.kind, 0, energy, energy,
                                           cell_diameter=cell.diameter, skipped=True))
            continue
        try:
            nxt, rec, used = _careful_step(cur, pc, cell, cfg, target)
            if cfg.keep_homeomorphic and _keep_current(cur, nxt, used, rec):
                nxt = cur
        except NonConvergenceError as exc:
            report.aborted = True
            report.abort_reason = f"cell {cell.index}: {exc}"
            _finish(report, fmap, cur, cfg)
            raise ChainAbortedError(report.abort_reason, report, cur) from exc
        # turn local sums into global energies
        local_before = rec.energy_before
        rec.energy_before = energy
        rec.energy_after = energy + (rec.energy_after - local_before)
        energy = rec.energy_after
        scale = max(1.0, abs(rec.energy_before))
        allowance = rec.repair_energy_delta + rec.untangle_energy_delta
        if rec.energy_after > rec.energy_before + allowance + slack_tol * scale + 1e-9 * scale:
            report.energy_monotone_modulo_repair = False
        report.steps.append(rec)
        cur = nxt
        if snapshot_dir:
            os.makedirs(snapshot_dir, exist_ok=True)
            write_map_svg(cur, os.path.join(snapshot_dir, f"step_{len(report.steps):04d}.svg"),
                          target=target, title=f"after cell {cell.index}")
    _finish(report, fmap, cur, cfg)
    return cur, report


def _finish(report: ChainReport, fmap: DiscreteMap, cur: DiscreteMap, cfg: ChainConfig):
    mesh = fmap.mesh
    report.final_energy = _energy_total(mesh, cur.images, cfg.p)
    report.final_sup_distance_to_input = float(np.max(np.hypot(*(cur.images - fmap.images).T)))
    done = [s for s in report.steps if not s.skipped]
    report.total_repair_magnitude = math.fsum(s.boundary_repair_magnitude for s in done)
    report.total_repair_energy_delta = math.fsum(s.repair_energy_delta + s.untangle_energy_delta
                                                 for s in done)
    report.sup_bound = report.multiplicity * report.epsilon + report.total_repair_magnitude
    report.sup_bound_holds = report.final_sup_distance_to_input <= report.sup_bound
    inj = check_injectivity(cur)
    report.jacobian_census = inj.census.to_json(with_lists=False)
    report.injective = inj.injective
    report.overlap_witnesses = len(inj.witnesses)
    report.rkc_violations = sum(s.rkc_violations for s in done)


def approximation_sequence(fmap: DiscreteMap, target: PolygonalDomain, p: float,
                           epsilons, config: ChainConfig | None = None):
    """One chain run per epsilon (decreasing); each report carries the
    Royden distance of its output to the input."""
    eps = [float(e) for e in epsilons]
    if not eps:
        raise InvalidArgumentError("epsilons must be nonempty")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise InvalidArgumentError("epsilons must be strictly decreasing")
    base = (config or ChainConfig(p=p)).to_dict()
    out = []
    for e in eps:
        cfg = ChainConfig.from_dict({**base, "p": p, "epsilon": e})
        h, rep = homeomorphize_chain(fmap, target, None, p, cfg)
        rep.royden_distance = w1p_distance(h, fmap, p)
        out.append((h, rep))
    return out


def nonincreasing_within(values, slack: float = 0.1) -> bool:
    """True when every value is at most (1 + slack) times its predecessor."""
    v = list(values)
    return all(b <= a * (1 + slack) + 1e-15 for a, b in zip(v, v[1:]))
