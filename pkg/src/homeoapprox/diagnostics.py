"""Checks on discrete maps: orientation, injectivity, monotone fibers and the
logarithmic modulus-of-continuity bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError
from .functionals import energy_dirichlet
from .geometry import DiscreteMap, PolygonalDomain

ORIENT_TOL = 1e-12


def _image_scale(fmap: DiscreteMap) -> float:
    img = fmap.images
    if not len(img):
        return 1.0
    span = img.max(0) - img.min(0)
    return float(np.hypot(*span)) or 1.0


# ------------------------------------------------------------ orientation

@dataclass
class JacobianCensus:
    positive: int
    zero: int
    negative: int
    positive_triangles: np.ndarray
    zero_triangles: np.ndarray
    negative_triangles: np.ndarray
    jacobians: np.ndarray

    @property
    def total(self) -> int:
        return self.positive + self.zero + self.negative

    @property
    def all_positive(self) -> bool:
        return self.zero == 0 and self.negative == 0

    def to_json(self, with_lists: bool = True) -> dict:
        d = {"positive": self.positive, "zero": self.zero, "negative": self.negative}
        if with_lists:
            d["zero_triangles"] = self.zero_triangles.tolist()
            d["negative_triangles"] = self.negative_triangles.tolist()
        return d


def check_orientation(fmap: DiscreteMap, tol: float = ORIENT_TOL) -> JacobianCensus:
    """Classify every triangle by the sign of its Jacobian.

    J = image area / source area. The zero band is |J| <= tol*(s_img/s_src)^2
    with s the bounding-box diagonals, so the test is scale invariant.
    """
    mesh = fmap.mesh
    jac = fmap.image_areas() / np.asarray(mesh.areas)
    band = tol * (_image_scale(fmap) / mesh.scale) ** 2
    pos = np.flatnonzero(jac > band)
    neg = np.flatnonzero(jac < -band)
    zero = np.flatnonzero(np.abs(jac) <= band)
    return JacobianCensus(len(pos), len(zero), len(neg), pos, zero, neg, jac)


# ------------------------------------------------------------ injectivity

def _candidate_pairs(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Pairs (a < b) of boxes that share a bucket of a uniform grid."""
    m = len(lo)
    if m < 2:
        return np.empty((0, 2), np.int64)
    diag = np.hypot(*(hi - lo).T)
    h = float(np.median(diag[diag > 0])) if np.any(diag > 0) else 1.0
    origin = lo.min(0)
    while True:
        i0 = np.floor((lo - origin) / h).astype(np.int64)
        i1 = np.floor((hi - origin) / h).astype(np.int64)
        nx = i1[:, 0] - i0[:, 0] + 1
        ny = i1[:, 1] - i0[:, 1] + 1
        cnt = nx * ny
        if cnt.sum() <= 40 * m + 1000:
            break
        h *= 2
    width = int(i1[:, 0].max()) + 2
    tri = np.repeat(np.arange(m), cnt)
    k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    cx = i0[tri, 0] + k % nx[tri]
    cy = i0[tri, 1] + k // nx[tri]
    cell = cy * width + cx
    order = np.lexsort((tri, cell))
    cell, tri = cell[order], tri[order]
    starts = np.r_[0, np.flatnonzero(np.diff(cell)) + 1]
    sizes = np.diff(np.r_[starts, len(cell)])
    grp_start = np.repeat(starts, sizes)
    later = (grp_start + np.repeat(sizes, sizes)) - np.arange(len(cell)) - 1
    first = np.repeat(np.arange(len(cell)), later)
    within = np.arange(later.sum()) - np.repeat(np.cumsum(later) - later, later)
    second = first + 1 + within
    a, b = tri[first], tri[second]
    pairs = np.unique(np.column_stack([np.minimum(a, b), np.maximum(a, b)]), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    ok = np.all(lo[pairs[:, 0]] <= hi[pairs[:, 1]], 1) & np.all(lo[pairs[:, 1]] <= hi[pairs[:, 0]], 1)
    return pairs[ok]


def triangles_overlap(P: np.ndarray, Q: np.ndarray, tol: float) -> np.ndarray:
    """Separating-axis test for batches of triangles (k, 3, 2).

    True where the two closed triangles share an open region thicker than
    ``tol`` along every edge normal, i.e. they overlap with positive area.
    """
    overlap = np.ones(len(P), bool)
    for T in (P, Q):
        for i in range(3):
            e = T[:, (i + 1) % 3] - T[:, i]
            n = np.column_stack([-e[:, 1], e[:, 0]])
            ln = np.hypot(n[:, 0], n[:, 1])
            ln[ln == 0] = 1.0
            n = n / ln[:, None]
            pp = np.einsum("kij,kj->ki", P, n)
            qq = np.einsum("kij,kj->ki", Q, n)
            depth = np.minimum(pp.max(1), qq.max(1)) - np.maximum(pp.min(1), qq.min(1))
            overlap &= depth > tol
    return overlap


@dataclass
class InjectivityReport:
    injective: bool
    census: JacobianCensus
    witnesses: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"injective": self.injective, "census": self.census.to_json(),
                "witnesses": [list(w) for w in self.witnesses]}


def check_injectivity(fmap: DiscreteMap, tol: float = ORIENT_TOL) -> InjectivityReport:
    """All Jacobians positive and no two image triangles overlap.

    Every pair of distinct triangles is tested, adjacent ones included, so a
    fan that winds twice around a vertex is caught as well.
    """
    census = check_orientation(fmap, tol)
    tris = fmap.images[fmap.mesh.triangles]
    pairs = _candidate_pairs(tris.min(1), tris.max(1))
    witnesses: list = []
    if len(pairs):
        eps = tol * _image_scale(fmap)
        hit = np.zeros(len(pairs), bool)
        for s in range(0, len(pairs), 200000):
            chunk = pairs[s:s + 200000]
            hit[s:s + 200000] = triangles_overlap(tris[chunk[:, 0]], tris[chunk[:, 1]], eps)
        witnesses = [tuple(int(x) for x in w) for w in pairs[hit]]
    witnesses.sort()
    return InjectivityReport(census.all_positive and not witnesses, census, witnesses)


# ---------------------------------------------------------------- fibers

def point_triangle_distance(b: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Distance from point b to each (possibly degenerate) triangle of T (k, 3, 2)."""
    d = np.full(len(T), np.inf)
    cross = []
    for i in range(3):
        a, c = T[:, i], T[:, (i + 1) % 3]
        e = c - a
        w = b - a
        ee = (e ** 2).sum(1)
        t = np.clip(np.where(ee > 0, (w * e).sum(1) / np.where(ee > 0, ee, 1), 0.0), 0, 1)
        d = np.minimum(d, np.hypot(*(w - t[:, None] * e).T))
        cross.append(e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0])
    cr = np.array(cross)
    area2 = (T[:, 1, 0] - T[:, 0, 0]) * (T[:, 2, 1] - T[:, 0, 1]) \
        - (T[:, 1, 1] - T[:, 0, 1]) * (T[:, 2, 0] - T[:, 0, 0])
    inside = (np.all(cr >= 0, 0) | np.all(cr <= 0, 0)) & (area2 != 0)
    d[inside] = 0.0
    return d


@dataclass
class MonotonicityReport:
    sampled_points: np.ndarray
    fiber_component_counts: np.ndarray
    delta: float
    passed: bool
    failing_points: np.ndarray

    @property
    def pass_(self) -> bool:
        return self.passed

    def to_json(self) -> dict:
        return {"delta": self.delta, "pass": self.passed,
                "sampled_points": self.sampled_points.tolist(),
                "fiber_component_counts": self.fiber_component_counts.tolist(),
                "failing_points": self.failing_points.tolist()}


def max_image_diameter(fmap: DiscreteMap) -> float:
    T = fmap.images[fmap.mesh.triangles]
    e = np.concatenate([T[:, 1] - T[:, 0], T[:, 2] - T[:, 1], T[:, 0] - T[:, 2]])
    return float(np.max(np.hypot(e[:, 0], e[:, 1]))) if len(e) else 0.0


def check_monotone_fibers(fmap: DiscreteMap, target: PolygonalDomain, sample_grid: int = 40,
                          delta: float | None = None) -> MonotonicityReport:
    """Sample points b and test that the thickened fiber is edge-connected.

    The thickened fiber of b is the set of triangles whose image meets the
    closed disc B(b, delta). Points come from a sample_grid x sample_grid
    lattice over the bounding box of the target and the image; a lattice
    point is kept when it lies in the target or some image triangle is
    within delta of it (so folds that leave the target are still seen).
    """
    mesh = fmap.mesh
    if delta is None:
        delta = 2.0 * max_image_diameter(fmap)
    if not delta > 0:
        raise InvalidArgumentError("delta must be positive")
    T = fmap.images[mesh.triangles]
    cent = T.mean(1)
    reach = float(np.max(np.hypot(*(T - cent[:, None, :]).transpose(2, 0, 1)))) if len(T) else 0
    x0, y0, x1, y1 = target.bounds
    lo = np.minimum([x0, y0], fmap.images.min(0))
    hi = np.maximum([x1, y1], fmap.images.max(0))
    n = int(sample_grid)
    # lattice at cell centers so points avoid exact symmetry lines
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    tree = cKDTree(cent)
    in_target = target.contains(pts)
    cand = tree.query_ball_point(pts, delta + reach)
    keep, counts = [], []
    adj = mesh.triangle_adjacency
    for k, b in enumerate(pts):
        c = np.asarray(cand[k], np.int64)
        if c.size:
            c = np.sort(c)
            fiber = c[point_triangle_distance(b, T[c]) <= delta]
        else:
            fiber = c
        if not fiber.size:
            if in_target[k]:
                keep.append(k)
                counts.append(0)
            continue
        ncomp, _ = connected_components(adj[fiber][:, fiber], directed=False)
        keep.append(k)
        counts.append(int(ncomp))
    counts = np.asarray(counts, np.int64)
    sampled = pts[keep]
    failing = sampled[counts > 1]
    return MonotonicityReport(sampled, counts, float(delta), bool(np.all(counts <= 1)), failing)


# ------------------------------------------------- modulus of continuity

@dataclass
class ModulusReport:
    constant_C: float
    dirichlet_energy: float
    lhs: np.ndarray
    rhs_unit: np.ndarray
    ratios: np.ndarray
    max_ratio: float
    passed: bool
    skipped: list

    def to_json(self) -> dict:
        return {"constant_C": self.constant_C, "dirichlet_energy": self.dirichlet_energy,
                "max_ratio": self.max_ratio, "pass": self.passed,
                "margins": (self.constant_C * self.rhs_unit - self.lhs).tolist(),
                "skipped": [list(p) for p in self.skipped]}


def modulus_of_continuity_bound(fmap: DiscreteMap, pairs, constant_C: float) -> ModulusReport:
    """Evaluate |h(x1)-h(x2)|^2 <= C * E2[h] / log(e + 1/|x1-x2|) per pair.

    ``max_ratio`` is the smallest C that makes every evaluated pair pass.
    """
    if not constant_C > 0:
        raise InvalidArgumentError("constant_C must be positive")
    pairs = np.asarray(pairs, np.int64).reshape(-1, 2)
    E = energy_dirichlet(fmap).total
    x = fmap.mesh.vertices
    dist = np.hypot(*(x[pairs[:, 0]] - x[pairs[:, 1]]).T)
    coincident = dist == 0
    skipped = [tuple(int(v) for v in p) for p in pairs[coincident]]
    pairs, dist = pairs[~coincident], dist[~coincident]
    lhs = ((fmap.images[pairs[:, 0]] - fmap.images[pairs[:, 1]]) ** 2).sum(1)
    rhs_unit = E / np.log(math.e + 1.0 / dist)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(lhs > 0, lhs / rhs_unit, 0.0)
    max_ratio = float(ratios.max()) if len(ratios) else 0.0
    passed = bool(np.all(lhs <= constant_C * rhs_unit * (1 + 1e-12)))
    return ModulusReport(float(constant_C), E, lhs, rhs_unit, ratios, max_ratio, passed, skipped)


def random_vertex_pairs(n_vertices: int, count: int, rng) -> np.ndarray:
    a = rng.integers(0, n_vertices, size=count)
    b = rng.integers(0, n_vertices, size=count)
    return np.column_stack([a, b])


def fit_modulus_constant(fmap: DiscreteMap, count: int = 2000, seed: int = 0) -> float:
    """Smallest C that satisfies the modulus bound on random vertex pairs plus
    all mesh edges (the short-distance end of the bound)."""
    rng = np.random.default_rng(seed)
    pairs = np.concatenate([random_vertex_pairs(fmap.mesh.n_vertices, count, rng),
                            fmap.mesh.edges])
    return modulus_of_continuity_bound(fmap, pairs, 1.0).max_ratio
