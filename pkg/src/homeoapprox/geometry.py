"""Planar triangle meshes, polygonal domains and the structured test meshes.

Meshes and maps are immutable once built: coordinate arrays are flagged
read-only and the derived connectivity is computed lazily and cached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from shapely.geometry import Polygon

from .errors import InvalidArgumentError, MeshParseError

AREA_TOL = 1e-14


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def signed_areas(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Signed area of every triangle, positive for counterclockwise order."""
    a = points[triangles[:, 0]]
    b = points[triangles[:, 1]]
    c = points[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def shoelace(loop: np.ndarray) -> float:
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def trace_loops(directed_edges: np.ndarray) -> list[list[int]]:
    """Chain directed boundary edges (tail, head) into closed vertex cycles.

    Loops start at their smallest vertex so the result does not depend on
    edge order. A vertex with two outgoing edges (a pinch) makes the loops
    non-simple; callers that need simple loops check for it.
    """
    nxt: dict[int, list[int]] = {}
    for a, b in directed_edges:
        nxt.setdefault(int(a), []).append(int(b))
    for v in nxt:
        nxt[v].sort()
    loops = []
    while nxt:
        start = min(nxt)
        loop = [start]
        v = start
        while True:
            outs = nxt[v]
            w = outs.pop(0)
            if not outs:
                del nxt[v]
            if w == start:
                break
            loop.append(w)
            v = w
            if v not in nxt:
                raise InvalidArgumentError(f"boundary edges do not close at vertex {v}")
        loops.append(loop)
    return loops


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices, float)
        t = _frozen(self.triangles, np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise InvalidArgumentError("vertices must have shape (n, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise InvalidArgumentError("triangles must have shape (m, 3)")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("vertex coordinates must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidArgumentError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        areas = signed_areas(v, t)
        bad = np.flatnonzero(areas <= AREA_TOL * self.scale ** 2)
        if bad.size:
            raise InvalidArgumentError(
                f"triangle {int(bad[0])} has nonpositive signed area {areas[bad[0]]!r}")
        # each directed edge may appear once; otherwise orientation is inconsistent
        d = self._directed_edges
        keys = d[:, 0] * len(v) + d[:, 1]
        uniq, counts = np.unique(keys, return_counts=True)
        if np.any(counts > 1):
            k = int(uniq[counts > 1][0])
            raise InvalidArgumentError(
                f"edge ({k // len(v)}, {k % len(v)}) used twice with the same orientation")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def scale(self) -> float:
        """Bounding-box diagonal; the length unit for tolerances."""
        if not len(self.vertices):
            return 1.0
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.hypot(*span)) or 1.0

    @cached_property
    def areas(self) -> np.ndarray:
        return _frozen(signed_areas(self.vertices, self.triangles), float)

    @property
    def _directed_edges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])

    @cached_property
    def edges(self) -> np.ndarray:
        """Undirected edges (i < j), sorted."""
        d = np.sort(self._directed_edges, axis=1)
        return _frozen(np.unique(d, axis=0), np.int64)

    @cached_property
    def _edge_triangles(self):
        m = self.n_triangles
        d = np.sort(self._directed_edges, axis=1)
        tri = np.tile(np.arange(m), 3)
        keys = d[:, 0] * self.n_vertices + d[:, 1]
        order = np.argsort(keys, kind="stable")
        return keys[order], tri[order], self._directed_edges[order]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Directed boundary edges, oriented as in their triangle."""
        keys, _, directed = self._edge_triangles
        _, first, counts = np.unique(keys, return_index=True, return_counts=True)
        if np.any(counts > 2):
            raise InvalidArgumentError("an edge is shared by more than two triangles")
        return _frozen(directed[first[counts == 1]], np.int64)

    @cached_property
    def boundary_loops(self) -> tuple:
        loops = trace_loops(self.boundary_edges)
        for loop in loops:
            if len(set(loop)) != len(loop):
                raise InvalidArgumentError(f"boundary loop through vertex {loop[0]} is not simple")
        # outer (largest |area|) first, then by smallest vertex
        loops.sort(key=lambda lp: (-abs(shoelace(self.vertices[lp])), lp[0]))
        return tuple(tuple(lp) for lp in loops)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return _frozen(np.unique(self.boundary_edges), np.int64)

    @cached_property
    def is_boundary_vertex(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, bool)
        mask[self.boundary_vertices] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def triangle_adjacency(self) -> sp.csr_matrix:
        """Symmetric triangle-triangle adjacency through shared edges."""
        keys, tri, _ = self._edge_triangles
        same = keys[1:] == keys[:-1]
        a, b = tri[:-1][same], tri[1:][same]
        m = self.n_triangles
        data = np.ones(2 * len(a), np.int8)
        return sp.csr_matrix((data, (np.r_[a, b], np.r_[b, a])), shape=(m, m))

    @cached_property
    def vertex_adjacency(self) -> sp.csr_matrix:
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e), np.int8)
        return sp.csr_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                             shape=(n, n))

    def neighbors(self, v: int) -> np.ndarray:
        A = self.vertex_adjacency
        return A.indices[A.indptr[v]:A.indptr[v + 1]]

    @cached_property
    def vertex_triangles(self) -> sp.csr_matrix:
        """Incidence matrix, rows = vertices, columns = triangles."""
        m = self.n_triangles
        rows = self.triangles.ravel()
        cols = np.repeat(np.arange(m), 3)
        return sp.csr_matrix((np.ones(3 * m, np.int8), (rows, cols)),
                             shape=(self.n_vertices, m))

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_triangles

    def total_area(self) -> float:
        return float(np.sum(self.areas))

    def to_json(self) -> dict:
        return {"vertices": self.vertices.tolist(), "triangles": self.triangles.tolist()}


@dataclass(frozen=True, eq=False)
class DiscreteMap:
    """Piecewise-linear map given by one image point per mesh vertex."""

    mesh: TriangleMesh
    images: np.ndarray

    def __post_init__(self):
        img = _frozen(self.images, float)
        if img.shape != (self.mesh.n_vertices, 2):
            raise InvalidArgumentError(
                f"images has shape {img.shape}, expected {(self.mesh.n_vertices, 2)}")
        if not np.all(np.isfinite(img)):
            raise InvalidArgumentError("image coordinates must be finite")
        object.__setattr__(self, "images", img)

    @classmethod
    def identity(cls, mesh: TriangleMesh) -> "DiscreteMap":
        return cls(mesh, mesh.vertices)

    def image_areas(self) -> np.ndarray:
        return signed_areas(self.images, self.mesh.triangles)

    def with_images(self, images) -> "DiscreteMap":
        return DiscreteMap(self.mesh, images)

    def to_json(self) -> dict:
        d = self.mesh.to_json()
        d["images"] = self.images.tolist()
        return d


def _loop_array(loop) -> np.ndarray:
    a = np.asarray(loop, float)
    if a.ndim != 2 or a.shape[1] != 2 or len(a) < 3:
        raise InvalidArgumentError("a loop needs at least 3 points of shape (k, 2)")
    if np.allclose(a[0], a[-1]):
        a = a[:-1]
    return _frozen(a, float)


@dataclass(frozen=True, eq=False)
class PolygonalDomain:
    """Target region: counterclockwise outer loop with clockwise holes."""

    outer_loop: np.ndarray
    holes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        outer = _loop_array(self.outer_loop)
        holes = tuple(_loop_array(h) for h in self.holes)
        if shoelace(outer) <= 0:
            raise InvalidArgumentError("outer loop must be counterclockwise")
        for k, h in enumerate(holes):
            if shoelace(h) >= 0:
                raise InvalidArgumentError(f"hole {k} must be clockwise")
        object.__setattr__(self, "outer_loop", outer)
        object.__setattr__(self, "holes", holes)
        shape = self.shape
        if not shape.is_valid:
            raise InvalidArgumentError("loops intersect or a hole is not strictly inside")

    @cached_property
    def shape(self):
        return Polygon(self.outer_loop, [h for h in self.holes])

    @property
    def loops(self) -> list[np.ndarray]:
        return [self.outer_loop, *self.holes]

    @cached_property
    def diameter(self) -> float:
        o = self.outer_loop
        d = o[:, None, :] - o[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return tuple(float(b) for b in self.shape.bounds)

    def area(self) -> float:
        return float(self.shape.area)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        """Closed containment test, vectorized; ``tol`` widens the region."""
        import shapely
        pts = np.asarray(points, float).reshape(-1, 2)
        inside = shapely.contains_xy(self.shape, pts[:, 0], pts[:, 1])
        rest = ~inside
        if np.any(rest):
            d = shapely.distance(self.shape.boundary, shapely.points(pts[rest]))
            inside[rest] = d <= max(tol, 1e-12 * self.diameter)
        return inside

    def distance_outside(self, points) -> np.ndarray:
        """Distance to the closed domain (zero inside)."""
        import shapely
        pts = np.asarray(points, float).reshape(-1, 2)
        return shapely.distance(self.shape, shapely.points(pts))

    def to_json(self) -> dict:
        return {"outer_loop": self.outer_loop.tolist(), "holes": [h.tolist() for h in self.holes]}

    @classmethod
    def from_json(cls, d: dict) -> "PolygonalDomain":
        try:
            return cls(np.asarray(d["outer_loop"], float),
                       tuple(np.asarray(h, float) for h in d.get("holes", [])))
        except KeyError as exc:
            raise MeshParseError(f"domain: missing field {exc.args[0]!r}") from None


# ---------------------------------------------------------------- builders

def build_rect_mesh(width: float, height: float, resolution: int) -> TriangleMesh:
    """Structured mesh of [0,width]x[0,height] with ``resolution`` cells per side.

    Diagonals follow the quadrant ("/" in the lower-left and upper-right
    quarters, "\\" elsewhere) so that every corner cell is cut through its
    corner. For resolution >= 2 no triangle then has all three vertices on
    the boundary, and all cotangent weights are nonnegative.
    """
    if not (width > 0 and height > 0):
        raise InvalidArgumentError("width and height must be positive")
    n = int(resolution)
    if n < 1 or n != resolution:
        raise InvalidArgumentError("resolution must be an integer >= 1")
    xs = np.linspace(0.0, width, n + 1)
    ys = np.linspace(0.0, height, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    half = n / 2.0
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            left = i + 0.5 <= half
            low = j + 0.5 <= half
            if left == low:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return TriangleMesh(verts, np.array(tris))


def annulus_radii(r_inner: float, r_outer: float, radial_n: int) -> np.ndarray:
    """Geometrically spaced ring radii, so cells are near-conformal squares."""
    k = np.arange(radial_n + 1) / radial_n
    radii = r_inner * (r_outer / r_inner) ** k
    radii[0], radii[-1] = r_inner, r_outer
    return radii


def build_annulus_mesh(r_inner: float, r_outer: float, radial_n: int, angular_n: int,
                       spacing: str = "geometric", radii=None) -> TriangleMesh:
    """Annulus mesh with vertices on exact circles.

    Vertex (k, j) sits at radius radii[k] and angle 2*pi*j/angular_n and has
    index k*angular_n + j. ``spacing`` is "geometric" (near-square cells in
    log-polar coordinates) or "uniform"; explicit ``radii`` override it.

    On the geometric mesh the discrete harmonic functions include
    rho^(+-1) cos(theta), rho^(+-1) sin(theta) exactly, so harmonic oracles
    of that form are reproduced to rounding error. Use uniform spacing to
    see a genuine discretization error.
    """
    if not (0 < r_inner < r_outer):
        raise InvalidArgumentError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    if radial_n < 1 or angular_n < 3:
        raise InvalidArgumentError("need radial_n >= 1 and angular_n >= 3")
    if radii is None:
        if spacing == "geometric":
            radii = annulus_radii(r_inner, r_outer, radial_n)
        elif spacing == "uniform":
            radii = np.linspace(r_inner, r_outer, radial_n + 1)
        else:
            raise InvalidArgumentError(f"unknown spacing {spacing!r}")
    else:
        radii = np.asarray(radii, float)
        if len(radii) != radial_n + 1 or np.any(np.diff(radii) <= 0) \
                or radii[0] != r_inner or radii[-1] != r_outer:
            raise InvalidArgumentError("radii must increase from r_inner to r_outer")
    m = angular_n
    theta = 2 * np.pi * np.arange(m) / m
    c, s = np.cos(theta), np.sin(theta)
    verts = np.concatenate([np.column_stack([r * c, r * s]) for r in radii])
    k = np.arange(radial_n)[:, None]
    j = np.arange(m)[None, :]
    a = k * m + j
    b = (k + 1) * m + j
    cc = (k + 1) * m + (j + 1) % m
    d = k * m + (j + 1) % m
    t1 = np.stack([a, b, cc], -1).reshape(-1, 3)
    t2 = np.stack([a, cc, d], -1).reshape(-1, 3)
    tris = np.stack([t1, t2], 1).reshape(-1, 3)
    return TriangleMesh(verts, tris)


def rectangle_domain(x0: float, y0: float, x1: float, y1: float) -> PolygonalDomain:
    return PolygonalDomain(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float))


def circle_polygon(radius: float, n: int, clockwise: bool = False) -> np.ndarray:
    theta = 2 * np.pi * np.arange(n) / n
    pts = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    return pts[::-1] if clockwise else pts


def annulus_domain(r_inner: float, r_outer: float, n: int) -> PolygonalDomain:
    """Polygonal annulus whose vertices sit at angles 2*pi*j/n on both circles."""
    return PolygonalDomain(circle_polygon(r_outer, n),
                           (circle_polygon(r_inner, n, clockwise=True),))


def regular_polygon_domain(radius: float, n: int, center=(0.0, 0.0)) -> PolygonalDomain:
    return PolygonalDomain(circle_polygon(radius, n) + np.asarray(center, float))


# ---------------------------------------------------------- connectivity

def triangle_components(mesh: TriangleMesh, triangles) -> list[np.ndarray]:
    """Edge-connected components of a triangle set, each sorted, ordered by
    their smallest triangle index."""
    tris = np.unique(np.asarray(list(triangles) if not isinstance(triangles, np.ndarray)
                                else triangles, np.int64))
    if not tris.size:
        return []
    A = mesh.triangle_adjacency[tris][:, tris]
    _, labels = connected_components(A, directed=False)
    comps: dict[int, list] = {}
    for t, lab in zip(tris, labels):
        comps.setdefault(int(lab), []).append(int(t))
    out = [np.array(c, np.int64) for c in comps.values()]
    out.sort(key=lambda c: int(c[0]))
    return out


def connected_component(mesh: TriangleMesh, seed_triangles, within=None) -> set[int]:
    """Union of the edge-connected components of ``within`` that touch the seed.

    ``within`` defaults to all triangles of the mesh; seeds outside it are
    ignored.
    """
    seed = {int(t) for t in seed_triangles}
    for t in seed:
        if not 0 <= t < mesh.n_triangles:
            raise InvalidArgumentError(f"seed triangle {t} out of range")
    pool = range(mesh.n_triangles) if within is None else within
    out: set[int] = set()
    for comp in triangle_components(mesh, pool):
        cs = set(comp.tolist())
        if cs & seed:
            out |= cs
    return out


# -------------------------------------------------------------- JSON I/O

def _json_load_text(text: str, what: str) -> dict:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{what}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                             f"{exc.msg}") from None
    if not isinstance(d, dict):
        raise MeshParseError(f"{what}: top level must be an object")
    return d


def _parse_array(d: dict, key: str, width: int, kind, what: str) -> np.ndarray:
    if key not in d:
        raise MeshParseError(f"{what}: missing field {key!r}")
    rows = d[key]
    if not isinstance(rows, list):
        raise MeshParseError(f"{what}: field {key!r} must be a list")
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != width:
            raise MeshParseError(f"{what}: {key}[{i}] must be a list of {width} numbers")
        for x in row:
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise MeshParseError(f"{what}: {key}[{i}] contains non-numeric entry {x!r}")
            if kind is int and not float(x).is_integer():
                raise MeshParseError(f"{what}: {key}[{i}] has non-integer index {x!r}")
    return np.array(rows, dtype=float if kind is float else np.int64).reshape(-1, width)


def mesh_from_dict(d: dict, what: str = "mesh") -> TriangleMesh:
    v = _parse_array(d, "vertices", 2, float, what)
    t = _parse_array(d, "triangles", 3, int, what)
    try:
        return TriangleMesh(v, t)
    except InvalidArgumentError as exc:
        raise MeshParseError(f"{what}: {exc}") from None


def map_from_dict(d: dict, what: str = "map") -> DiscreteMap:
    mesh = mesh_from_dict(d, what)
    img = _parse_array(d, "images", 2, float, what)
    try:
        return DiscreteMap(mesh, img)
    except InvalidArgumentError as exc:
        raise MeshParseError(f"{what}: {exc}") from None


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    return mesh_from_dict(_json_load_text(path.read_text(), str(path)), str(path))


def load_map(path) -> DiscreteMap:
    path = Path(path)
    return map_from_dict(_json_load_text(path.read_text(), str(path)), str(path))
