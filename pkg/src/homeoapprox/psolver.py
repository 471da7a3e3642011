"""Scalar p-harmonic Dirichlet problems on a triangle set.

Minimizes sum_T area_T * |grad u_T|^p over the free vertex values with the
remaining vertices held fixed. Newton's method runs on the regularized
density (|grad u|^2 + delta^2)^(p/2) with an Armijo backtracking line search,
so the energy never increases; p = 2 is a single sparse linear solve.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, NonConvergenceError
from .functionals import basis_gradients
from .geometry import DiscreteMap, TriangleMesh

STAGNATION_REL = 1e-14
STAGNATION_STEPS = 3


@dataclass(frozen=True)
class SolverConfig:
    p: float = 2.0
    tolerance: float = 1e-10
    max_iterations: int = 200
    delta: float = 1e-10
    fast_path_p2: bool = True

    def __post_init__(self):
        if not self.p > 1:
            raise InvalidArgumentError(f"exponent p must exceed 1, got {self.p}")
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.delta < 0:
            raise InvalidArgumentError("delta must be nonnegative")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown solver option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def region_vertices(mesh: TriangleMesh, triangles) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(all, boundary, interior) vertices of a triangle set.

    A vertex is on the region boundary when it lies on an edge that has
    exactly one incident triangle inside the set.
    """
    tris = np.asarray(triangles, np.int64)
    if not tris.size:
        e = np.empty(0, np.int64)
        return e, e, e
    t = mesh.triangles[tris]
    allv = np.unique(t)
    d = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    d = np.sort(d, axis=1)
    keys = d[:, 0] * mesh.n_vertices + d[:, 1]
    uniq, idx, counts = np.unique(keys, return_index=True, return_counts=True)
    bverts = np.unique(d[idx[counts == 1]])
    interior = np.setdiff1d(allv, bverts, assume_unique=True)
    return allv, bverts, interior


@dataclass(frozen=True, eq=False)
class PSolveProblem:
    mesh: TriangleMesh
    free_vertices: np.ndarray
    fixed_vertices: np.ndarray
    fixed_values: np.ndarray
    p: float = 2.0
    tolerance: float = 1e-10
    max_iterations: int = 200
    regularization_delta: float = 1e-10
    triangles: np.ndarray | None = None
    fast_path_p2: bool = True

    def __post_init__(self):
        if not self.p > 1:
            raise InvalidArgumentError(f"exponent p must exceed 1, got {self.p}")
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.regularization_delta < 0:
            raise InvalidArgumentError("regularization_delta must be nonnegative")
        tris = (np.arange(self.mesh.n_triangles) if self.triangles is None
                else np.unique(np.asarray(self.triangles, np.int64)))
        free = np.asarray(self.free_vertices, np.int64)
        fixed = np.asarray(self.fixed_vertices, np.int64)
        vals = np.asarray(self.fixed_values, float)
        if vals.shape != fixed.shape:
            raise InvalidArgumentError("fixed_values must align with fixed_vertices")
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError("fixed values must be finite")
        touched = np.unique(self.mesh.triangles[tris])
        both = np.concatenate([free, fixed])
        if len(np.unique(both)) != len(both):
            raise InvalidArgumentError("free and fixed vertex sets overlap or repeat")
        if not np.array_equal(np.sort(both), touched):
            raise InvalidArgumentError(
                "free and fixed vertices must partition the vertices of the active triangles")
        for name, a in (("free_vertices", free), ("fixed_vertices", fixed),
                        ("fixed_values", vals), ("triangles", tris)):
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def dirichlet(cls, mesh: TriangleMesh, values, p: float = 2.0, triangles=None,
                  config: SolverConfig | None = None) -> "PSolveProblem":
        """Free = interior vertices of the triangle set; fixed values read from
        the full-length array ``values`` at the set's boundary vertices."""
        tris = np.arange(mesh.n_triangles) if triangles is None else np.asarray(triangles)
        _, bnd, inner = region_vertices(mesh, tris)
        values = np.asarray(values, float)
        cfg = config or SolverConfig(p=p)
        return cls(mesh, inner, bnd, values[bnd], p=p, tolerance=cfg.tolerance,
                   max_iterations=cfg.max_iterations, regularization_delta=cfg.delta,
                   triangles=tris, fast_path_p2=cfg.fast_path_p2)

    def full_values(self, free_values) -> np.ndarray:
        """Length-n vector: fixed and free values in place, NaN elsewhere."""
        u = np.full(self.mesh.n_vertices, np.nan)
        u[self.fixed_vertices] = self.fixed_values
        u[self.free_vertices] = free_values
        return u


@dataclass
class PSolveReport:
    iterations: int = 0
    energy_trace: list = field(default_factory=list)
    final_gradient_norm: float = 0.0
    converged: bool = False
    stop_reason: str = ""
    final_energy: float = float("nan")

    def to_json(self) -> dict:
        return asdict(self)


class ScalarPEnergy:
    """Regularized scalar p-energy of a triangle set, with exact derivatives.

    Works on full-length vertex vectors; only vertices of the active triangles
    matter.
    """

    def __init__(self, mesh: TriangleMesh, triangles, p: float, delta: float = 0.0):
        tris = np.asarray(triangles, np.int64)
        self.mesh = mesh
        self.p = float(p)
        self.delta2 = float(delta) ** 2
        self.tri = mesh.triangles[tris]
        self.G = basis_gradients(mesh)[tris]
        self.A = np.asarray(mesh.areas)[tris]
        n = mesh.n_vertices
        rows = np.repeat(self.tri, 3, axis=1).ravel()
        cols = np.tile(self.tri, (1, 3)).ravel()
        self._rows, self._cols, self._n = rows, cols, n
        self._GG = np.einsum("mik,mjk->mij", self.G, self.G)

    def _grads(self, u):
        return np.einsum("mi,mik->mk", u[self.tri], self.G)

    def densities(self, u, delta2=None):
        d2 = self.delta2 if delta2 is None else delta2
        g = self._grads(u)
        s = (g ** 2).sum(1) + d2
        return self.A * (s if self.p == 2 else s ** (self.p / 2))

    def energy(self, u, delta2=None) -> float:
        return math.fsum(self.densities(u, delta2))

    def gradient(self, u) -> np.ndarray:
        g = self._grads(u)
        s = (g ** 2).sum(1) + self.delta2
        w = self.A * self.p * (1.0 if self.p == 2 else s ** (self.p / 2 - 1))
        local = w[:, None] * np.einsum("mk,mik->mi", g, self.G)
        return np.bincount(self.tri.ravel(), local.ravel(), minlength=self._n)

    def hessian(self, u) -> sp.csr_matrix:
        p = self.p
        g = self._grads(u)
        s = (g ** 2).sum(1) + self.delta2
        if p == 2:
            loc = (2.0 * self.A)[:, None, None] * self._GG
        else:
            a = self.A * p * s ** (p / 2 - 1)
            with np.errstate(divide="ignore", invalid="ignore"):
                b = np.where(s > 0, self.A * p * (p - 2) * s ** (p / 2 - 2), 0.0)
            gi = np.einsum("mk,mik->mi", g, self.G)
            loc = a[:, None, None] * self._GG + b[:, None, None] * gi[:, :, None] * gi[:, None, :]
        return sp.csr_matrix((loc.ravel(), (self._rows, self._cols)), shape=(self._n, self._n))


def _newton_direction(H, g):
    """Solve H d = -g, shifting H until d is a descent direction."""
    n = H.shape[0]
    diag = H.diagonal()
    scale = float(np.mean(np.abs(diag))) if n else 1.0
    scale = scale if scale > 0 else 1.0
    shift = 0.0
    eye = sp.identity(n, format="csc")
    H = H.tocsc()
    for _ in range(8):
        try:
            with np.errstate(all="ignore"):
                d = spla.spsolve(H + shift * eye if shift else H, -g)
            d = np.atleast_1d(d)
            if np.all(np.isfinite(d)) and float(d @ g) < 0:
                return d
        except RuntimeError:
            pass
        shift = 1e-10 * scale if shift == 0 else shift * 100
    return None


def _line_search(fun, x, E, g, d, max_halvings=60, max_expansions=10):
    slope = float(g @ d)
    t = 1.0
    for _ in range(max_halvings):
        xn = x + t * d
        En = fun(xn)
        if np.isfinite(En) and En <= E + 1e-4 * t * slope:
            if En < E or t * np.max(np.abs(d)) == 0:
                break
        t *= 0.5
    else:
        return None, None
    # Far from the minimum the Newton step over- or undershoots badly when
    # p != 2; walk the step length by factors of 2 while the energy drops.
    for factor in (2.0, 0.5):
        moved = False
        for _ in range(max_expansions):
            xt = x + factor * t * d
            Et = fun(xt)
            if not (np.isfinite(Et) and Et < En):
                break
            t, xn, En, moved = factor * t, xt, Et, True
        if moved:
            break
    return xn, En


def solve_scalar_p_dirichlet(problem: PSolveProblem, initial_guess=None):
    """Return (free values, PSolveReport). Raises NonConvergenceError."""
    pr = problem
    free = pr.free_vertices
    report = PSolveReport()
    if initial_guess is None:
        if pr.p != 2:
            p2 = PSolveProblem(pr.mesh, free, pr.fixed_vertices, pr.fixed_values, p=2.0,
                               triangles=pr.triangles)
            x0, _ = solve_scalar_p_dirichlet(p2, np.zeros(len(free)))
        else:
            x0 = np.zeros(len(free))
    else:
        x0 = np.asarray(initial_guess, float).copy()
        if x0.shape != free.shape or not np.all(np.isfinite(x0)):
            raise InvalidArgumentError("initial guess must be finite, one value per free vertex")

    energy = ScalarPEnergy(pr.mesh, pr.triangles, pr.p, pr.regularization_delta)
    u = np.zeros(pr.mesh.n_vertices)
    u[pr.fixed_vertices] = pr.fixed_values

    def full(x):
        u[free] = x
        return u

    def fun(x):
        return energy.energy(full(x))

    if not len(free):
        E = fun(x0)
        report.energy_trace = [E]
        report.converged = True
        report.stop_reason = "no free vertices"
        report.final_energy = energy.energy(full(x0), 0.0)
        return x0, report

    E = fun(x0)
    g = energy.gradient(full(x0))[free]
    g0 = float(np.linalg.norm(g))
    report.energy_trace = [E]
    x = x0

    if g0 == 0.0:
        report.converged, report.stop_reason = True, "initial guess is stationary"
        report.final_energy = energy.energy(full(x), 0.0)
        return x, report

    if pr.p == 2 and pr.fast_path_p2:
        H = energy.hessian(full(x)).tocsr()[free][:, free].tocsc()
        xs = x + spla.spsolve(H, -g)
        Es = fun(xs)
        if Es <= E:
            x, E = xs, Es
        report.iterations = 1
        report.energy_trace.append(E)
        gn = float(np.linalg.norm(energy.gradient(full(x))[free])) / g0
        report.final_gradient_norm = gn
        report.converged = True
        report.stop_reason = "linear solve"
        report.final_energy = energy.energy(full(x), 0.0)
        return x, report

    for it in range(1, pr.max_iterations + 1):
        H = energy.hessian(full(x)).tocsr()[free][:, free]
        d = _newton_direction(H, g)
        xn = None
        if d is not None:
            xn, En = _line_search(fun, x, E, g, d)
        if xn is None:
            # steepest descent with a Hessian-informed step length
            gHg = float(g @ (H @ g))
            step = float(g @ g) / gHg if gHg > 0 else 1.0 / max(g0, 1e-300)
            xn, En = _line_search(fun, x, E, g, -step * g)
        report.iterations = it
        if xn is None:
            report.stop_reason = "stagnation"
            report.converged = True
            break
        x, E = xn, En
        report.energy_trace.append(E)
        g = energy.gradient(full(x))[free]
        gn = float(np.linalg.norm(g)) / g0
        report.final_gradient_norm = gn
        if gn <= pr.tolerance:
            report.converged, report.stop_reason = True, "gradient"
            break
        tr = report.energy_trace
        if len(tr) > STAGNATION_STEPS and \
                tr[-1 - STAGNATION_STEPS] - tr[-1] <= STAGNATION_REL * abs(tr[-1]):
            report.converged, report.stop_reason = True, "stagnation"
            break
    report.final_gradient_norm = float(np.linalg.norm(energy.gradient(full(x))[free])) / g0
    report.final_energy = energy.energy(full(x), 0.0)
    if not report.converged:
        report.stop_reason = "max_iterations"
        raise NonConvergenceError(
            f"p={pr.p} solve did not converge in {pr.max_iterations} iterations "
            f"(relative gradient {report.final_gradient_norm:.3g})", report)
    return x, report


def maximum_principle_check(solution, problem: PSolveProblem, tol: float | None = None) -> bool:
    """True iff every free value lies within the range of the fixed values."""
    sol = np.asarray(solution, float)
    if not len(sol):
        return True
    lo, hi = float(np.min(problem.fixed_values)), float(np.max(problem.fixed_values))
    if tol is None:
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
    return bool(np.all(sol >= lo - tol) and np.all(sol <= hi + tol))


def solve_map_p_dirichlet(mesh: TriangleMesh, region, boundary_map, p: float = 2.0,
                          config: SolverConfig | None = None, initial=None):
    """Coordinate-wise p-harmonic map on a triangle set.

    ``boundary_map`` is either a mapping vertex -> point covering the region's
    boundary vertices or a full (n, 2) array. ``initial`` is an optional full
    (n, 2) array used as the warm start.

    Returns (map on the re-indexed region submesh, region vertex ids in
    submesh order, (report_u, report_v)).
    """
    cfg = config or SolverConfig(p=p)
    tris = np.unique(np.asarray(list(region) if not isinstance(region, np.ndarray)
                                else region, np.int64))
    allv, bnd, inner = region_vertices(mesh, tris)
    vals = np.full((mesh.n_vertices, 2), np.nan)
    if isinstance(boundary_map, dict):
        for v, xy in boundary_map.items():
            vals[int(v)] = xy
    else:
        vals[:] = np.asarray(boundary_map, float)
    if not np.all(np.isfinite(vals[bnd])):
        missing = bnd[~np.all(np.isfinite(vals[bnd]), axis=1)]
        raise InvalidArgumentError(f"no boundary value for vertices {missing[:10].tolist()}")
    out = vals.copy()
    reports = []
    for c in range(2):
        prob = PSolveProblem(mesh, inner, bnd, vals[bnd, c], p=cfg.p,
                             tolerance=cfg.tolerance, max_iterations=cfg.max_iterations,
                             regularization_delta=cfg.delta, triangles=tris,
                             fast_path_p2=cfg.fast_path_p2)
        guess = None if initial is None else np.asarray(initial, float)[inner, c]
        x, rep = solve_scalar_p_dirichlet(prob, guess)
        out[inner, c] = x
        reports.append(rep)
    local = np.full(mesh.n_vertices, -1)
    local[allv] = np.arange(len(allv))
    sub = TriangleMesh(mesh.vertices[allv], local[mesh.triangles[tris]])
    return DiscreteMap(sub, out[allv]), allv, tuple(reports)
