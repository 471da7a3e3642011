"""Energies and per-triangle differentials of piecewise-linear maps.

The gradient of a linear interpolant is constant on each triangle, so every
energy here is an exact finite sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTriangleError, InvalidArgumentError, OrientationError
from .geometry import DiscreteMap, TriangleMesh, signed_areas


def basis_gradients(mesh: TriangleMesh) -> np.ndarray:
    """Gradients of the three hat functions on every triangle, shape (m, 3, 2)."""
    cached = mesh.__dict__.get("_basis_gradients")
    if cached is not None:
        return cached
    p = mesh.vertices[mesh.triangles]
    area2 = 2.0 * signed_areas(mesh.vertices, mesh.triangles)
    bad = np.flatnonzero(area2 <= 0)
    if bad.size:
        raise DegenerateTriangleError(int(bad[0]), float(area2[bad[0]] / 2))
    G = np.empty((len(p), 3, 2))
    for i in range(3):
        e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
        G[:, i, 0] = -e[:, 1] / area2
        G[:, i, 1] = e[:, 0] / area2
    G.setflags(write=False)
    mesh.__dict__["_basis_gradients"] = G
    return G


@dataclass(frozen=True)
class TriangleDifferential:
    grad_u: np.ndarray
    grad_v: np.ndarray
    jacobian: float
    area: float


@dataclass(frozen=True)
class Differentials:
    """Vectorized per-triangle differentials; index it for a single triangle."""

    grad_u: np.ndarray    # (m, 2)
    grad_v: np.ndarray    # (m, 2)
    jacobian: np.ndarray  # (m,)
    area: np.ndarray      # (m,)

    def __len__(self):
        return len(self.area)

    def __getitem__(self, t: int) -> TriangleDifferential:
        return TriangleDifferential(self.grad_u[t], self.grad_v[t],
                                    float(self.jacobian[t]), float(self.area[t]))

    def __iter__(self):
        return (self[t] for t in range(len(self)))

    @property
    def frobenius_sq(self) -> np.ndarray:
        return (self.grad_u ** 2).sum(1) + (self.grad_v ** 2).sum(1)


def triangle_differentials(fmap: DiscreteMap) -> Differentials:
    mesh = fmap.mesh
    G = basis_gradients(mesh)
    vals = fmap.images[mesh.triangles]  # (m, 3, 2)
    gu = np.einsum("mi,mik->mk", vals[:, :, 0], G)
    gv = np.einsum("mi,mik->mk", vals[:, :, 1], G)
    jac = gu[:, 0] * gv[:, 1] - gu[:, 1] * gv[:, 0]
    return Differentials(gu, gv, jac, np.asarray(mesh.areas))


@dataclass(frozen=True)
class EnergyReport:
    p: float
    total: float
    per_triangle: np.ndarray

    def to_json(self) -> dict:
        return {"p": self.p, "total": self.total, "per_triangle": self.per_triangle.tolist()}


def _check_p(p: float) -> float:
    p = float(p)
    if not p > 1:
        raise InvalidArgumentError(f"exponent p must exceed 1, got {p}")
    return p


def _report(p, per) -> EnergyReport:
    # math.fsum keeps the total independent of summation order
    per = np.asarray(per, float)
    per.setflags(write=False)
    return EnergyReport(p, math.fsum(per), per)


def _pow_norm(sq: np.ndarray, p: float) -> np.ndarray:
    return sq if p == 2 else sq ** (p / 2)


def energy_aniso(fmap: DiscreteMap, p: float) -> EnergyReport:
    """Coordinate-wise p-energy: sum of area*(|grad u|^p + |grad v|^p)."""
    p = _check_p(p)
    d = triangle_differentials(fmap)
    su = (d.grad_u ** 2).sum(1)
    sv = (d.grad_v ** 2).sum(1)
    return _report(p, d.area * (_pow_norm(su, p) + _pow_norm(sv, p)))


def energy_iso(fmap: DiscreteMap, p: float) -> EnergyReport:
    """Isotropic p-energy: sum of area*|Dh|^p with the Frobenius norm."""
    p = _check_p(p)
    d = triangle_differentials(fmap)
    return _report(p, d.area * _pow_norm(d.frobenius_sq, p))


def energy_dirichlet(fmap: DiscreteMap) -> EnergyReport:
    return energy_iso(fmap, 2.0)


def energy_neohookean(fmap: DiscreteMap) -> EnergyReport:
    """Sum of area*(|Dh|^2 + 1/J); refuses maps with a nonpositive Jacobian."""
    d = triangle_differentials(fmap)
    bad = np.flatnonzero(d.jacobian <= 0)
    if bad.size:
        raise OrientationError(bad)
    return _report(2.0, d.area * (d.frobenius_sq + 1.0 / d.jacobian))


def coercivity_constants(p: float) -> tuple[float, float]:
    """(c, C) with c*iso <= aniso <= C*iso for every map."""
    p = _check_p(p)
    k = 2.0 ** abs(1 - p / 2)
    return (1.0 / k, 1.0) if p >= 2 else (1.0, k)


def w1p_distance(f: DiscreteMap, g: DiscreteMap, p: float) -> float:
    """Royden-type distance: (sum area*|D(f-g)|^p)^(1/p) + max vertex |f-g|."""
    p = _check_p(p)
    if f.mesh is not g.mesh:
        if (f.mesh.triangles.shape != g.mesh.triangles.shape
                or not np.array_equal(f.mesh.triangles, g.mesh.triangles)
                or not np.array_equal(f.mesh.vertices, g.mesh.vertices)):
            raise InvalidArgumentError("maps live on different meshes")
    diff = DiscreteMap(f.mesh, f.images - g.images)
    semi = energy_iso(diff, p).total ** (1.0 / p)
    sup = float(np.max(np.hypot(*(f.images - g.images).T))) if f.mesh.n_vertices else 0.0
    return semi + sup
