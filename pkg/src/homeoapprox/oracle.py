"""Closed-form annulus maps used as ground truth.

Source annulus r < |z| < R, target annulus 1 < |w| < (R + 1/R)/2. Complex
formulas are written out in real coordinates.

* ``nitsche``: z/|z| on r < |z| <= 1 (collapses the inner ring onto the unit
  circle) and (z + 1/conj(z))/2 outside.
* ``folded``: A z + B/conj(z), the harmonic map with the same boundary values,
  which folds along |z| = sqrt(B/A).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DomainError, InvalidArgumentError
from .geometry import DiscreteMap, TriangleMesh, annulus_domain, build_annulus_mesh

DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class AnnulusPair:
    r: float = 0.5
    R: float = 2.0

    def __post_init__(self):
        if not (0 < self.r < 1 < self.R):
            raise InvalidArgumentError(f"need 0 < r < 1 < R, got r={self.r}, R={self.R}")

    @property
    def target_inner(self) -> float:
        return 1.0

    @property
    def target_outer(self) -> float:
        return 0.5 * (self.R + 1.0 / self.R)


def _points(z) -> np.ndarray:
    z = np.asarray(z, float)
    if z.shape[-1] != 2:
        raise InvalidArgumentError("points must have a trailing dimension of 2")
    return z


def _check_domain(pair: AnnulusPair, rho: np.ndarray, what="point"):
    bad = np.flatnonzero((rho < pair.r * (1 - DOMAIN_TOL)) | (rho > pair.R * (1 + DOMAIN_TOL)))
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"{what} {i} has |z| = {float(rho.ravel()[i])!r}, "
                          f"outside [{pair.r}, {pair.R}]")


def nitsche_map(pair: AnnulusPair, z) -> np.ndarray:
    z = _points(z)
    rho = np.hypot(z[..., 0], z[..., 1])
    _check_domain(pair, rho.ravel())
    inner = (rho <= 1.0)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        collapsed = z / rho[..., None]
        outer = 0.5 * z * (1.0 + 1.0 / rho ** 2)[..., None]
    return np.where(inner, collapsed, outer)


def folded_coeffs(pair: AnnulusPair) -> tuple[float, float]:
    r, R = pair.r, pair.R
    den = 2.0 * (R * R - r * r)
    A = (R * R - 2 * r + 1) / den
    B = r * (2 * R * R - r * R * R - r) / den
    return A, B


def folded_harmonic(pair: AnnulusPair, z) -> np.ndarray:
    z = _points(z)
    rho2 = (z ** 2).sum(-1)
    _check_domain(pair, np.sqrt(rho2).ravel())
    A, B = folded_coeffs(pair)
    # 1/conj(z) = z/|z|^2
    return z * (A + B / rho2)[..., None]


def folding_radius(pair: AnnulusPair) -> float:
    A, B = folded_coeffs(pair)
    return math.sqrt(B / A)


def folded_jacobian(pair: AnnulusPair, rho) -> np.ndarray:
    """Analytic Jacobian A^2 - B^2/|z|^4 of the folded map."""
    A, B = folded_coeffs(pair)
    rho = np.asarray(rho, float)
    return A * A - B * B / rho ** 4


def annulus_dirichlet_energy(A: float, B: float, r: float, R: float) -> float:
    """Dirichlet energy of A z + B/conj(z) on r < |z| < R, where |D|^2 = 2(A^2 + B^2/|z|^4)."""
    return 2 * math.pi * (A * A * (R * R - r * r) + B * B * (r ** -2 - R ** -2))


def closed_form_dirichlet_energy(pair: AnnulusPair, which: str) -> float:
    """Dirichlet energy of an oracle map.

    which: "folded", "nitsche-outer-part" (1 < |z| < R), "nitsche-inner-part"
    (r < |z| < 1) or "nitsche" (both parts).
    """
    r, R = pair.r, pair.R
    if which == "folded":
        A, B = folded_coeffs(pair)
        return annulus_dirichlet_energy(A, B, r, R)
    if which == "nitsche-outer-part":
        # |Dh|^2 = (1 + |z|^-4)/2
        return 0.5 * math.pi * (R * R - R ** -2)
    if which == "nitsche-inner-part":
        # |D(z/|z|)|^2 = |z|^-2
        return 2 * math.pi * math.log(1 / r)
    if which == "nitsche":
        return (closed_form_dirichlet_energy(pair, "nitsche-outer-part")
                + closed_form_dirichlet_energy(pair, "nitsche-inner-part"))
    raise InvalidArgumentError(f"unknown oracle energy {which!r}")


def radial_energy_quadrature(pair: AnnulusPair, which: str) -> float:
    """Independent check: adaptive quadrature of the radial energy density."""
    r, R = pair.r, pair.R
    if which == "folded":
        A, B = folded_coeffs(pair)
        f = lambda t: 2 * (A * A + B * B / t ** 4) * 2 * math.pi * t
        return integrate.quad(f, r, R, epsabs=0, epsrel=1e-13)[0]
    outer = lambda t: 0.5 * (1 + t ** -4) * 2 * math.pi * t
    inner = lambda t: t ** -2 * 2 * math.pi * t
    parts = {
        "nitsche-outer-part": [(outer, 1, R)],
        "nitsche-inner-part": [(inner, r, 1)],
        "nitsche": [(inner, r, 1), (outer, 1, R)],
    }
    if which not in parts:
        raise InvalidArgumentError(f"unknown oracle energy {which!r}")
    return sum(integrate.quad(f, a, b, epsabs=0, epsrel=1e-13)[0] for f, a, b in parts[which])


FORMULAS = ("identity", "nitsche", "folded")


def sample_map_on_mesh(formula: str, mesh: TriangleMesh, pair: AnnulusPair) -> DiscreteMap:
    v = mesh.vertices
    rho = np.hypot(v[:, 0], v[:, 1])
    _check_domain(pair, rho, what="vertex")
    if formula == "identity":
        return DiscreteMap(mesh, v)
    if formula == "nitsche":
        return DiscreteMap(mesh, nitsche_map(pair, v))
    if formula == "folded":
        return DiscreteMap(mesh, folded_harmonic(pair, v))
    raise InvalidArgumentError(f"unknown formula {formula!r}; choose from {FORMULAS}")


def annulus_fixture_mesh(pair: AnnulusPair, radial_n: int, angular_n: int) -> TriangleMesh:
    """Annulus mesh with a ring exactly on |z| = 1 (geometric on each side).

    The Nitsche map changes formula on the unit circle, so the fixture keeps
    that circle as a mesh ring; ``radial_n`` is split between the two sides
    in proportion to log-radius.
    """
    lr, lR = math.log(pair.r), math.log(pair.R)
    n_in = max(1, round(radial_n * -lr / (lR - lr)))
    n_out = max(1, radial_n - n_in)
    inner = pair.r ** (1 - np.arange(n_in + 1) / n_in)
    outer = pair.R ** (np.arange(1, n_out + 1) / n_out)
    radii = np.concatenate([inner, outer])
    radii[0], radii[-1] = pair.r, pair.R
    return build_annulus_mesh(pair.r, pair.R, n_in + n_out, angular_n, radii=radii)


def nitsche_target(pair: AnnulusPair, angular_n: int):
    """Polygonal target whose vertices are the images of the boundary vertices."""
    return annulus_domain(pair.target_inner, pair.target_outer, angular_n)
