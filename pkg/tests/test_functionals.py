import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homeoapprox.errors import InvalidArgumentError, OrientationError
from homeoapprox.functionals import (
    coercivity_constants, energy_aniso, energy_dirichlet, energy_iso, energy_neohookean,
    triangle_differentials, w1p_distance,
)
from homeoapprox.geometry import DiscreteMap, build_annulus_mesh, build_rect_mesh
from homeoapprox.oracle import (
    AnnulusPair, closed_form_dirichlet_energy, radial_energy_quadrature, sample_map_on_mesh,
)

SQUARE = build_rect_mesh(1, 1, 4)


def affine(mesh, M, c=(0.0, 0.0)):
    return DiscreteMap(mesh, mesh.vertices @ np.asarray(M, float).T + np.asarray(c))


def random_map(seed, mesh=SQUARE, scale=1.0):
    rng = np.random.default_rng(seed)
    return DiscreteMap(mesh, scale * rng.standard_normal((mesh.n_vertices, 2)))


def test_identity_differentials():
    d = triangle_differentials(DiscreteMap.identity(build_annulus_mesh(0.5, 2, 2, 8)))
    assert np.allclose(d.grad_u, [1, 0], atol=1e-12)
    assert np.allclose(d.grad_v, [0, 1], atol=1e-12)
    assert np.allclose(d.jacobian, 1, atol=1e-12)
    assert d[0].jacobian == pytest.approx(1)


def test_scaling_jacobian():
    d = triangle_differentials(affine(SQUARE, [[2, 0], [0, 3]]))
    assert np.allclose(d.jacobian, 6)


def test_swap_jacobian():
    d = triangle_differentials(affine(SQUARE, [[0, 1], [1, 0]]))
    assert np.allclose(d.jacobian, -1)


def test_identity_energies():
    f = DiscreteMap.identity(SQUARE)
    assert energy_aniso(f, 2).total == pytest.approx(2.0, abs=1e-12)
    assert energy_iso(f, 4).total == pytest.approx(4.0, abs=1e-12)
    assert energy_neohookean(f).total == pytest.approx(3.0, abs=1e-12)


def test_identity_disc_energy_limit():
    # identity on an annulus approximating the disc: 2 * area -> 2*pi
    vals = [energy_aniso(DiscreteMap.identity(build_annulus_mesh(1e-4, 1, 8, m)), 2).total
            for m in (32, 128)]
    assert abs(vals[1] - 2 * math.pi) < abs(vals[0] - 2 * math.pi) < 0.05


@pytest.mark.parametrize("p", [1.5, 2, 3, 4])
def test_constant_map_energy(p):
    f = DiscreteMap(SQUARE, np.tile([0.3, -2.0], (SQUARE.n_vertices, 1)))
    assert energy_aniso(f, p).total == 0 and energy_iso(f, p).total == 0


def test_neohookean_stretch():
    assert energy_neohookean(affine(SQUARE, [[2, 0], [0, 0.5]])).total == pytest.approx(5.25)


def test_neohookean_refuses_flip():
    img = SQUARE.vertices.copy()
    img[12] = [0.0, 0.0]  # drag an interior vertex across its fan
    with pytest.raises(OrientationError):
        energy_neohookean(DiscreteMap(SQUARE, img))


@pytest.mark.parametrize("p", [1.0, 0.5, -2])
def test_bad_exponent(p):
    with pytest.raises(InvalidArgumentError):
        energy_iso(DiscreteMap.identity(SQUARE), p)


def test_distance_examples():
    f = DiscreteMap.identity(SQUARE)
    assert w1p_distance(f, f, 3) == 0
    assert w1p_distance(f, f.with_images(f.images + [0.3, 0.4]), 2) == pytest.approx(0.5)
    assert w1p_distance(f, affine(SQUARE, [[2, 0], [0, 1]]), 2) == pytest.approx(2.0)


def test_distance_mesh_mismatch():
    with pytest.raises(InvalidArgumentError):
        w1p_distance(DiscreteMap.identity(SQUARE),
                     DiscreteMap.identity(build_rect_mesh(1, 1, 3)), 2)


def test_folded_energy_matches_closed_form():
    pair = AnnulusPair(0.5, 2.0)
    exact = closed_form_dirichlet_energy(pair, "folded")
    assert exact == pytest.approx(radial_energy_quadrature(pair, "folded"), rel=1e-10)
    errs = []
    for n, m in [(8, 64), (16, 128), (32, 256)]:
        mesh = build_annulus_mesh(0.5, 2.0, n, m, spacing="uniform")
        errs.append(abs(energy_dirichlet(sample_map_on_mesh("folded", mesh, pair)).total - exact))
    assert errs[-1] / exact < 5e-3
    assert errs[0] / errs[1] > 3 and errs[1] / errs[2] > 3


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_aniso_equals_iso_at_two(seed):
    f = random_map(seed)
    assert energy_aniso(f, 2).total == pytest.approx(energy_iso(f, 2).total, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.floats(-4, 4).filter(lambda x: abs(x) > 1e-3),
       p=st.sampled_from([1.5, 2.0, 3.0, 4.0]))
def test_energy_scaling(seed, c, p):
    f = random_map(seed)
    g = f.with_images(c * f.images)
    assert energy_aniso(g, p).total == pytest.approx(abs(c) ** p * energy_aniso(f, p).total,
                                                     rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), p=st.floats(1.05, 6))
def test_coercivity_sandwich(seed, p):
    f = random_map(seed)
    c, C = coercivity_constants(p)
    a, i = energy_aniso(f, p).per_triangle, energy_iso(f, p).per_triangle
    assert np.all(c * i <= a * (1 + 1e-12)) and np.all(a <= C * i * (1 + 1e-12))


def test_energy_continuous_in_distance():
    f = random_map(7)
    E = energy_iso(f, 3).total
    rng = np.random.default_rng(8)
    noise = rng.standard_normal(f.images.shape)
    gaps, dists = [], []
    for t in (1e-1, 1e-2, 1e-3, 1e-4):
        g = f.with_images(f.images + t * noise)
        dists.append(w1p_distance(f, g, 3))
        gaps.append(abs(energy_iso(g, 3).total - E))
    assert all(b < a for a, b in zip(dists, dists[1:]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-2 * E
