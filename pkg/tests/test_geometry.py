import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homeoapprox.errors import InvalidArgumentError, MeshParseError
from homeoapprox.geometry import (
    DiscreteMap, TriangleMesh, annulus_domain, build_annulus_mesh, build_rect_mesh,
    connected_component, load_map, load_mesh, map_from_dict, mesh_from_dict, rectangle_domain,
    shoelace, signed_areas,
)


def test_rect_single_cell():
    m = build_rect_mesh(1, 1, 1)
    assert (m.n_vertices, m.n_triangles, len(m.boundary_loops)) == (4, 2, 1)


def test_rect_two_by_two():
    m = build_rect_mesh(1, 1, 2)
    assert (m.n_vertices, m.n_triangles) == (9, 8)


def test_rect_area_conserved():
    assert abs(build_rect_mesh(2, 1, 4).total_area() - 2.0) < 1e-12


@pytest.mark.parametrize("args", [(0, 1, 2), (1, -1, 2), (1, 1, 0), (1, 1, 1.5)])
def test_rect_rejects_bad_arguments(args):
    with pytest.raises(InvalidArgumentError):
        build_rect_mesh(*args)


def test_annulus_one_ring():
    m = build_annulus_mesh(0.5, 2, 1, 4)
    assert (m.n_vertices, m.n_triangles, len(m.boundary_loops)) == (8, 8, 2)


def test_annulus_equal_radii_rejected():
    with pytest.raises(InvalidArgumentError):
        build_annulus_mesh(1, 1, 1, 4)


def test_annulus_area_converges():
    exact = math.pi * (4 - 0.25)
    errs = []
    for m in (16, 32, 64, 128):
        errs.append(abs(build_annulus_mesh(0.5, 2, 8, m).total_area() - exact))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # polygonal approximation error is O(1/m^2)
    assert errs[-1] < 1e-2 and errs[-2] / errs[-1] > 3.5


def test_annulus_vertices_on_exact_circles():
    m = build_annulus_mesh(0.5, 2, 3, 12, spacing="uniform")
    rho = np.hypot(*m.vertices.T)
    assert np.allclose(np.sort(np.unique(np.round(rho, 12))), [0.5, 1.0, 1.5, 2.0])


@settings(max_examples=30, deadline=None)
@given(w=st.floats(0.1, 5), h=st.floats(0.1, 5), n=st.integers(1, 9))
def test_rect_invariants(w, h, n):
    m = build_rect_mesh(w, h, n)
    assert m.euler_characteristic() == 1
    assert np.all(m.areas > 0)
    loops_area = sum(shoelace(m.vertices[list(l)]) for l in m.boundary_loops)
    assert math.isclose(m.total_area(), loops_area, rel_tol=1e-10)
    assert math.isclose(m.total_area(), w * h, rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0.05, 0.9), R=st.floats(1.1, 4), n=st.integers(1, 6),
       m=st.integers(3, 40), spacing=st.sampled_from(["geometric", "uniform"]))
def test_annulus_invariants(r, R, n, m, spacing):
    mesh = build_annulus_mesh(r, R, n, m, spacing=spacing)
    # disc with one hole: V - E + F = 0
    assert mesh.euler_characteristic() == 0
    assert len(mesh.boundary_loops) == 2
    assert np.all(signed_areas(mesh.vertices, mesh.triangles) > 0)
    loops_area = sum(shoelace(mesh.vertices[list(l)]) for l in mesh.boundary_loops)
    assert math.isclose(mesh.total_area(), loops_area, rel_tol=1e-10)


def test_boundary_loops_oriented():
    m = build_annulus_mesh(0.5, 2, 2, 10)
    areas = sorted(shoelace(m.vertices[list(l)]) for l in m.boundary_loops)
    # the hole is traversed clockwise
    assert areas[0] < 0 < areas[1]


def test_inverted_triangle_rejected():
    with pytest.raises(InvalidArgumentError, match="nonpositive signed area"):
        TriangleMesh(np.array([[0, 0], [1, 0], [0, 1.0]]), np.array([[0, 2, 1]]))


def test_inconsistent_orientation_rejected():
    v = np.array([[0, 0], [1, 0], [0, 1.0], [1, 1]])
    # second triangle repeats the directed edge 0->1
    with pytest.raises(InvalidArgumentError):
        TriangleMesh(v, np.array([[0, 1, 2], [0, 1, 3]]))


# ------------------------------------------------------------ components

def test_component_isolated_seed():
    m = build_rect_mesh(1, 1, 2)
    assert connected_component(m, [3], within=[3, 4]) == {3}


def test_component_all_seeds():
    m = build_rect_mesh(1, 1, 3)
    assert connected_component(m, range(m.n_triangles)) == set(range(m.n_triangles))


def test_component_two_patches():
    m = build_rect_mesh(1, 1, 2)
    # triangles 1 and 6 meet only at the center vertex
    assert connected_component(m, [0], within=[0, 1, 6, 7]) == {0, 1}
    assert connected_component(m, [7], within=[0, 1, 6, 7]) == {6, 7}


def test_component_bad_seed():
    with pytest.raises(InvalidArgumentError):
        connected_component(build_rect_mesh(1, 1, 1), [5])


# ------------------------------------------------------------------ JSON

def test_map_json_round_trip(tmp_path):
    mesh = build_annulus_mesh(0.5, 2, 2, 9)
    rng = np.random.default_rng(3)
    f = DiscreteMap(mesh, mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape))
    p = tmp_path / "map.json"
    p.write_text(json.dumps(f.to_json()))
    g = load_map(p)
    assert np.array_equal(g.images, f.images)
    assert np.array_equal(g.mesh.triangles, mesh.triangles)
    assert np.array_equal(load_mesh(p).vertices, mesh.vertices)


def test_parse_error_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"vertices": [[0, 0],\n [1, 0]\n "triangles": []}')
    with pytest.raises(MeshParseError, match="line 3"):
        load_mesh(p)


@pytest.mark.parametrize("doc, needle", [
    ({"triangles": [[0, 1, 2]]}, "missing field 'vertices'"),
    ({"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1]]}, r"triangles\[0\]"),
    ({"vertices": [[0, 0], [1, "a"], [0, 1]], "triangles": [[0, 1, 2]]}, r"vertices\[1\]"),
    ({"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1, 2.5]]}, "non-integer"),
    ({"vertices": [[0, 0], [1, 0], [0, 1]], "triangles": [[0, 1, 7]]}, "out of range"),
])
def test_parse_error_names_field(doc, needle):
    with pytest.raises(MeshParseError, match=needle):
        mesh_from_dict(doc)


def test_map_images_shape_checked():
    doc = build_rect_mesh(1, 1, 1).to_json()
    doc["images"] = [[0, 0]]
    with pytest.raises(MeshParseError):
        map_from_dict(doc)


def test_domain_contains_and_json():
    Y = annulus_domain(1.0, 2.0, 64)
    inside = Y.contains([[1.5, 0], [0.5, 0], [3, 0]])
    assert inside.tolist() == [True, False, False]
    assert Y.from_json(json.loads(json.dumps(Y.to_json()))).area() == pytest.approx(Y.area())
    assert rectangle_domain(0, 0, 2, 1).area() == pytest.approx(2.0)
