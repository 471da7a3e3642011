import xml.etree.ElementTree as ET

import numpy as np

from homeoapprox.geometry import DiscreteMap, build_rect_mesh, rectangle_domain
from homeoapprox.svg import emit_svg, write_map_svg

from _cases import nitsche_fixture

NS = "{http://www.w3.org/2000/svg}"


def _groups(doc):
    root = ET.fromstring(doc.encode())
    return root, {(g.get("class")): g for g in root.iter(NS + "g") if g.get("class")}


def test_identity_svg_is_well_formed():
    mesh = build_rect_mesh(1, 1, 4)
    doc = emit_svg(DiscreteMap.identity(mesh), target=rectangle_domain(0, 0, 1, 1), title="id")
    root, groups = _groups(doc)
    assert root.tag == NS + "svg"
    # every triangle drawn once per panel, all positive
    assert set(groups) == {"positive"}
    paths = [p for p in root.iter(NS + "path") if p.get("class") is None]
    assert len(paths) == 2 * mesh.n_triangles
    assert "id: positive 32, zero 0, negative 0" in doc
    assert len([p for p in root.iter(NS + "path") if p.get("class") == "target"]) == 1


def test_folded_svg_marks_negative_and_fold():
    _, hbar, _ = nitsche_fixture(6, 48)
    doc = emit_svg(hbar, fold_radius=0.83)
    root, groups = _groups(doc)
    assert {"positive", "negative"} <= set(groups)
    assert len(list(root.iter(NS + "circle"))) == 1


def test_svg_is_deterministic(tmp_path):
    h, _, Y = nitsche_fixture(6, 48)
    a = write_map_svg(h, tmp_path / "a.svg", target=Y).read_bytes()
    b = write_map_svg(h, tmp_path / "b.svg", target=Y).read_bytes()
    assert a == b


def test_title_is_escaped():
    mesh = build_rect_mesh(1, 1, 1)
    doc = emit_svg(DiscreteMap.identity(mesh), title="a<b & c")
    assert "a&lt;b &amp; c" in doc
    ET.fromstring(doc.encode())


def test_collapsed_map_draws_zero_class():
    mesh = build_rect_mesh(1, 1, 2)
    doc = emit_svg(DiscreteMap(mesh, np.zeros((mesh.n_vertices, 2))))
    _, groups = _groups(doc)
    assert set(groups) == {"zero"}
