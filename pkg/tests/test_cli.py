import json

import numpy as np
import pytest

from homeoapprox.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, dumps, main
from homeoapprox.geometry import DiscreteMap, annulus_domain, build_annulus_mesh, load_map

SMALL = {"fixture": {"kind": "nitsche", "radial_n": 4, "angular_n": 32}}


def write(path, obj):
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture
def identity_case(tmp_path):
    mesh = build_annulus_mesh(0.5, 2, 6, 48)
    write(tmp_path / "map.json", DiscreteMap.identity(mesh).to_json())
    write(tmp_path / "target.json", annulus_domain(0.5, 2, 48).to_json())
    return write(tmp_path / "cfg.json", {"map": "map.json", "target": "target.json"})


def test_check_identity_passes(identity_case, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["check", "--config", str(identity_case), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "all Jacobians positive" in text and "FAIL" not in text
    m = manifest(out)
    assert m["exit_code"] == 0 and m["error"] is None
    assert (out / "check.svg").is_file()


def test_check_folded_fails(tmp_path):
    cfg = write(tmp_path / "cfg.json", {"fixture": dict(SMALL["fixture"], kind="folded")})
    out = tmp_path / "out"
    assert main(["check", "--config", str(cfg), "--out", str(out)]) == EXIT_FAIL
    assert "Jacobians" in manifest(out)["error"]


def test_missing_config_is_input_error(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["check", "--config", str(tmp_path / "none.json"), "--out", str(out)]) \
        == EXIT_INPUT
    assert "not found" in capsys.readouterr().err
    assert manifest(out)["exit_code"] == EXIT_INPUT


def test_missing_map_path_is_input_error(tmp_path):
    cfg = write(tmp_path / "cfg.json", {"map": "absent.json"})
    out = tmp_path / "out"
    assert main(["energy", "--config", str(cfg), "--out", str(out)]) == EXIT_INPUT
    assert "absent.json" in manifest(out)["error"]


def test_unknown_config_key(tmp_path):
    cfg = write(tmp_path / "cfg.json", {"mapp": "x"})
    assert main(["energy", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_bad_json_reports_position(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{\"p\": 2,}")
    assert main(["energy", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "line 1" in capsys.readouterr().err


def test_oracle_values(tmp_path):
    out = tmp_path / "out"
    assert main(["oracle", "--out", str(out)]) == EXIT_OK
    v = json.loads((out / "oracle.json").read_text())
    assert v["A"] == pytest.approx(8 / 15) and v["B"] == pytest.approx(11 / 30)
    assert v["folding_radius"] == pytest.approx(np.sqrt(11 / 16))
    h = load_map(out / "nitsche_map.json")
    assert h.mesh.n_triangles == 2 * 16 * 256


def test_map_json_round_trip(tmp_path):
    mesh = build_annulus_mesh(0.5, 2, 3, 16)
    rng = np.random.default_rng(1)
    f = DiscreteMap(mesh, rng.standard_normal((mesh.n_vertices, 2)))
    g = load_map(write(tmp_path / "m.json", f.to_json()))
    assert np.array_equal(g.images, f.images)
    assert np.array_equal(g.mesh.triangles, mesh.triangles)


def test_runs_are_byte_identical(tmp_path):
    cfg = write(tmp_path / "cfg.json", dict(SMALL, fixture=dict(SMALL["fixture"], jitter=0.1)))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["energy", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
        outs.append(out)
    for f in outs[0].iterdir():
        if f.name == "manifest.json":
            a, b = manifest(outs[0]), manifest(outs[1])
            a.pop("wall_time_s"), b.pop("wall_time_s")
            assert a == b
        else:
            assert f.read_bytes() == (outs[1] / f.name).read_bytes()


def test_cover_and_solve(tmp_path):
    cfg = write(tmp_path / "cfg.json", SMALL)
    assert main(["cover", "--config", str(cfg), "--out", str(tmp_path / "c"),
                 "--epsilon", "0.6"]) == EXIT_OK
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert manifest(tmp_path / "s")["config"]["p"] == 2.0


def test_homeomorphize_identity(identity_case, tmp_path):
    out = tmp_path / "h"
    assert main(["homeomorphize", "--config", str(identity_case), "--out", str(out),
                 "--epsilon", "0.8"]) == EXIT_OK
    rep = json.loads((out / "chain_report.json").read_text())
    assert rep["injective"] and rep["final_sup_distance_to_input"] <= 1e-12


def test_homeomorphize_folded_input_fails(tmp_path):
    cfg = write(tmp_path / "cfg.json", {"fixture": dict(SMALL["fixture"], kind="folded")})
    out = tmp_path / "h"
    assert main(["homeomorphize", "--config", str(cfg), "--out", str(out)]) == EXIT_FAIL
    assert "PreconditionError" in manifest(out)["error"]
