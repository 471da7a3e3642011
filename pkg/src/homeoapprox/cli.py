"""Command-line runner.

    homeoapprox <command> [--config cfg.json] [--out dir] [--seed n]
                          [--p P] [--epsilon EPS] [--tolerance TOL]

Commands: solve, energy, cover, homeomorphize, sequence, check, oracle.
Inputs come from the config file: paths to mesh/map/target JSON files, or
a generated annulus fixture. Every run writes manifest.json next to its
results. Exit status: 0 success, 1 failed check or solver, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import oracle
from .cover import build_cell_cover, verify_cover
from .diagnostics import check_injectivity, check_monotone_fibers, fit_modulus_constant
from .errors import (ConsistencyError, InvalidArgumentError, MeshParseError,
                     NonConvergenceError, PreconditionError, ResourceError)
from .functionals import energy_aniso, energy_dirichlet, energy_iso, energy_neohookean
from .geometry import DiscreteMap, PolygonalDomain, TriangleMesh, load_map, load_mesh
from .homeomorphize import (ChainAbortedError, ChainConfig, approximation_sequence,
                            homeomorphize_chain, nonincreasing_within)
from .psolver import SolverConfig, solve_map_p_dirichlet
from .svg import write_map_svg

COMMANDS = ("solve", "energy", "cover", "homeomorphize", "sequence", "check", "oracle")
CONFIG_KEYS = {"command", "mesh", "map", "target", "fixture", "p", "epsilon", "epsilons",
               "solver", "chain", "snapshots", "fold_radius", "seed", "modulus_pairs",
               "sample_grid"}
FIXTURE_KEYS = {"kind", "r", "R", "radial_n", "angular_n", "jitter"}

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class ConfigError(Exception):
    """Bad configuration or unreadable input; maps to exit status 2."""


class CheckFailed(Exception):
    """A check or solve failed after the artifacts were written."""


# ------------------------------------------------------------------ JSON

def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def dumps(obj) -> str:
    # json writes floats with repr, the shortest string that round-trips
    return json.dumps(_plain(obj), indent=1, allow_nan=True) + "\n"


def read_json(path: Path) -> dict:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def save_json(obj, path: Path) -> Path:
    path.write_text(dumps(obj), encoding="utf-8")
    return path


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    command: str
    out: Path
    seed: int = 0
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict = field(default_factory=dict)
    p: float = 2.0
    epsilon: float = 0.3
    tolerance: float | None = None

    @property
    def solver(self) -> SolverConfig:
        d = dict(self.raw.get("solver") or {})
        d["p"] = self.p
        if self.tolerance is not None:
            d["tolerance"] = self.tolerance
        return SolverConfig.from_dict(d)

    @property
    def chain(self) -> ChainConfig:
        d = dict(self.raw.get("chain") or {})
        d["p"] = self.p
        d["epsilon"] = self.epsilon
        d["solver"] = self.solver.to_dict()
        return ChainConfig.from_dict(d)

    def path(self, key: str) -> Path | None:
        v = self.raw.get(key)
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError(f"config field {key!r} must be a path string")
        p = Path(v)
        if not p.is_absolute():
            p = self.base_dir / p
        if not p.is_file():
            raise ConfigError(f"{key} file not found: {p}")
        return p

    def echo(self) -> dict:
        d = dict(self.raw)
        d.update(command=self.command, seed=self.seed, p=self.p, epsilon=self.epsilon)
        if self.tolerance is not None:
            d["tolerance"] = self.tolerance
        return d


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    base = Path.cwd()
    if args.config:
        cp = Path(args.config)
        if not cp.is_file():
            raise ConfigError(f"config file not found: {cp}")
        raw = read_json(cp)
        base = cp.resolve().parent
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("command") not in (None, args.command):
        raise ConfigError(f"config is for command {raw['command']!r}, not {args.command!r}")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    p = args.p if args.p is not None else float(raw.get("p", 2.0))
    eps = args.epsilon if args.epsilon is not None else float(raw.get("epsilon", 0.3))
    return ExperimentConfig(args.command, Path(args.out), seed, base, raw, p, eps, args.tolerance)


# -------------------------------------------------------------- fixtures

def _fixture(cfg: ExperimentConfig):
    """(map, target, pair) from the fixture block, or None."""
    fx = cfg.raw.get("fixture")
    if fx is None:
        return None
    if not isinstance(fx, dict):
        raise ConfigError("fixture must be an object")
    unknown = set(fx) - FIXTURE_KEYS
    if unknown:
        raise ConfigError(f"unknown fixture keys: {sorted(unknown)}")
    kind = fx.get("kind", "nitsche")
    if kind not in oracle.FORMULAS:
        raise ConfigError(f"fixture kind must be one of {oracle.FORMULAS}, got {kind!r}")
    pair = oracle.AnnulusPair(float(fx.get("r", 0.5)), float(fx.get("R", 2.0)))
    na = int(fx.get("angular_n", 256))
    mesh = oracle.annulus_fixture_mesh(pair, int(fx.get("radial_n", 16)), na)
    jitter = float(fx.get("jitter", 0.0))
    if jitter:
        mesh = _jitter(mesh, jitter, cfg.seed)
    fmap = oracle.sample_map_on_mesh(kind, mesh, pair)
    return fmap, oracle.nitsche_target(pair, na), pair


def _jitter(mesh: TriangleMesh, amount: float, seed: int) -> TriangleMesh:
    """Move interior vertices by up to ``amount`` times the shortest incident edge."""
    if not 0 <= amount < 0.3:
        raise ConfigError("fixture jitter must lie in [0, 0.3)")
    rng = np.random.default_rng(seed)
    v = np.array(mesh.vertices, float)
    e = mesh.edges
    ln = np.hypot(*(v[e[:, 0]] - v[e[:, 1]]).T)
    short = np.full(len(v), np.inf)
    np.minimum.at(short, e[:, 0], ln)
    np.minimum.at(short, e[:, 1], ln)
    step = rng.uniform(-1, 1, size=v.shape) * (amount * short)[:, None]
    step[mesh.is_boundary_vertex] = 0.0
    return TriangleMesh(v + step, mesh.triangles)


def _load_map(cfg: ExperimentConfig, need_target: bool = False):
    fx = _fixture(cfg)
    target = _load_target(cfg)
    if fx is not None:
        fmap, t, pair = fx
        return fmap, target or t, pair
    p = cfg.path("map")
    if p is None:
        raise ConfigError("config needs a 'map' path or a 'fixture'")
    fmap = load_map(p)
    if need_target and target is None:
        raise ConfigError("config needs a 'target' path or a 'fixture'")
    return fmap, target, None


def _load_target(cfg: ExperimentConfig) -> PolygonalDomain | None:
    p = cfg.path("target")
    if p is None:
        return None
    return PolygonalDomain.from_json(read_json(p))


# -------------------------------------------------------------- commands

def cmd_solve(cfg: ExperimentConfig, out: Path) -> dict:
    fx = _fixture(cfg)
    if fx is not None:
        data, _, _ = fx
        mesh = data.mesh
    else:
        mp = cfg.path("map")
        if mp is not None:
            data = load_map(mp)
            mesh = data.mesh
        else:
            mpath = cfg.path("mesh")
            if mpath is None:
                raise ConfigError("solve needs a 'mesh' or 'map' path or a 'fixture'")
            mesh = load_mesh(mpath)
            data = DiscreteMap.identity(mesh)
    region = np.arange(mesh.n_triangles)
    sub, verts, reps = solve_map_p_dirichlet(mesh, region, data.images, cfg.p, cfg.solver)
    img = np.array(data.images, float)
    img[verts] = sub.images
    sol = DiscreteMap(mesh, img)
    save_json(sol.to_json(), out / "solution.json")
    report = {"p": cfg.p, "reports": [r.to_json() for r in reps],
              "converged": all(r.converged for r in reps),
              "census": check_injectivity(sol).census.to_json(with_lists=False)}
    save_json(report, out / "solve_report.json")
    write_map_svg(sol, out / "solution.svg", title="p-harmonic solution",
                  fold_radius=cfg.raw.get("fold_radius"))
    if not report["converged"]:
        raise CheckFailed("solver did not converge")
    return report


def cmd_energy(cfg: ExperimentConfig, out: Path) -> dict:
    fmap, _, _ = _load_map(cfg)
    rep = {"p": cfg.p,
           "aniso": energy_aniso(fmap, cfg.p).total,
           "iso": energy_iso(fmap, cfg.p).total,
           "dirichlet": energy_dirichlet(fmap).total}
    try:
        rep["neohookean"] = energy_neohookean(fmap).total
    except ValueError as exc:
        rep["neohookean"] = None
        rep["neohookean_error"] = str(exc)
    save_json(rep, out / "energy.json")
    return rep


def cmd_cover(cfg: ExperimentConfig, out: Path) -> dict:
    target = _load_target(cfg)
    if target is None:
        fx = _fixture(cfg)
        if fx is None:
            raise ConfigError("cover needs a 'target' path or a 'fixture'")
        target = fx[1]
    ch = cfg.chain
    cover = build_cell_cover(target, cfg.epsilon, ch.overlap_fraction, ch.max_cells)
    ver = verify_cover(cover, target)
    save_json(cover.to_json(), out / "cover.json")
    rep = ver.to_json()
    rep.pop("misses")
    rep["n_cells"] = len(cover)
    rep["side"] = cover.side
    rep["halvings"] = cover.halvings
    save_json(rep, out / "cover_report.json")
    if not ver.passed:
        raise CheckFailed("; ".join(ver.problems))
    return rep


def _chain_failed(rep) -> list:
    bad = []
    if rep.aborted:
        bad.append(rep.abort_reason)
    if not rep.injective:
        bad.append("output is not injective")
    if not rep.sup_bound_holds:
        bad.append("sup distance exceeds the bound")
    if not rep.energy_monotone_modulo_repair:
        bad.append("energy increased beyond the recorded repair")
    return bad


def cmd_homeomorphize(cfg: ExperimentConfig, out: Path) -> dict:
    fmap, target, _ = _load_map(cfg, need_target=True)
    snap = str(out / "snapshots") if cfg.raw.get("snapshots") else None
    try:
        h, rep = homeomorphize_chain(fmap, target, None, cfg.p, cfg.chain, snapshot_dir=snap)
    except ChainAbortedError as exc:
        save_json(exc.report.to_json(), out / "chain_report.json")
        save_json(exc.map.to_json(), out / "map.json")
        raise
    save_json(rep.to_json(), out / "chain_report.json")
    save_json(h.to_json(), out / "map.json")
    write_map_svg(h, out / "summary.svg", target=target,
                  title=f"chain output, epsilon {cfg.epsilon:g}")
    bad = _chain_failed(rep)
    summary = {"injective": rep.injective, "census": rep.jacobian_census,
               "sup_distance": rep.final_sup_distance_to_input, "sup_bound": rep.sup_bound,
               "initial_energy": rep.initial_energy, "final_energy": rep.final_energy}
    if bad:
        raise CheckFailed("; ".join(bad))
    return summary


def cmd_sequence(cfg: ExperimentConfig, out: Path) -> dict:
    fmap, target, _ = _load_map(cfg, need_target=True)
    eps = cfg.raw.get("epsilons", [0.6, 0.3, 0.15])
    if not isinstance(eps, list) or not eps:
        raise ConfigError("epsilons must be a nonempty list")
    runs = approximation_sequence(fmap, target, cfg.p, eps, cfg.chain)
    reports, bad = [], []
    for k, (h, rep) in enumerate(runs):
        save_json(h.to_json(), out / f"map_{k}.json")
        reports.append(rep.to_json())
        bad += [f"epsilon {rep.epsilon:g}: {b}" for b in _chain_failed(rep)]
    dist = [rep.royden_distance for _, rep in runs]
    mono = nonincreasing_within(dist)
    save_json({"epsilons": eps, "royden_distances": dist, "nonincreasing_within_10pct": mono,
               "reports": reports}, out / "sequence.json")
    write_map_svg(runs[-1][0], out / "summary.svg", target=target,
                  title=f"chain output, epsilon {float(eps[-1]):g}")
    if not mono:
        bad.append("Royden distances are not nonincreasing")
    if bad:
        raise CheckFailed("; ".join(bad))
    return {"royden_distances": dist}


def cmd_check(cfg: ExperimentConfig, out: Path) -> dict:
    fmap, target, _ = _load_map(cfg)
    inj = check_injectivity(fmap)
    rows = [("all Jacobians positive", inj.census.all_positive),
            ("no overlapping triangles", not inj.witnesses)]
    rep = {"injectivity": inj.to_json()}
    if target is not None:
        mono = check_monotone_fibers(fmap, target, sample_grid=int(cfg.raw.get("sample_grid", 40)))
        rows.append(("monotone fibers", mono.passed))
        rep["monotonicity"] = mono.to_json()
    count = int(cfg.raw.get("modulus_pairs", 2000))
    rep["modulus_constant"] = fit_modulus_constant(fmap, count=count, seed=cfg.seed)
    rep["table"] = [{"check": name, "pass": bool(ok)} for name, ok in rows]
    save_json(rep, out / "check.json")
    census = inj.census
    print(f"{'check':<28}result")
    for name, ok in rows:
        print(f"{name:<28}{'pass' if ok else 'FAIL'}")
    print(f"{'jacobian census':<28}+{census.positive} 0:{census.zero} -{census.negative}")
    print(f"{'modulus constant (fit)':<28}{rep['modulus_constant']!r}")
    write_map_svg(fmap, out / "check.svg", target=target, title="check")
    failed = [name for name, ok in rows if not ok]
    if failed:
        raise CheckFailed("failed: " + ", ".join(failed))
    return {"passed": True}


def cmd_oracle(cfg: ExperimentConfig, out: Path) -> dict:
    fx = dict(cfg.raw.get("fixture") or {})
    unknown = set(fx) - FIXTURE_KEYS
    if unknown:
        raise ConfigError(f"unknown fixture keys: {sorted(unknown)}")
    pair = oracle.AnnulusPair(float(fx.get("r", 0.5)), float(fx.get("R", 2.0)))
    A, B = oracle.folded_coeffs(pair)
    values = {"r": pair.r, "R": pair.R, "target_inner": pair.target_inner,
              "target_outer": pair.target_outer, "A": A, "B": B,
              "folding_radius": oracle.folding_radius(pair),
              "energy": {w: oracle.closed_form_dirichlet_energy(pair, w)
                         for w in ("folded", "nitsche", "nitsche-inner-part",
                                   "nitsche-outer-part")}}
    save_json(values, out / "oracle.json")
    mesh = oracle.annulus_fixture_mesh(pair, int(fx.get("radial_n", 16)),
                                       int(fx.get("angular_n", 256)))
    for kind in ("nitsche", "folded"):
        fmap = oracle.sample_map_on_mesh(kind, mesh, pair)
        save_json(fmap.to_json(), out / f"{kind}_map.json")
        write_map_svg(fmap, out / f"{kind}.svg", title=kind,
                      fold_radius=values["folding_radius"] if kind == "folded" else None)
    return values


HANDLERS = {"solve": cmd_solve, "energy": cmd_energy, "cover": cmd_cover,
            "homeomorphize": cmd_homeomorphize, "sequence": cmd_sequence,
            "check": cmd_check, "oracle": cmd_oracle}


# ------------------------------------------------------------------ main

def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "shapely", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homeoapprox",
                                 description="p-harmonic solves and homeomorphic approximation "
                                             "of planar maps")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="experiment config JSON")
    ap.add_argument("--out", default="out", help="output directory (default: out)")
    ap.add_argument("--seed", type=int, default=None, help="seed for randomized fixtures")
    ap.add_argument("--p", type=float, default=None, help="exponent p > 1")
    ap.add_argument("--epsilon", type=float, default=None, help="cell diameter bound")
    ap.add_argument("--tolerance", type=float, default=None, help="solver tolerance")
    return ap


def run(cfg: ExperimentConfig) -> int:
    out = cfg.out
    t0 = time.perf_counter()
    status, result, error = EXIT_OK, None, None
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = HANDLERS[cfg.command](cfg, out)
    except (ConfigError, MeshParseError, InvalidArgumentError, OSError, ResourceError) as exc:
        status, error = EXIT_INPUT, f"{type(exc).__name__}: {exc}"
    except (CheckFailed, NonConvergenceError, PreconditionError, ConsistencyError) as exc:
        status, error = EXIT_FAIL, f"{type(exc).__name__}: {exc}"
    manifest = {"command": cfg.command, "config": cfg.echo(), "versions": _versions(),
                "wall_time_s": time.perf_counter() - t0, "exit_code": status,
                "error": error, "result": result}
    if out.is_dir():
        save_json(manifest, out / "manifest.json")
    if error:
        print(f"homeoapprox {cfg.command}: {error}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
    except (ConfigError, InvalidArgumentError, ValueError, OSError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        print(f"homeoapprox {args.command}: {error}", file=sys.stderr)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            save_json({"command": args.command, "config": vars(args), "versions": _versions(),
                       "wall_time_s": 0.0, "exit_code": EXIT_INPUT, "error": error,
                       "result": None}, out / "manifest.json")
        except OSError:
            pass
        return EXIT_INPUT
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
