"""Command-line driver: mesh, snapshot, train, study, solve, site and calibrate.

Every command reads one JSON config (``--config``).  A config either names a
preset (``{"preset": "benchmark1", "scale": "desk", ...overrides}``) or spells
out family, mesh, material and space in full.  Outputs go to ``--out-dir``;
CSV files start with a provenance comment line.

Exit codes: 0 success, 2 usage/configuration, 3 non-convergence, 4 numerics.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .calibration import (MeasurementSet, calibrate, smooth_damage_field, synthesize_measurements,
                          write_damage_csv)
from .errors import FormatError, NumericsError, PhasefieldRBError
from .phasefield import GeometryFamily
from .pod import SnapshotSet, build_field_snapshots
from .presets import (PRESET_NAMES, build_mesh, build_problem, plan_from, preset_config, solution_snapshots,
                      train_bundle)
from .rom import RomBundle, plan_mode_counts, solve_online, sweep_max_error
from .site import SiteModel, hex_grid_centers, honeymoon_site, site_from_config, write_hexagon_csv, write_well_csv

log = logging.getLogger("phasefield_rb")

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_NUMERICS = 0, 2, 3, 4
FIELD_KINDS = ("xi", "zeta", "t")

try:
    __version__ = version("phasefield-rb")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.0.0"


class UsageError(Exception):
    """Bad command-line or config input (exit code 2)."""


# -- config ----------------------------------------------------------------------

def load_config(path: str | None, seed: int | None = None) -> dict:
    """Read a JSON config and expand a preset reference into a full configuration."""
    if path is None:
        raise UsageError("--config is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path!r} not found")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    if "preset" in raw:
        name = raw.pop("preset")
        if name not in PRESET_NAMES:
            raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
        cfg = preset_config(name, raw.pop("scale", "desk"), **raw)
    else:
        cfg = raw
    if seed is not None:
        cfg["seed"] = int(seed)
    mesh = cfg.get("mesh", {})
    if isinstance(mesh, dict) and mesh.get("kind") == "file":
        mp = Path(mesh.get("path", ""))
        if not mp.is_absolute():
            mp = p.parent / mp
        if not mp.is_file():
            raise UsageError(f"mesh file {str(mp)!r} not found")
        cfg["mesh"] = {**mesh, "path": str(mp)}
    return cfg


def config_sha256(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def provenance_line(cfg: dict) -> str:
    return f"# tool=phasefield-rb version={__version__} config_sha256={config_sha256(cfg)}"


def write_csv(path: Path, cfg: dict, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(provenance_line(cfg) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out(args) -> Path:
    d = Path(args.out_dir)
    if not args.dry_run:
        d.mkdir(parents=True, exist_ok=True)
    return d


def _bundle_path(cfg: dict, out: Path) -> Path:
    return Path(cfg.get("bundle", out / "bundle.rom"))


def _load_bundle(cfg: dict, out: Path) -> RomBundle:
    path = _bundle_path(cfg, out)
    if not path.is_file():
        raise UsageError(f"bundle {str(path)!r} not found; run 'train' first or set 'bundle' in the config")
    return RomBundle.load(path)


# -- commands --------------------------------------------------------------------

def cmd_mesh(args, cfg: dict) -> int:
    out = _out(args)
    if args.dry_run:
        print(f"would build mesh {cfg['mesh']} -> {out / 'mesh.txt'}")
        return EXIT_OK
    mesh = build_mesh(cfg["mesh"])
    mesh.write(out / "mesh.txt")
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, tags {', '.join(mesh.tags)}")
    return EXIT_OK


def _field_betas(problem, solutions: SnapshotSet | None):
    fplan = plan_from(problem.config.get("field_plan"))
    if fplan is not None:
        return fplan.sample(problem.family.lower, problem.family.upper)
    if solutions is not None:
        return np.unique(solutions.betas, axis=0)
    return plan_from(problem.config["solution_plan"]).sample(problem.family.lower, problem.family.upper)


def cmd_snapshot(args, cfg: dict) -> int:
    out = _out(args)
    plan = plan_from(cfg["solution_plan"])
    if args.dry_run:
        fam = GeometryFamily.from_dict(cfg["family"])
        n = len(plan.sample(fam.lower, fam.upper))
        print(f"plan {cfg['solution_plan']}: {n} parameter points; kinds xi, zeta, t, solution -> {out}")
        return EXIT_OK
    problem = build_problem(cfg)
    sols = solution_snapshots(problem, plan, args.threads)
    fields = build_field_snapshots(problem.family, problem.mesh, _field_betas(problem, sols), FIELD_KINDS,
                                   workers=args.threads)
    for k in FIELD_KINDS:
        fields[k].save(out / f"{k}.snap")
        print(f"{k}: {fields[k].n_rows} x {fields[k].n_samples}")
    sols.save(out / "solution.snap")
    print(f"solution: {sols.n_rows} x {sols.n_samples}")
    return EXIT_OK


def _cached_snapshots(out: Path):
    paths = {k: out / f"{k}.snap" for k in FIELD_KINDS + ("solution",)}
    if all(p.is_file() for p in paths.values()):
        return SnapshotSet.load(paths["solution"]), {k: SnapshotSet.load(paths[k]) for k in FIELD_KINDS}
    return None, None


def cmd_train(args, cfg: dict) -> int:
    out = _out(args)
    modes = cfg.get("modes", {})
    if args.dry_run:
        print(f"would train {cfg.get('name', 'custom')} (r_max={cfg.get('r_max')}, deim_max={cfg.get('deim_max')}, "
              f"modes={modes}) -> {_bundle_path(cfg, out)}")
        return EXIT_OK
    problem = build_problem(cfg)
    sols, fields = _cached_snapshots(out)
    if sols is not None:
        print(f"using snapshots in {out}")
    res = train_bundle(problem, solutions=sols, fields=fields, workers=args.threads)
    eps = res.eps
    for k, table in eps.items():
        write_csv(out / f"eps_{k}.csv", cfg, ["n", "epsilon"], ((n + 1, e) for n, e in enumerate(table)))
    bundle = res.bundle
    r = int(modes.get("r", bundle.r))
    if modes.get("guided"):
        nx, nz, nt = bundle.counts
        plan = plan_mode_counts(eps["solution"], eps["xi"][:nx], eps["zeta"][:nz], eps["t"][:nt], r,
                                cap=int(modes.get("cap", 50)))
        counts = plan.as_tuple()
        print(f"guided counts for r={r}: n_xi={counts[0]} n_zeta={counts[1]} n_t={counts[2]} "
              f"(average epsilon {plan.achieved:.3e}, target {plan.target:.3e}"
              f"{'' if plan.reached else ', cap reached'})")
    else:
        counts = tuple(int(modes.get(k, n)) for k, n in zip(("n_xi", "n_zeta", "n_t"), bundle.counts))
    bundle = bundle.truncated(r, *counts)
    bundle.provenance["counts"] = [bundle.r, *bundle.counts]
    bundle.save(_bundle_path(cfg, out))
    print(f"bundle: r={bundle.r}, DEIM counts {bundle.counts}, "
          f"{bundle.Kphi.shape[0]} phi-blocks -> {_bundle_path(cfg, out)}")
    return EXIT_OK


def _validation_snapshots(cfg: dict, out: Path, problem, threads: int) -> SnapshotSet:
    study = cfg.get("study", {})
    if "plan" in study:
        return solution_snapshots(problem, plan_from(study["plan"]), threads)
    path = out / "solution.snap"
    if path.is_file():
        return SnapshotSet.load(path)
    return solution_snapshots(problem, plan_from(cfg["solution_plan"]), threads)


def cmd_study(args, cfg: dict) -> int:
    out = _out(args)
    study = cfg.get("study", {})
    rs = list(study.get("r", []))
    deim = [tuple(int(v) for v in c) for c in study.get("deim", [])]
    guided = bool(study.get("guided", False))
    if not rs or (not deim and not guided):
        raise UsageError("study grid is empty: give 'study': {'r': [...], 'deim': [[n_xi, n_zeta, n_t], ...]} "
                         "or 'guided': true")
    grid = [(r, c) for c in deim for r in rs] + [(r, None) for r in rs if guided]
    if args.dry_run:
        print(f"would evaluate {len(grid)} (r, DEIM) combinations")
        return EXIT_OK
    problem = build_problem(cfg)
    bundle = _load_bundle(cfg, out).attach_space(problem.mesh)
    snaps = _validation_snapshots(cfg, out, problem, args.threads)
    eps = {k: np.asarray(v) for k, v in bundle.provenance.get("eps", {}).items()}
    rows = []
    for r, c in grid:
        if c is None:
            if not eps:
                raise UsageError("guided study needs epsilon tables in the bundle provenance")
            nx, nz, nt = bundle.counts   # the plan may only use modes the bundle carries
            c = plan_mode_counts(eps["solution"], eps["xi"][:nx], eps["zeta"][:nz], eps["t"][:nt], r).as_tuple()
        err = sweep_max_error(bundle.truncated(r, *c), snaps, problem.space)
        rows.append((r, *c, err))
        print(f"r={r:3d} DEIM={c}: max relative L2 error {err:.4e}")
    write_csv(out / "study.csv", cfg, ["r", "n_xi", "n_zeta", "n_t", "max_rel_L2"], rows)
    return EXIT_OK


def cmd_solve(args, cfg: dict) -> int:
    out = _out(args)
    beta = cfg.get("beta")
    if beta is None:
        raise UsageError("solve needs 'beta' in the config")
    if args.dry_run:
        print(f"would solve the ROM at beta={beta}")
        return EXIT_OK
    bundle = _load_bundle(cfg, out)
    u, info = solve_online(bundle, beta, cfg.get("pressures"), return_info=True)
    fluxes = {t: float(bundle.F[:, j] @ u) for j, t in enumerate(bundle.tags)}
    write_csv(out / "solve.csv", cfg, ["tag", "inflow"], sorted(fluxes.items()))
    print(f"reduced solve: residual {info['residual']:.2e}, condition {info['cond']:.2e}")
    return EXIT_OK


def _build_site(cfg: dict, bundle: RomBundle) -> SiteModel:
    sc = cfg.get("site", {})
    if "config" in sc:
        return site_from_config(json.loads(Path(sc["config"]).read_text()), bundle)
    layout = sc.get("layout", "honeymoon")
    damage = sc.get("damage", 0.0)
    inflows = sc.get("inflows", 1.0)
    if layout == "honeymoon":
        site = honeymoon_site(bundle, None, inflows)
    else:
        if isinstance(layout, dict) and "grid" in layout:
            centers = hex_grid_centers(*layout["grid"], site_distance(bundle))
        elif isinstance(layout, dict) and "centers" in layout:
            centers = np.asarray(layout["centers"], float)
        else:
            raise UsageError(f"unknown site layout {layout!r}")
        site = SiteModel(centers, bundle, None, inflows, sc.get("well_policy", "shared"),
                         int(sc.get("extra_wells", 4)))
    site.set_damage(np.broadcast_to(np.asarray(damage, float), (site.n_hex, 6)))
    return site


def site_distance(bundle: RomBundle) -> float:
    return float(bundle.family.constants.get("well_distance", 15.0))


def _site_bundle(cfg: dict, out: Path) -> RomBundle:
    bundle = _load_bundle(cfg, out)
    r = cfg.get("site", {}).get("r")
    return bundle.truncated(int(r)) if r else bundle


def cmd_site(args, cfg: dict) -> int:
    out = _out(args)
    if args.dry_run:
        print(f"would solve site {cfg.get('site', {})}")
        return EXIT_OK
    site = _build_site(cfg, _site_bundle(cfg, out))
    sol = site.solve()
    line = provenance_line(cfg)
    write_well_csv(out / "wells.csv", site, sol, line)
    write_hexagon_csv(out / "hexagons.csv", site, sol, line)
    site.write_config(out / "site.json", str(_bundle_path(cfg, out)))
    print(f"site: {site.n_hex} hexagons, {site.n_wells} wells, {site.n_dofs} dofs; "
          f"total outflow {sol.outflows.sum():.6g} l/s, open-corner leakage {sol.leakage:.6g} l/s")
    return EXIT_OK


def cmd_calibrate(args, cfg: dict) -> int:
    out = _out(args)
    cc = cfg.get("calibration", {})
    if args.dry_run:
        print(f"would calibrate with {cc}")
        return EXIT_OK
    site = _build_site(cfg, _site_bundle(cfg, out))
    line = provenance_line(cfg)
    if "measurements" in cc:
        meas = MeasurementSet.read_csv(cc["measurements"], site.inflows)
        if meas.outflows.shape != (site.n_hex,):
            raise UsageError(f"{meas.outflows.size} measurements for {site.n_hex} hexagons")
    else:
        syn = cc.get("synthetic", {})
        truth_spec = syn.get("truth", {"seed": cfg.get("seed", 0)})
        if "damage" in truth_spec:
            truth = np.broadcast_to(np.asarray(truth_spec["damage"], float), (site.n_hex, 6))
        else:
            truth = smooth_damage_field(site, **truth_spec)
        meas = synthesize_measurements(site, truth, amplitude=float(syn.get("noise", 0.01)),
                                       seed=int(syn.get("noise_seed", cfg.get("seed", 0))))
        write_damage_csv(out / "true_damage.csv", truth, line)
    meas.write_csv(out / "measurements.csv", line)
    state = calibrate(site, meas, eta0=float(cc.get("eta0", 0.5)), h=float(cc.get("h", 0.01)),
                      max_iter=int(cc.get("max_iter", 20)), tol=float(cc.get("tol", 1e-6)),
                      max_halvings=int(cc.get("max_halvings", 8)), workers=args.threads,
                      grow=float(cc.get("grow", 1.0)))
    state.write_log(out / "calibration_log.csv", line)
    write_damage_csv(out / "damage.csv", state.damage, line)
    print(f"calibration: {state.iterations} iterations, flow error {state.history[0]:.4e} -> "
          f"{state.error:.4e} ({state.reason})")
    return EXIT_OK if state.converged else EXIT_NOT_CONVERGED


COMMANDS = {"mesh": cmd_mesh, "snapshot": cmd_snapshot, "train": cmd_train, "study": cmd_study,
            "solve": cmd_solve, "site": cmd_site, "calibrate": cmd_calibrate}

HELP = {"mesh": "build and write the mesh of a config",
        "snapshot": "compute field and solution snapshot containers",
        "train": "SVD, DEIM and offline reduction into a ROM bundle plus epsilon tables",
        "study": "maximum ROM error over a grid of mode counts",
        "solve": "one online ROM solve",
        "site": "assemble and solve a multi-hexagon site",
        "calibrate": "fit sextant damage to production outflow measurements"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent solves")
    common.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")
    common.add_argument("--out-dir", default=".", help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="phasefield-rb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse reports usage errors with exit code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except PhasefieldRBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: bad configuration: {exc!r}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
