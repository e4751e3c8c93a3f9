"""Benchmark configurations and the offline training pipeline that turns one into a RomBundle."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .deim import train as train_deim
from .errors import ConfigurationError, ParameterError
from .fem import MaterialData, MixedSpace
from .mesh import TriMesh, make_annulus_mesh, make_hexagon_mesh, make_rect_mesh
from .phasefield import (GeometryFamily, hex_damage_family, rotating_channel_family, spiral_family,
                         three_holes_family)
from .pod import (ModeBasis, SamplingPlan, SnapshotSet, build_field_snapshots, build_solution_snapshots,
                  epsilon_table, svd_modes)
from .rom import DEFAULT_CAP, RomBundle, balanced_basis, reduce_offline

log = logging.getLogger(__name__)

HEX_WELL_TAGS = tuple(f"well_{k}" for k in range(1, 7))

# Desk-scale defaults (coarse meshes, ~100 snapshots); "paper" sizes follow the published samplings.
_PRESETS: dict[str, dict] = {
    "benchmark1": {
        "family": spiral_family().to_dict(),
        "mesh": {"kind": "annulus", "r_inner": 0.25, "r_outer": 1.0, "resolution": 22},
        "material": {"mu": 0.5, "kappa": 5e-5, "pressures": {"outer": 1000.0, "inner": 0.0}},
        "space": {"slip_tags": ["slip"], "noslip_tags": [], "normal_flow_tags": []},
        "solution_plan": {"kind": "uniform", "n": 101},
        "field_plan": None,
        "unit_tags": [],
        "r_max": 50, "deim_max": 50,
        "paper": {"solution_plan": {"kind": "uniform", "n": 1001}},
    },
    "benchmark2": {
        "family": rotating_channel_family(delta=0.15).to_dict(),  # delta = channel width, as in benchmark 1
        "mesh": {"kind": "rect", "width": 1.0, "height": 1.0, "nx": 30, "ny": 30, "tag_scheme": "left_right"},
        "material": {"mu": 0.5, "kappa": 5e-5, "pressures": {"left": 1000.0, "right": 0.0}},
        "space": {"slip_tags": ["slip"], "noslip_tags": [], "normal_flow_tags": []},
        "solution_plan": {"kind": "uniform", "n": 101},
        "field_plan": None,
        "unit_tags": [],
        "r_max": 50, "deim_max": 50,
        "paper": {"solution_plan": {"kind": "uniform", "n": 1001}},
    },
    "benchmark3": {
        "family": three_holes_family().to_dict(),
        "mesh": {"kind": "rect", "width": 1.0, "height": 1.0, "nx": 50, "ny": 50, "tag_scheme": "bottom_top"},
        "material": {"mu": 0.5, "kappa": 5e-4, "pressures": {"bottom": 1000.0, "top": 0.0}},
        "space": {"slip_tags": ["slip"], "noslip_tags": [], "normal_flow_tags": []},
        "solution_plan": {"kind": "uniform", "n": 5},
        "field_plan": None,
        "unit_tags": [],
        "r_max": 50, "deim_max": 50,
        "paper": {"solution_plan": {"kind": "uniform", "n": 21}},
    },
    "hexagon": {
        "family": hex_damage_family(delta=4.0).to_dict(),
        "mesh": {"kind": "hexagon", "well_distance": 15.0, "well_radius": 0.25, "resolution": 4},
        "material": {"mu": 1e-3, "kappa": 1e-13,
                     "pressures": {"production": 0.0, **{t: 1.0e5 for t in HEX_WELL_TAGS}}},
        "space": {"slip_tags": ["slip"], "noslip_tags": [], "normal_flow_tags": []},
        "solution_plan": {"kind": "union", "parts": [{"kind": "tensor", "levels": [[0.0, 1.0]] * 6},
                                                      {"kind": "random", "n": 36, "seed": 11}]},
        "field_plan": {"kind": "union", "parts": [{"kind": "uniform", "n": 3},
                                                   {"kind": "random", "n": 1200, "seed": 12}]},
        "unit_tags": list(HEX_WELL_TAGS),
        "r_max": 60, "deim_max": 50,
        "paper": {"family": {"delta": 2.0}, "mesh": {"resolution": 9},
                  "solution_plan": {"kind": "union",
                                    "parts": [{"kind": "tensor", "levels": [[0.25, 0.5, 0.75, 1.0]] * 6},
                                              {"kind": "random", "n": 6000, "seed": 11}]},
                  "field_plan": None},
    },
}

PRESET_NAMES = tuple(_PRESETS)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k not in ("solution_plan", "field_plan"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_config(name: str, scale: str = "desk", **overrides) -> dict:
    """Plain-dict configuration of a benchmark (JSON-serialisable)."""
    if name not in _PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    if scale not in ("desk", "paper"):
        raise ConfigurationError(f"unknown scale {scale!r}")
    cfg = copy.deepcopy(_PRESETS[name])
    paper = cfg.pop("paper")
    if scale == "paper":
        cfg = _merge(cfg, paper)
    cfg["name"] = name
    cfg["seed"] = 0
    return _merge(cfg, overrides)


@dataclass
class Problem:
    """Instantiated configuration: family, mesh, space and material."""

    config: dict
    family: GeometryFamily
    mesh: TriMesh
    space: MixedSpace
    material: MaterialData

    @property
    def unit_tags(self) -> list[str]:
        return list(self.config.get("unit_tags") or [])


def build_mesh(spec: Mapping) -> TriMesh:
    kind = spec.get("kind")
    args = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "file":
        if "path" not in args:
            raise ConfigurationError("mesh kind 'file' needs a 'path'")
        return TriMesh.read(args["path"])
    try:
        if kind == "annulus":
            return make_annulus_mesh(**args)
        if kind == "rect":
            return make_rect_mesh(**args)
        if kind == "hexagon":
            return make_hexagon_mesh(**args)
    except TypeError as exc:
        raise ConfigurationError(f"bad mesh parameters for {kind!r}: {exc}") from exc
    raise ConfigurationError(f"unknown mesh kind {kind!r}")


def build_problem(config: Mapping, mesh: TriMesh | None = None) -> Problem:
    for key in ("family", "material", "space"):
        if key not in config:
            raise ConfigurationError(f"config lacks {key!r}")
    fam = config["family"]
    family = GeometryFamily.from_dict(fam) if "lower" in fam else None
    if family is None:
        raise ConfigurationError("family needs kind, delta, alpha_shear, constants, lower, upper")
    if mesh is None:
        if "mesh" not in config:
            raise ConfigurationError("config lacks 'mesh'")
        mesh = build_mesh(config["mesh"])
    m = config["material"]
    material = MaterialData(float(m["mu"]), float(m["kappa"]), dict(m.get("pressures", {})))
    sp_cfg = config["space"]
    space = MixedSpace(mesh, tuple(sp_cfg.get("slip_tags", ("slip",))), tuple(sp_cfg.get("noslip_tags", ())),
                       tuple(sp_cfg.get("normal_flow_tags", ())))
    return Problem(dict(config), family, mesh, space, material)


@dataclass
class TrainingResult:
    bundle: RomBundle
    solution_snapshots: SnapshotSet
    field_snapshots: dict
    bases: dict = field(default_factory=dict)
    eps: dict = field(default_factory=dict)


def plan_from(spec: Mapping | None) -> SamplingPlan | None:
    return None if spec is None else SamplingPlan.from_dict(spec)


def solution_snapshots(problem: Problem, plan: SamplingPlan, workers: int = 1) -> SnapshotSet:
    betas = plan.sample(problem.family.lower, problem.family.upper)
    return build_solution_snapshots(problem.space, problem.material, problem.family, betas,
                                    None if problem.unit_tags else problem.material.pressures,
                                    unit_tags=problem.unit_tags or None, seed=plan.seed, workers=workers)


def train_bundle(problem: Problem, r_max: int | None = None, deim_max: int | None = None,
                 solutions: SnapshotSet | None = None, fields: dict | None = None,
                 workers: int = 1) -> TrainingResult:
    """Snapshots -> SVD -> DEIM -> offline reduction, with the largest requested counts.

    Smaller ROMs are obtained afterwards with :meth:`RomBundle.truncated`.
    """
    cfg = problem.config
    r_max = int(r_max or cfg.get("r_max", 50))
    deim_max = int(deim_max or cfg.get("deim_max", DEFAULT_CAP))
    if solutions is None:
        solutions = solution_snapshots(problem, plan_from(cfg["solution_plan"]), workers)
    if fields is None:
        fplan = plan_from(cfg.get("field_plan"))
        betas = (np.unique(solutions.betas, axis=0) if fplan is None
                 else fplan.sample(problem.family.lower, problem.family.upper))
        fields = build_field_snapshots(problem.family, problem.mesh, betas, ("xi", "zeta", "t"), workers=workers)
    r = min(r_max, *solutions.matrix.shape)
    if r < 1:
        raise ParameterError("insufficient snapshots")
    plain = svd_modes(solutions, r)
    eps = {"solution": epsilon_table(plain)}
    if cfg.get("balanced_pod", True):
        bases: dict[str, ModeBasis] = {"solution": balanced_basis(problem.space, solutions, r)}
    else:
        bases = {"solution": plain}
    models = []
    for k in ("xi", "zeta", "t"):
        X = fields[k].matrix
        n = min(deim_max, X.shape[1], np.linalg.matrix_rank(X))
        bases[k] = svd_modes(fields[k], n)
        eps[k] = epsilon_table(bases[k])
        models.append(train_deim(bases[k], n, problem.mesh.vertices))
    prov = {"preset": cfg.get("name"), "seed": cfg.get("seed"), "solution_plan": cfg.get("solution_plan"),
            "field_plan": cfg.get("field_plan"), "n_solution_snapshots": solutions.n_samples,
            "n_field_snapshots": fields["xi"].n_samples,
            "eps": {k: v.tolist() for k, v in eps.items()}}
    bundle = reduce_offline(problem.space, problem.material, problem.family, bases["solution"], *models,
                            provenance=prov)
    return TrainingResult(bundle, solutions, fields, bases, eps)


def config_summary(cfg: Mapping) -> dict[str, Any]:
    fam = cfg["family"]
    return {"name": cfg.get("name"), "family": fam["kind"], "mesh": cfg.get("mesh", {}).get("kind"),
            "r_max": cfg.get("r_max"), "deim_max": cfg.get("deim_max")}
