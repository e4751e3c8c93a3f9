"""Offline reduction onto a solution mode basis, online reduced solves and DEIM mode-count planning.

The reduced operator at a parameter point is

    K(beta) = K_0 + sum_k th^phi_k K^phi_k + sum_k th^psi_k K^psi_k + sum_k th^alpha_k K^alpha_k

with ``K_0 = V^T [[0, B^T], [-B, 0]] V`` and the parametric blocks
``V^T A_k V`` of the viscous, Darcy and shear-friction velocity forms
evaluated on the DEIM mode products.  Because the pair ordering of the
squared expansion is nested, a bundle trained with ``r`` solution modes and
``N`` DEIM modes per field contains every smaller bundle as leading
sub-blocks (see :meth:`RomBundle.truncated`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import container
from .deim import DeimModel, affine_weights, scalar_mode_products, tensor_mode_products
from .errors import AssemblyError, FormatError, NumericsError, ParameterError
from .fem import MaterialData, MixedSolution, MixedSpace
from .mesh import TriMesh
from .phasefield import GeometryFamily
from .pod import ModeBasis, SnapshotSet, svd_modes

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"PFRBROM1"
BUNDLE_VERSION = 1
DEFAULT_CAP = 50
_CHUNK = 4096  # elements per chunk in the nodal reduction


# -- nodal reduction ----------------------------------------------------------

def nodal_reduced_forms(space: MixedSpace, Vvel: np.ndarray) -> dict[str, np.ndarray]:
    """Reduced velocity forms for a unit nodal weight at every vertex.

    Returns arrays of shape ``(nv, r, r)``: ``visc[v] = Vᵀ K(e_v) V`` for the
    viscous form weighted by the hat function of ``v``, and ``xx``, ``xy``,
    ``yy`` for the tensor mass form (``xx + yy`` is the scalar mass form).
    Any nodal weight ``w`` then reduces to ``sum_v w_v C[v]`` exactly.
    """
    if Vvel.shape[0] != space.n_vel:
        raise AssemblyError(f"velocity modes have {Vvel.shape[0]} rows, space has {space.n_vel}")
    Kv, Mv = space.element_matrices
    loc = space.local_velocity_dofs()
    tri = space.mesh.triangles
    nv, nt, r = space.nv, space.nt, Vvel.shape[1]
    out = {k: np.zeros((nv, r * r)) for k in ("visc", "xx", "xy", "yy")}
    for s in range(0, nt, _CHUNK):
        e = slice(s, min(s + _CHUNK, nt))
        ne = e.stop - e.start
        Ve = Vvel[loc[e]]  # (ne, 8, r)
        Vx, Vy = Ve[:, :4], Ve[:, 4:]
        S = sp.csr_matrix((np.ones(3 * ne), (tri[e].ravel(), np.arange(3 * ne))), shape=(nv, 3 * ne))
        KV = np.einsum("evab,ebr->evar", Kv[e], Ve)
        out["visc"] += S @ np.einsum("eas,evar->evsr", Ve, KV).reshape(3 * ne, r * r)
        MVx = np.einsum("evab,ebr->evar", Mv[e], Vx)
        MVy = np.einsum("evab,ebr->evar", Mv[e], Vy)
        out["xx"] += S @ np.einsum("eas,evar->evsr", Vx, MVx).reshape(3 * ne, r * r)
        out["yy"] += S @ np.einsum("eas,evar->evsr", Vy, MVy).reshape(3 * ne, r * r)
        xy = np.einsum("eas,evar->evsr", Vx, MVy)
        out["xy"] += S @ (xy + xy.transpose(0, 1, 3, 2)).reshape(3 * ne, r * r)
    return {k: v.reshape(nv, r, r) for k, v in out.items()}


def balanced_basis(space: MixedSpace, snapshots: SnapshotSet | np.ndarray, r: int) -> ModeBasis:
    """POD of the joint snapshots with the velocity rows weighted to the pressure scale.

    With strongly Darcy-dominated materials the pressure part of a snapshot is
    many orders of magnitude larger than the velocity part, so a plain SVD
    keeps the velocity part of its modes only to a few relative digits (the
    modes are then visibly not divergence-free).  Scaling the velocity rows by
    ``w = ||X_p|| / ||X_u||`` before the SVD and undoing it afterwards gives
    modes that are orthonormal in the weighted inner product and carry both
    parts at full precision.  The span of the first ``r`` modes differs from
    the plain POD, but the full span (and hence exact reproduction) is the same.
    """
    X = snapshots.matrix if isinstance(snapshots, SnapshotSet) else np.asarray(snapshots, float)
    if X.shape[0] != space.n_full:
        raise AssemblyError(f"snapshots have {X.shape[0]} rows, space has {space.n_full} dofs")
    nu = space.n_vel
    nrm_u, nrm_p = np.linalg.norm(X[:nu]), np.linalg.norm(X[nu:])
    w = nrm_p / nrm_u if nrm_u > 0 and nrm_p > 0 else 1.0
    Xs = X.copy()
    Xs[:nu] *= w
    b = svd_modes(Xs, r)
    U = b.modes.copy()
    U[:nu] /= w
    kind = snapshots.kind if isinstance(snapshots, SnapshotSet) else "solution"
    return ModeBasis(kind, U, b.sigma, {"method": "balanced", "velocity_weight": float(w)})


# -- bundle -------------------------------------------------------------------

@dataclass(eq=False)
class RomBundle:
    """Everything the online phase needs; immutable after training."""

    modes: np.ndarray            # (n_full, r) solution modes
    K0: np.ndarray               # (r, r)
    Kphi: np.ndarray             # (N_xi(N_xi+1)/2, r, r)
    Kpsi: np.ndarray
    Kalpha: np.ndarray
    F: np.ndarray                # (r, n_tags) reduced unit-pressure loads
    tags: tuple
    deim: dict                   # kind -> DeimModel for xi, zeta, t
    family: GeometryFamily
    material: MaterialData
    space_config: dict
    provenance: dict = field(default_factory=dict)
    space: MixedSpace | None = None

    @property
    def r(self) -> int:
        return self.modes.shape[1]

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.deim["xi"].n, self.deim["zeta"].n, self.deim["t"].n

    def truncated(self, r: int | None = None, n_xi: int | None = None, n_zeta: int | None = None,
                  n_t: int | None = None) -> "RomBundle":
        """Bundle with fewer solution and/or DEIM modes (leading sub-blocks, no recomputation)."""
        r = self.r if r is None else r
        nx, nz, nt = self.counts
        n_xi, n_zeta, n_t = n_xi or nx, n_zeta or nz, n_t or nt
        if not (1 <= r <= self.r and 1 <= n_xi <= nx and 1 <= n_zeta <= nz and 1 <= n_t <= nt):
            raise ParameterError(f"cannot truncate bundle ({self.r}, {nx}, {nz}, {nt}) "
                                 f"to ({r}, {n_xi}, {n_zeta}, {n_t})")

        def sub(m: DeimModel, n: int) -> DeimModel:
            if n == m.n:
                return m
            return DeimModel(m.kind, m.modes[:, :n], m.indices[:n],
                             None if m.points is None else m.points[:n],
                             None if m.components is None else m.components[:n])

        def pairs(n):
            return n * (n + 1) // 2

        return RomBundle(self.modes[:, :r], self.K0[:r, :r], self.Kphi[:pairs(n_xi), :r, :r],
                         self.Kpsi[:pairs(n_zeta), :r, :r], self.Kalpha[:pairs(n_t), :r, :r], self.F[:r],
                         self.tags, {"xi": sub(self.deim["xi"], n_xi), "zeta": sub(self.deim["zeta"], n_zeta),
                                     "t": sub(self.deim["t"], n_t)},
                         self.family, self.material, self.space_config, dict(self.provenance), self.space)

    # -- online ---------------------------------------------------------------

    def weights(self, beta):
        return affine_weights(self.deim["xi"], self.deim["zeta"], self.deim["t"], self.family, beta)

    def reduced_matrix(self, beta) -> np.ndarray:
        """``K(beta)`` (r x r) from the precomputed blocks."""
        w = self.weights(beta)
        return (self.K0 + np.tensordot(w.theta_phi, self.Kphi, 1) + np.tensordot(w.theta_psi, self.Kpsi, 1)
                + np.tensordot(w.theta_alpha, self.Kalpha, 1))

    def reduced_load(self, pressures: Mapping[str, float] | None = None) -> np.ndarray:
        if pressures is None:
            pressures = self.material.pressures
        p = np.zeros(len(self.tags))
        for tag, value in pressures.items():
            if tag not in self.tags:
                raise ParameterError(f"no pressure boundary {tag!r} in bundle (have {self.tags})")
            p[self.tags.index(tag)] = value
        return self.F @ p

    def lift(self, coeffs: np.ndarray) -> MixedSolution | np.ndarray:
        """Full coefficient vector ``V u`` (a MixedSolution when a space is attached)."""
        x = self.modes @ np.asarray(coeffs, float)
        return MixedSolution(self.space, x) if self.space is not None else x

    def attach_space(self, mesh: TriMesh) -> "RomBundle":
        if mesh.sha256() != self.space_config["mesh_sha256"]:
            raise ParameterError("mesh does not match the one the bundle was trained on")
        self.space = MixedSpace(mesh, self.space_config["slip_tags"], self.space_config["noslip_tags"],
                                self.space_config["normal_flow_tags"])
        return self

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {"version": BUNDLE_VERSION, "r": self.r, "counts": list(self.counts), "tags": list(self.tags),
                "family": self.family.to_dict(),
                "material": {"mu": self.material.mu, "kappa": self.material.kappa,
                             "pressures": dict(self.material.pressures)},
                "space": self.space_config, "provenance": self.provenance}
        arrays = {"modes": self.modes, "K0": self.K0, "Kphi": self.Kphi, "Kpsi": self.Kpsi,
                  "Kalpha": self.Kalpha, "F": self.F}
        for k in ("xi", "zeta", "t"):
            arrays.update(self.deim[k].to_arrays(f"deim_{k}_"))
        container.write(path, BUNDLE_MAGIC, meta, arrays)

    @classmethod
    def load(cls, path: str | Path, mesh: TriMesh | None = None) -> "RomBundle":
        meta, a = container.read(path, BUNDLE_MAGIC)
        if meta.get("version") != BUNDLE_VERSION:
            raise FormatError(f"unsupported bundle version {meta.get('version')}")
        m = meta["material"]
        deim = {k: DeimModel.from_arrays(k, a, f"deim_{k}_") for k in ("xi", "zeta", "t")}
        b = cls(a["modes"], a["K0"], a["Kphi"], a["Kpsi"], a["Kalpha"], a["F"], tuple(meta["tags"]), deim,
                GeometryFamily.from_dict(meta["family"]), MaterialData(m["mu"], m["kappa"], m["pressures"]),
                meta["space"], meta["provenance"])
        if mesh is not None:
            b.attach_space(mesh)
        return b


def reduce_offline(space: MixedSpace, material: MaterialData, family: GeometryFamily,
                   solution_basis: ModeBasis | np.ndarray, model_xi: DeimModel, model_zeta: DeimModel,
                   model_t: DeimModel, provenance: dict | None = None) -> RomBundle:
    """Project every affine block onto the solution modes."""
    V = solution_basis.modes if isinstance(solution_basis, ModeBasis) else np.asarray(solution_basis, float)
    if V.shape[0] != space.n_full:
        raise AssemblyError(f"solution modes have {V.shape[0]} rows, space has {space.n_full} dofs")
    for m, rows in ((model_xi, space.nv), (model_zeta, space.nv), (model_t, 2 * space.nv)):
        if m.modes.shape[0] != rows:
            raise AssemblyError(f"DEIM model {m.kind!r} has {m.modes.shape[0]} rows, expected {rows}")
        if m.points is None:
            m.attach_points(space.mesh.vertices)
    # Modes are combinations of constrained snapshots, but SVD rounding (relative to the
    # mode norm, which the pressure dominates) leaks into constrained velocity directions;
    # T has orthonormal columns, so T T^T removes that leak exactly.
    V = space.T @ (space.T.T @ V)
    Vu, Vp = V[:space.n_vel], V[space.n_vel:]
    r = V.shape[1]
    G = Vp.T @ (space.divergence_matrix @ Vu)   # V_p^T B V_u
    K0 = G.T - G

    C = nodal_reduced_forms(space, Vu)
    flat = {k: v.reshape(space.nv, r * r) for k, v in C.items()}
    phi_products = scalar_mode_products(model_xi.modes)
    psi_products = scalar_mode_products(model_zeta.modes)
    alpha_products = tensor_mode_products(model_t.modes)  # (nv, 3, K)
    Kphi = material.mu * (phi_products.T @ flat["visc"]).reshape(-1, r, r)
    Kpsi = (material.mu / material.kappa) * (psi_products.T @ (flat["xx"] + flat["yy"])).reshape(-1, r, r)
    Kalpha = sum(np.ascontiguousarray(alpha_products[:, c]).T @ flat[k]  # contiguous copies keep BLAS
                 for c, k in enumerate(("xx", "xy", "yy"))).reshape(-1, r, r)
    # the forms are symmetric; remove the rounding asymmetry left by cancellation in the sums
    Kphi, Kpsi, Kalpha = (0.5 * (K + K.transpose(0, 2, 1)) for K in (Kphi, Kpsi, Kalpha))

    tags = tuple(space.pressure_tags)
    F = np.column_stack([V.T @ space.load_vector(t) for t in tags]) if tags else np.zeros((r, 0))
    cfg = {"mesh_sha256": space.mesh.sha256(), "slip_tags": list(space.slip_tags),
           "noslip_tags": list(space.noslip_tags), "normal_flow_tags": list(space.normal_flow_tags)}
    return RomBundle(V, K0, Kphi, Kpsi, Kalpha, F, tags,
                     {"xi": model_xi, "zeta": model_zeta, "t": model_t}, family, material, cfg,
                     dict(provenance or {}), space)


def solve_online(bundle: RomBundle, beta, pressures: Mapping[str, float] | None = None,
                 return_info: bool = False):
    """Reduced coefficients for parameter ``beta`` and boundary pressures (tag -> value)."""
    K = bundle.reduced_matrix(beta)
    f = bundle.reduced_load(pressures)
    if not np.any(f):
        u = np.zeros(bundle.r)
        return (u, {"cond": float(np.linalg.cond(K)), "residual": 0.0}) if return_info else u
    try:
        u = np.linalg.solve(K, f)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"singular reduced matrix (cond {np.linalg.cond(K):.2e})") from exc
    res = float(np.linalg.norm(K @ u - f) / np.linalg.norm(f))
    if not np.isfinite(res) or res > 1e-10:
        raise NumericsError(f"reduced solve residual {res:.2e} (cond {np.linalg.cond(K):.2e})")
    if return_info:
        return u, {"cond": float(np.linalg.cond(K)), "residual": res}
    return u


def lift(bundle: RomBundle, coeffs: np.ndarray):
    return bundle.lift(coeffs)


def snapshot_loads(snapshots: SnapshotSet, default: Mapping[str, float]) -> list[dict]:
    """Boundary pressures that produced each column of a solution snapshot set."""
    unit = snapshots.meta.get("unit_tags") or []
    if unit:
        return [{unit[k % len(unit)]: 1.0} for k in range(snapshots.n_samples)]
    loads = snapshots.meta.get("loads") or default
    return [dict(loads)] * snapshots.n_samples


def sweep_errors(bundle: RomBundle, snapshots: SnapshotSet, space: MixedSpace | None = None) -> np.ndarray:
    """Relative velocity L2 error of the ROM for every column of a solution snapshot set."""
    space = space or bundle.space
    if space is None:
        raise ParameterError("a space is needed to measure velocity errors")
    M = space.velocity_mass
    loads = snapshot_loads(snapshots, bundle.material.pressures)
    Vu = bundle.modes[:space.n_vel]
    errs = np.empty(snapshots.n_samples)
    for k in range(snapshots.n_samples):
        u = solve_online(bundle, snapshots.betas[k], loads[k])
        ref = snapshots.matrix[:space.n_vel, k]
        d = Vu @ u - ref
        nref = np.sqrt(max(ref @ (M @ ref), 0.0))
        errs[k] = np.sqrt(max(d @ (M @ d), 0.0)) / nref if nref > 0 else np.sqrt(max(d @ (M @ d), 0.0))
    return errs


def sweep_max_error(bundle: RomBundle, snapshots: SnapshotSet, space: MixedSpace | None = None) -> float:
    """Maximum over the snapshot set of the relative velocity L2 error."""
    return float(np.max(sweep_errors(bundle, snapshots, space)))


# -- guided mode counts -------------------------------------------------------

@dataclass(frozen=True)
class ModeCountPlan:
    n_rb: int
    n_xi: int
    n_zeta: int
    n_t: int
    cap: int
    achieved: float
    target: float
    reached: bool

    def as_tuple(self) -> tuple[int, int, int]:
        return self.n_xi, self.n_zeta, self.n_t


def plan_mode_counts(eps_rb: Sequence[float], eps_xi: Sequence[float], eps_zeta: Sequence[float],
                     eps_t: Sequence[float], r: int, cap: int = DEFAULT_CAP) -> ModeCountPlan:
    """Smallest DEIM counts whose average epsilon reaches ``eps_rb(r)``.

    Tables are indexed from ``n = 1`` (entry 0).  Starting at (1, 1, 1) the
    count whose increment lowers the average most is raised (ties: xi, zeta,
    t) until the average is at most the target or every count is at its cap.
    """
    tables = [np.asarray(t, float) for t in (eps_xi, eps_zeta, eps_t)]
    eps_rb = np.asarray(eps_rb, float)
    if not 1 <= r <= len(eps_rb):
        raise ParameterError(f"r must lie in [1, {len(eps_rb)}], got {r}")
    for t in tables + [eps_rb]:
        if np.any(np.diff(t) > 1e-12):
            raise ParameterError("epsilon tables must be non-increasing")
    if cap < 1:
        raise ParameterError("cap must be >= 1")
    limits = [min(cap, len(t)) for t in tables]
    target = float(eps_rb[r - 1])
    n = [1, 1, 1]

    def avg():
        return sum(t[k - 1] for t, k in zip(tables, n)) / 3.0

    while avg() > target:
        best, gain = None, -np.inf
        for f in range(3):
            if n[f] < limits[f]:
                g = tables[f][n[f] - 1] - tables[f][n[f]]
                if g > gain:
                    best, gain = f, g
        if best is None:
            break
        n[best] += 1
    a = avg()
    return ModeCountPlan(r, n[0], n[1], n[2], cap, float(a), target, bool(a <= target))
