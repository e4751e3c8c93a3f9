"""Snapshot sets, sampling plans, SVD mode extraction and the epsilon quality measure."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import container
from .errors import ParameterError, PhasefieldRBError
from .fem import MaterialData, MixedSpace, solve_hifi
from .mesh import TriMesh
from .phasefield import GeometryFamily, sample_fields

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"PFRBSNP1"
BASIS_MAGIC = b"PFRBMOD1"
FIELD_KINDS = ("xi", "zeta", "t", "phi")
SNAPSHOT_KINDS = FIELD_KINDS + ("solution",)

# above this many matrix entries the thin SVD is replaced by the method of snapshots
_DIRECT_SVD_LIMIT = 5e7


# -- sampling -----------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    """A reproducible set of parameter points.

    ``kind`` is ``uniform`` (``n`` equidistant points per axis, tensorised),
    ``tensor`` (explicit per-axis ``levels``), ``random`` (``n`` uniform points
    drawn with ``seed``), ``explicit`` (``points``) or ``union`` (``parts``).
    """

    kind: str
    n: int = 0
    levels: tuple = ()
    seed: int | None = None
    points: tuple = ()
    parts: tuple = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "tensor", "random", "explicit", "union"):
            raise ParameterError(f"unknown sampling plan kind {self.kind!r}")
        if self.kind in ("uniform", "random") and self.n < 1:
            raise ParameterError("sampling plan needs n >= 1")
        if self.kind == "random" and self.seed is None:
            raise ParameterError("random plans need an explicit seed")

    def sample(self, lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
        lo, hi = np.asarray(lower, float), np.asarray(upper, float)
        dim = len(lo)
        if self.kind == "uniform":
            axes = [np.linspace(a, b, self.n) if self.n > 1 else np.array([0.5 * (a + b)]) for a, b in zip(lo, hi)]
            return _tensor(axes)
        if self.kind == "tensor":
            if len(self.levels) != dim:
                raise ParameterError(f"tensor plan has {len(self.levels)} axes, parameter space has {dim}")
            return _tensor([np.asarray(lv, float) for lv in self.levels])
        if self.kind == "random":
            rng = np.random.default_rng(self.seed)
            return lo + (hi - lo) * rng.random((self.n, dim))
        if self.kind == "explicit":
            pts = np.asarray(self.points, float).reshape(len(self.points), -1)
            if pts.shape[1] != dim:
                raise ParameterError(f"explicit points have dimension {pts.shape[1]}, expected {dim}")
            return pts
        return np.concatenate([p.sample(lo, hi) for p in self.parts], axis=0)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("uniform", "random"):
            d["n"] = self.n
        if self.kind == "random":
            d["seed"] = self.seed
        if self.kind == "tensor":
            d["levels"] = [list(map(float, lv)) for lv in self.levels]
        if self.kind == "explicit":
            d["points"] = np.asarray(self.points, float).tolist()
        if self.kind == "union":
            d["parts"] = [p.to_dict() for p in self.parts]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SamplingPlan":
        kind = d.get("kind")
        if kind == "union":
            return cls("union", parts=tuple(cls.from_dict(p) for p in d["parts"]))
        if kind == "tensor":
            return cls("tensor", levels=tuple(tuple(lv) for lv in d["levels"]))
        if kind == "explicit":
            return cls("explicit", points=tuple(map(tuple, np.atleast_2d(np.asarray(d["points"], float)).tolist())))
        return cls(kind, n=int(d.get("n", 0)), seed=d.get("seed"))


def _tensor(axes: list[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


# -- snapshot sets ------------------------------------------------------------

@dataclass(eq=False)
class SnapshotSet:
    """Column snapshots of one kind; column ``k`` belongs to ``betas[k]``."""

    kind: str
    betas: np.ndarray
    matrix: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SNAPSHOT_KINDS:
            raise ParameterError(f"unknown snapshot kind {self.kind!r}")
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.betas = np.asarray(self.betas, dtype=float).reshape(self.matrix.shape[1], -1)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | Path) -> None:
        meta = {"kind": self.kind, "n_rows": self.n_rows, "n_samples": self.n_samples,
                "seed": self.seed, "meta": self.meta}
        container.write(path, SNAPSHOT_MAGIC, meta, {"betas": self.betas, "matrix": self.matrix})

    @classmethod
    def load(cls, path: str | Path) -> "SnapshotSet":
        meta, arr = container.read(path, SNAPSHOT_MAGIC)
        return cls(meta["kind"], arr["betas"], arr["matrix"], meta.get("seed"), meta.get("meta", {}))


def field_columns(family: GeometryFamily, beta, mesh: TriMesh, check: bool = True) -> dict[str, np.ndarray]:
    """Snapshot columns of every field kind at one parameter point."""
    s = sample_fields(family, beta, mesh, check=check)
    return {"xi": s.xi, "zeta": s.zeta, "t": s.stacked_t(), "phi": s.phi}


def _map(fn, items, workers: int):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def build_field_snapshots(family: GeometryFamily, mesh: TriMesh, betas: np.ndarray,
                          kinds: Iterable[str] = ("xi", "zeta", "t"), seed: int | None = None,
                          workers: int = 1) -> dict[str, SnapshotSet]:
    """Field snapshot sets for all requested kinds from one pass over ``betas``."""
    betas = np.atleast_2d(np.asarray(betas, float))
    if betas.shape[1] != family.dim:
        betas = betas.reshape(-1, family.dim)
    kinds = tuple(kinds)
    cols = _map(lambda b: field_columns(family, b, mesh), list(betas), workers)
    return {k: SnapshotSet(k, betas, np.column_stack([c[k] for c in cols]), seed) for k in kinds}


def build_solution_snapshots(space: MixedSpace, material: MaterialData, family: GeometryFamily,
                             betas: np.ndarray, loads: Mapping[str, float] | None = None,
                             unit_tags: Sequence[str] | None = None, seed: int | None = None,
                             workers: int = 1) -> SnapshotSet:
    """High-fidelity solution snapshots.

    With ``unit_tags`` every parameter point contributes one column per tag
    (unit pressure on that tag, zero elsewhere): since the load enters
    linearly, these span all pressure combinations.  Otherwise one column per
    point is computed with the fixed ``loads``.
    """
    betas = np.atleast_2d(np.asarray(betas, float)).reshape(-1, family.dim)

    def one(beta):
        try:
            sample = sample_fields(family, beta, space.mesh)
            if unit_tags:
                from .fem import FactorizedSystem, pressure_load, velocity_operator
                A = velocity_operator(space, material, sample)
                K = (space.T.T @ space.saddle_matrix(A) @ space.T).tocsr()
                F = np.column_stack([space.T.T @ pressure_load(space, {t: 1.0}) for t in unit_tags])
                X = FactorizedSystem(K).solve(F)
                return [space.T @ X[:, j] for j in range(X.shape[1])]
            return [solve_hifi(space, material, sample, loads).coeffs]
        except PhasefieldRBError as exc:
            raise type(exc)(f"snapshot at beta={np.asarray(beta).tolist()} failed: {exc}") from exc

    cols = _map(one, list(betas), workers)
    per = len(cols[0])
    matrix = np.column_stack([c for group in cols for c in group])
    col_betas = np.repeat(betas, per, axis=0)
    meta = {"loads": dict(loads or {}), "unit_tags": list(unit_tags or []), "columns_per_beta": per}
    return SnapshotSet("solution", col_betas, matrix, seed, meta)


def build_snapshots(kind: str, family: GeometryFamily, mesh: TriMesh, plan: SamplingPlan,
                    space: MixedSpace | None = None, material: MaterialData | None = None,
                    loads: Mapping[str, float] | None = None, workers: int = 1) -> SnapshotSet:
    """One snapshot set of ``kind`` over the points of ``plan``."""
    betas = plan.sample(family.lower, family.upper)
    if kind == "solution":
        if space is None or material is None:
            raise ParameterError("solution snapshots need a space and material data")
        return build_solution_snapshots(space, material, family, betas, loads, seed=plan.seed, workers=workers)
    if kind not in FIELD_KINDS:
        raise ParameterError(f"unknown snapshot kind {kind!r}")
    return build_field_snapshots(family, mesh, betas, (kind,), plan.seed, workers)[kind]


# -- modes --------------------------------------------------------------------

@dataclass(eq=False)
class ModeBasis:
    """Orthonormal modes (columns) with the complete list of singular values."""

    kind: str
    modes: np.ndarray
    sigma: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    def truncated(self, n: int) -> "ModeBasis":
        if not 1 <= n <= self.n_modes:
            raise ParameterError(f"cannot keep {n} of {self.n_modes} modes")
        return ModeBasis(self.kind, self.modes[:, :n], self.sigma, dict(self.meta))

    def save(self, path: str | Path) -> None:
        container.write(path, BASIS_MAGIC, {"kind": self.kind, "meta": self.meta},
                        {"modes": self.modes, "sigma": self.sigma})

    @classmethod
    def load(cls, path: str | Path) -> "ModeBasis":
        meta, arr = container.read(path, BASIS_MAGIC)
        return cls(meta["kind"], arr["modes"], arr["sigma"], meta.get("meta", {}))


def _fix_signs(U: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of every mode positive (deterministic signs)."""
    if U.size == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def svd_modes(snapshots: SnapshotSet | np.ndarray, max_modes: int | None = None, method: str = "auto") -> ModeBasis:
    """Left singular vectors of the snapshot matrix, truncated to ``max_modes``.

    ``method`` is ``direct`` (thin LAPACK SVD), ``gram`` (method of snapshots:
    eigen-decomposition of the n_samples x n_samples Gram matrix) or ``auto``
    (direct unless the matrix is very large and much taller than wide).
    """
    X = snapshots.matrix if isinstance(snapshots, SnapshotSet) else np.asarray(snapshots, float)
    kind = snapshots.kind if isinstance(snapshots, SnapshotSet) else "solution"
    n_rows, n_cols = X.shape
    kmax = min(n_rows, n_cols)
    if max_modes is None:
        max_modes = kmax
    if not 1 <= max_modes <= kmax:
        raise ParameterError(f"max_modes must lie in [1, {kmax}], got {max_modes}")
    if method == "auto":
        method = "gram" if (X.size > _DIRECT_SVD_LIMIT and n_cols * 10 < n_rows) else "direct"
    if method == "direct":
        U, s, _ = np.linalg.svd(X, full_matrices=False)
        U = U[:, :max_modes]
    elif method == "gram":
        lam, V = np.linalg.eigh(X.T @ X)
        order = np.argsort(lam)[::-1]
        lam, V = np.clip(lam[order], 0.0, None), V[:, order]
        s = np.sqrt(lam)
        keep = s[:max_modes] > s[0] * 1e-7 if s[0] > 0 else np.zeros(max_modes, bool)
        U = X @ V[:, :max_modes][:, keep] / s[:max_modes][keep]
        U, _ = np.linalg.qr(U)  # restore orthogonality lost to rounding
        if U.shape[1] < max_modes:
            log.warning("method of snapshots: only %d numerically nonzero modes", U.shape[1])
    else:
        raise ParameterError(f"unknown SVD method {method!r}")
    return ModeBasis(kind, _fix_signs(U), s, {"method": method, "n_samples": n_cols})


def epsilon(basis: ModeBasis | np.ndarray, n: int) -> float:
    """``sqrt(sum_{i>=n} sigma_i^2 / sum_i sigma_i^2)`` with 1-based ``n`` (so epsilon(1) = 1)."""
    s = basis.sigma if isinstance(basis, ModeBasis) else np.asarray(basis, float)
    if not 1 <= n <= len(s):
        raise ParameterError(f"n must lie in [1, {len(s)}], got {n}")
    e = s.astype(float) ** 2
    total = e.sum()
    if total == 0:
        return 0.0
    return float(np.sqrt(min(e[n - 1:].sum() / total, 1.0)))


def epsilon_table(basis: ModeBasis | np.ndarray) -> np.ndarray:
    """``epsilon(n)`` for ``n = 1 .. len(sigma)`` (index 0 holds n = 1)."""
    s = basis.sigma if isinstance(basis, ModeBasis) else np.asarray(basis, float)
    e = s.astype(float) ** 2
    total = e.sum()
    if total == 0:
        return np.zeros(len(s))
    tail = np.cumsum(e[::-1])[::-1]
    return np.sqrt(np.clip(tail / total, 0.0, 1.0))
