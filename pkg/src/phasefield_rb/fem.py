"""MINI (P1 + bubble) velocity / P1 pressure discretization of the diffuse Stokes/Darcy problem.

The weak form is::

    int 2 phi mu eps(u):eps(v) + int (1 - phi) mu/kappa u.v + int alpha u.v - int p div v
        = - sum_j p_j int_{Gamma_j} n.v
    int q div u = 0

with ``p_j`` the pressure prescribed on boundary tag ``j``.  Nodal fields are
interpolated linearly inside each element, so every weighted block is a linear
combination of per-vertex element matrices that are integrated once.

Full dof layout: ``[ux (vertices), ux (bubbles), uy (vertices), uy (bubbles), p (vertices)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import roots_jacobi, roots_legendre

from .errors import AssemblyError, ConfigurationError, NumericsError, ParameterError
from .mesh import TriMesh

# angle below which the normals of two constrained edges at a vertex are averaged
_SMOOTH_CORNER_SIN = 0.5


def triangle_quadrature(order: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Jacobi rule on the reference triangle (0,0), (1,0), (0,1).

    With ``order`` points per direction the rule is exact for polynomials of
    total degree ``2 order - 1``; the default (16 points) integrates the
    degree-7 products bubble x bubble x linear weight exactly.
    """
    tj, wj = roots_jacobi(order, 1.0, 0.0)
    tl, wl = roots_legendre(order)
    s = 0.5 * (1.0 + tj)
    r = 0.5 * (1.0 + tl)
    S, R = np.meshgrid(s, r, indexing="ij")
    W = np.outer(0.25 * wj, 0.5 * wl)
    pts = np.stack([S.ravel(), ((1.0 - S) * R).ravel()], axis=1)
    return pts, W.ravel()


@dataclass(frozen=True)
class MaterialData:
    """Viscosity ``mu`` (Pa s), isotropic permeability ``kappa`` (m^2), default boundary pressures (Pa)."""

    mu: float
    kappa: float
    pressures: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.mu > 0 and self.kappa > 0):
            raise ParameterError("mu and kappa must be positive")


class MixedSpace:
    """MINI x P1 space on a mesh with essential velocity constraints on tagged boundaries.

    ``slip_tags``: u.n = 0; ``noslip_tags``: u = 0; ``normal_flow_tags``: u.t = 0
    (pressure can still be prescribed there).  Every tag that is not slip or
    no-slip is a pressure (natural) boundary.
    """

    def __init__(self, mesh: TriMesh, slip_tags=("slip",), noslip_tags=(), normal_flow_tags=()):
        self.mesh = mesh
        self.slip_tags = tuple(t for t in slip_tags if t in mesh.tags)
        self.noslip_tags = tuple(t for t in noslip_tags if t in mesh.tags)
        self.normal_flow_tags = tuple(t for t in normal_flow_tags if t in mesh.tags)
        self.nv = mesh.n_vertices
        self.nt = mesh.n_triangles
        self.n_comp = self.nv + self.nt          # dofs of one velocity component
        self.n_vel = 2 * self.n_comp
        self.n_full = self.n_vel + self.nv
        self.pressure_tags = tuple(t for t in mesh.tags
                                   if t not in self.slip_tags and t not in self.noslip_tags)
        self.T = self._constraint_map()
        self.n_free = self.T.shape[1]

    # -- layout ------------------------------------------------------------------

    def local_velocity_dofs(self) -> np.ndarray:
        """(nt, 8) full indices ``[ux a0..a2, ux bubble, uy a0..a2, uy bubble]``."""
        tri = self.mesh.triangles
        b = self.nv + np.arange(self.nt)
        ux = np.column_stack([tri, b])
        return np.column_stack([ux, ux + self.n_comp])

    @property
    def velocity_slice(self) -> slice:
        return slice(0, self.n_vel)

    @property
    def pressure_slice(self) -> slice:
        return slice(self.n_vel, self.n_full)

    def vertex_velocity(self, x: np.ndarray) -> np.ndarray:
        """(nv, 2) vertex velocities of a full coefficient vector."""
        return np.column_stack([x[:self.nv], x[self.n_comp:self.n_comp + self.nv]])

    def signature(self) -> tuple:
        return (self.mesh.sha256(), self.slip_tags, self.noslip_tags, self.normal_flow_tags)

    # -- constraints -------------------------------------------------------------

    def _constraint_map(self) -> sp.csr_matrix:
        mesh = self.mesh
        dirs: dict[int, list[np.ndarray]] = {}
        fixed: set[int] = set()
        for kind, tags in (("slip", self.slip_tags), ("noslip", self.noslip_tags),
                           ("normal", self.normal_flow_tags)):
            for tag in tags:
                edges = mesh.edges_with_tag(tag)
                normals, _ = mesh.edge_geometry(edges)
                for (a, b), n in zip(edges.tolist(), normals):
                    for v in (a, b):
                        if kind == "noslip":
                            fixed.add(v)
                        else:
                            c = n if kind == "slip" else np.array([-n[1], n[0]])
                            dirs.setdefault(v, []).append(c)
        free_dir: dict[int, np.ndarray] = {}
        for v, cs in dirs.items():
            if v in fixed:
                continue
            c0 = cs[0]
            aligned = [c if c @ c0 >= 0 else -c for c in cs]
            if all(abs(c0[0] * c[1] - c0[1] * c[0]) < _SMOOTH_CORNER_SIN for c in aligned):
                c = np.sum(aligned, axis=0)
                c /= np.linalg.norm(c)
                f = np.array([-c[1], c[0]])
                f[np.abs(f) < 1e-14] = 0.0
                free_dir[v] = f
            else:
                fixed.add(v)
        rows, cols, vals = [], [], []
        col = 0
        constrained = fixed | set(free_dir)
        for i in range(self.n_full):
            if i < self.n_vel:
                comp, local = divmod(i, self.n_comp)
                if local < self.nv and local in constrained:
                    if comp == 0 and local in free_dir:
                        f = free_dir[local]
                        for k, fk in enumerate(f):
                            if fk != 0.0:
                                rows.append(local + k * self.n_comp)
                                cols.append(col)
                                vals.append(fk)
                        col += 1
                    continue
            rows.append(i)
            cols.append(col)
            vals.append(1.0)
            col += 1
        self.n_fixed_vertices = len(fixed)
        self.n_slip_vertices = len(free_dir)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_full, col))

    # -- element integrals -------------------------------------------------------

    @cached_property
    def _geometry(self):
        p = self.mesh.vertices[self.mesh.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0):
            raise AssemblyError("mesh has non-positive triangle areas")
        inv = np.stack([np.stack([J[:, 1, 1], -J[:, 0, 1]], 1),
                        np.stack([-J[:, 1, 0], J[:, 0, 0]], 1)], 1) / det[:, None, None]
        g1, g2 = inv[:, 0, :], inv[:, 1, :]
        G = np.stack([-(g1 + g2), g1, g2], axis=1)  # (nt, 3, 2)
        return G, 0.5 * det

    @cached_property
    def element_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-vertex-weighted element matrices.

        ``Kv[e, v]`` (8x8) is ``int lambda_v (grad u : grad v + grad u^T : grad v)``
        over the MINI velocity basis (i.e. ``2 eps(u):eps(v)`` weighted by the
        hat function of local vertex ``v``); ``Mv[e, v]`` (4x4) is
        ``int lambda_v N_a N_b`` for one velocity component.
        """
        G, area = self._geometry
        pts, w = triangle_quadrature(4)
        lam = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])  # (Q, 3)
        bub = 27.0 * lam.prod(axis=1)
        N = np.column_stack([lam, bub])  # (Q, 4)
        # gradient of the bubble: 27 (l1 l2 g0 + l0 l2 g1 + l0 l1 g2)
        coef = 27.0 * np.column_stack([lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
        gb = np.einsum("qi,eid->eqd", coef, G)  # (nt, Q, 2)
        Q = len(w)
        dN = np.concatenate([np.broadcast_to(G[:, None], (self.nt, Q, 3, 2)), gb[:, :, None, :]], axis=2)
        W = 2.0 * area[:, None, None] * (lam.T * w)[None]  # (nt, 3, Q)
        S = np.einsum("evq,eqad,eqbd->evab", W, dN, dN)
        C = np.einsum("evq,eqad,eqbc->evadbc", W, dN, dN)  # [a, d, b, c] = dN_a/dx_d dN_b/dx_c
        Kv = np.zeros((self.nt, 3, 8, 8))
        for c in range(2):
            for d in range(2):
                blk = C[:, :, :, d, :, c]
                if c == d:
                    blk = blk + S
                Kv[:, :, 4 * c:4 * c + 4, 4 * d:4 * d + 4] = blk
        Mv = np.einsum("evq,qa,qb->evab", W, N, N)
        return Kv, Mv

    @cached_property
    def _scatter(self):
        loc = self.local_velocity_dofs()
        rows8 = np.repeat(loc, 8, axis=1).ravel()
        cols8 = np.tile(loc, (1, 8)).ravel()
        return rows8, cols8

    def _check_nodal(self, *fields):
        for f in fields:
            if np.shape(f) != (self.nv,):
                raise AssemblyError(f"nodal field has shape {np.shape(f)}, expected ({self.nv},)")

    def _weighted(self, w: np.ndarray, E: np.ndarray) -> np.ndarray:
        """Sum over local vertices of nodal weights times per-vertex element matrices."""
        return np.einsum("ev,ev...->e...", w[self.mesh.triangles], E)

    def _assemble8(self, local: np.ndarray) -> sp.csr_matrix:
        rows, cols = self._scatter
        return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(self.n_vel, self.n_vel))

    def viscous_matrix(self, weight: np.ndarray) -> sp.csr_matrix:
        """``int w 2 eps(u):eps(v)`` with nodal weight ``w`` (no viscosity factor)."""
        self._check_nodal(weight)
        return self._assemble8(self._weighted(np.asarray(weight, float), self.element_matrices[0]))

    def _mass_local(self, wxx, wxy, wyy) -> np.ndarray:
        Mv = self.element_matrices[1]
        loc = np.zeros((self.nt, 8, 8))
        loc[:, :4, :4] = self._weighted(wxx, Mv)
        if wxy is not None:
            mxy = self._weighted(wxy, Mv)
            loc[:, :4, 4:] = mxy
            loc[:, 4:, :4] = mxy
        loc[:, 4:, 4:] = self._weighted(wyy, Mv)
        return loc

    def mass_matrix(self, weight: np.ndarray | None = None) -> sp.csr_matrix:
        """``int w u.v`` (identity tensor times nodal weight; ``None`` means w = 1)."""
        w = np.ones(self.nv) if weight is None else np.asarray(weight, float)
        self._check_nodal(w)
        return self._assemble8(self._mass_local(w, None, w))

    def tensor_mass_matrix(self, axx, axy, ayy) -> sp.csr_matrix:
        """``int (a u).v`` for a nodal symmetric tensor field with components xx, xy, yy."""
        self._check_nodal(axx, axy, ayy)
        return self._assemble8(self._mass_local(np.asarray(axx, float), np.asarray(axy, float),
                                                np.asarray(ayy, float)))

    @cached_property
    def divergence_matrix(self) -> sp.csr_matrix:
        """``B[i, j] = -int lambda_i div(N_j)``, shape (nv, n_vel)."""
        G, area = self._geometry
        loc = self.local_velocity_dofs()
        tri = self.mesh.triangles
        # int lambda_i dN_a/dx_c: vertex functions -> G[a,c] area/3; bubble -> -G[i,c] * int b = -G[i,c] 9/20 area
        vals = np.zeros((self.nt, 3, 8))
        for c in range(2):
            vals[:, :, 4 * c:4 * c + 3] = (area[:, None] / 3.0)[:, :, None] * G[:, None, :, c]
            vals[:, :, 4 * c + 3] = -G[:, :, c] * (0.45 * area)[:, None]
        rows = np.repeat(tri, 8, axis=1).ravel()
        cols = np.tile(loc, (1, 3)).ravel()
        return sp.csr_matrix((-vals.ravel(), (rows, cols)), shape=(self.nv, self.n_vel))

    @cached_property
    def velocity_mass(self) -> sp.csr_matrix:
        return self.mass_matrix()

    def load_vector(self, tag: str) -> np.ndarray:
        """Full-length load of a unit pressure on ``tag``: ``-int_tag n.v``."""
        if tag not in self.pressure_tags:
            raise ConfigurationError(f"{tag!r} is not a pressure boundary (have {self.pressure_tags})")
        f = np.zeros(self.n_full)
        edges = self.mesh.edges_with_tag(tag)
        n, length = self.mesh.edge_geometry(edges)
        for k in range(2):
            contrib = -0.5 * length * n[:, k]
            np.add.at(f, edges[:, 0] + k * self.n_comp, contrib)
            np.add.at(f, edges[:, 1] + k * self.n_comp, contrib)
        return f

    def saddle_matrix(self, A: sp.spmatrix) -> sp.csr_matrix:
        """``[[A, B^T], [-B, 0]]`` over full dofs."""
        B = self.divergence_matrix
        return sp.bmat([[A, B.T], [-B, None]], format="csr")

    def boundary_flux(self, x: np.ndarray, tag: str) -> float:
        """Outward flux ``int_tag u.n`` of a full coefficient vector (bubbles vanish on edges)."""
        edges = self.mesh.edges_with_tag(tag)
        n, length = self.mesh.edge_geometry(edges)
        u = self.vertex_velocity(x)
        um = 0.5 * (u[edges[:, 0]] + u[edges[:, 1]])
        return float(np.sum(length * (um * n).sum(axis=1)))


@dataclass(frozen=True, eq=False)
class MixedSolution:
    """Full coefficient vector (velocity incl. bubbles, then pressure) on a space."""

    space: MixedSpace
    coeffs: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def velocity(self) -> np.ndarray:
        return self.coeffs[self.space.velocity_slice]

    @property
    def pressure(self) -> np.ndarray:
        return self.coeffs[self.space.pressure_slice]

    def vertex_velocity(self) -> np.ndarray:
        return self.space.vertex_velocity(self.coeffs)

    def flux(self, tag: str) -> float:
        return self.space.boundary_flux(self.coeffs, tag)


def assemble_parametric_blocks(space: MixedSpace, material: MaterialData, xi=None, zeta=None, t=None,
                               phi=None, psi=None, alpha=None) -> dict:
    """Velocity blocks for given nodal fields.

    Either square-root fields (``xi``, ``zeta``, ``t`` as (nv, 2)) or the
    fields themselves (``phi``, ``psi``, ``alpha`` as (nv, 3) xx/xy/yy) may be
    given.  Returns ``viscous`` (``2 mu phi eps:eps``), ``darcy``
    (``mu/kappa psi u.v``), ``alpha`` (``alpha u.v``) and ``div`` (B).
    """
    if phi is None and xi is not None:
        phi = np.asarray(xi) ** 2
    if psi is None and zeta is not None:
        psi = np.asarray(zeta) ** 2
    if alpha is None and t is not None:
        t = np.asarray(t)
        if t.shape != (space.nv, 2):
            raise AssemblyError(f"t has shape {t.shape}, expected ({space.nv}, 2)")
        alpha = np.column_stack([t[:, 0] ** 2, t[:, 0] * t[:, 1], t[:, 1] ** 2])
    blocks = {"div": space.divergence_matrix}
    if phi is not None:
        blocks["viscous"] = material.mu * space.viscous_matrix(phi)
    if psi is not None:
        blocks["darcy"] = (material.mu / material.kappa) * space.mass_matrix(psi)
    if alpha is not None:
        alpha = np.asarray(alpha)
        if alpha.shape != (space.nv, 3):
            raise AssemblyError(f"alpha has shape {alpha.shape}, expected ({space.nv}, 3)")
        blocks["alpha"] = space.tensor_mass_matrix(alpha[:, 0], alpha[:, 1], alpha[:, 2])
    return blocks


def velocity_operator(space: MixedSpace, material: MaterialData, sample) -> sp.csr_matrix:
    """``A = 2 mu phi eps:eps + mu/kappa psi I + alpha`` for a field sample."""
    b = assemble_parametric_blocks(space, material, xi=sample.xi, zeta=sample.zeta, t=sample.t)
    return (b["viscous"] + b["darcy"] + b["alpha"]).tocsr()


def pressure_load(space: MixedSpace, loads: Mapping[str, float]) -> np.ndarray:
    f = np.zeros(space.n_full)
    for tag, value in loads.items():
        if tag not in space.pressure_tags:
            raise ConfigurationError(f"no pressure boundary {tag!r} (have {space.pressure_tags})")
        if value != 0.0:
            f += float(value) * space.load_vector(tag)
    return f


def _equilibrate(K: sp.csr_matrix, sweeps: int = 4):
    """Symmetric Ruiz scaling ``D K D`` toward unit max-norm rows/columns."""
    n = K.shape[0]
    d = np.ones(n)
    M = K.tocsr().copy()
    for _ in range(sweeps):
        r = np.sqrt(abs(M).max(axis=1).toarray().ravel())
        r[r == 0] = 1.0
        s = 1.0 / r
        d *= s
        Ds = sp.diags(s)
        M = (Ds @ M @ Ds).tocsr()
    return M, d


class FactorizedSystem:
    """Sparse LU of an equilibrated square system with residual-checked solves."""

    def __init__(self, K: sp.spmatrix, rtol: float = 1e-10):
        self.K = K.tocsr()
        self.rtol = rtol
        M, self.d = _equilibrate(self.K)
        try:
            self.lu = splu(M.tocsc(), permc_spec="COLAMD")
        except RuntimeError as exc:  # singular factor
            raise NumericsError(f"sparse factorization failed: {exc}") from exc

    def solve(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        fn = np.linalg.norm(f, axis=0)
        if np.all(fn == 0):
            return np.zeros_like(f)
        x = self.d[:, None] * self.lu.solve(self.d[:, None] * f.reshape(len(f), -1))
        x = x.reshape(f.shape)
        for _ in range(3):
            r = f - self.K @ x
            if np.all(np.linalg.norm(r, axis=0) <= self.rtol * np.maximum(fn, 1e-300)):
                break
            dx = self.d[:, None] * self.lu.solve(self.d[:, None] * r.reshape(len(f), -1))
            x = x + dx.reshape(f.shape)
        if not np.all(np.isfinite(x)):
            raise NumericsError("linear solve produced non-finite values")
        return x

    def relative_residual(self, x: np.ndarray, f: np.ndarray) -> float:
        fn = np.linalg.norm(f)
        return float(np.linalg.norm(f - self.K @ x) / fn) if fn > 0 else float(np.linalg.norm(self.K @ x))


def solve_hifi(space: MixedSpace, material: MaterialData, sample, loads: Mapping[str, float] | None = None,
               return_factor: bool = False):
    """High-fidelity solve for one field sample and boundary pressures ``loads`` (tag -> Pa)."""
    if not space.pressure_tags:
        raise ConfigurationError("no pressure boundary: pressure is only defined up to a constant")
    if loads is None:
        loads = dict(material.pressures)
    A = velocity_operator(space, material, sample)
    K = space.saddle_matrix(A)
    T = space.T
    Kr = (T.T @ K @ T).tocsr()
    f = pressure_load(space, loads)
    fr = T.T @ f
    fac = FactorizedSystem(Kr)
    xr = fac.solve(fr)
    res = fac.relative_residual(xr, fr)
    if res > 1e-8:
        raise NumericsError(f"high-fidelity residual {res:.3e} above tolerance")
    sol = MixedSolution(space, T @ xr, {"residual": res})
    return (sol, fac) if return_factor else sol


def _check_same(a: MixedSolution, b: MixedSolution):
    if a.space is not b.space and a.space.signature() != b.space.signature():
        raise AssemblyError("solutions live on different spaces")


def velocity_l2_norm(a: MixedSolution) -> float:
    u = a.velocity
    return float(np.sqrt(max(u @ (a.space.velocity_mass @ u), 0.0)))


def velocity_l2_error(a: MixedSolution, b: MixedSolution) -> float:
    _check_same(a, b)
    d = a.velocity - b.velocity
    return float(np.sqrt(max(d @ (a.space.velocity_mass @ d), 0.0)))
