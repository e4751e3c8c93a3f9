"""Discrete empirical interpolation (DEIM) and the squared, non-negative field reconstruction.

A DEIM model interpolates a nodal field from its values at ``N`` selected
dofs.  The diffuse-interface fields are not interpolated directly: the square
roots ``xi = sqrt(phi)``, ``zeta = sqrt(1 - phi)`` and the tangent vector
``t`` (with ``alpha = t t^T``) are, and the coefficients are squared out.
The squares are non-negative (resp. positive semi-definite) whatever the
interpolation error, and the expansion

    (sum_i th_i f_i)(sum_j th_j f_j) = sum_k th2_k g_k

keeps the dependence on the parameter affine.  Pairs ``(i, j)``, ``i <= j``,
are enumerated as ``for j in range(N): for i in range(j + 1)``, i.e.
(0,0), (0,1), (1,1), (0,2), (1,2), (2,2), ...
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import NumericsError, ParameterError
from .phasefield import GeometryFamily, evaluate_fields
from .pod import ModeBasis

COND_WARNING = 1e12


@dataclass(eq=False)
class DeimModel:
    """Interpolation of one nodal field kind from ``N`` selected dofs.

    ``indices`` are rows of the snapshot layout (for ``t`` the stacked
    ``[t_x; t_y]`` vector, so an index is one component at one node);
    ``points`` holds the coordinates of those dofs and ``components`` the
    vector component, so that the online phase samples the analytic field
    without touching the mesh.
    """

    kind: str
    modes: np.ndarray
    indices: np.ndarray
    points: np.ndarray | None = None
    components: np.ndarray | None = None
    cond: float = field(init=False)

    def __post_init__(self):
        self.modes = np.asarray(self.modes, float)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise NumericsError("DEIM indices are not distinct")
        P = self.matrix
        self._lu = sla.lu_factor(P, check_finite=True)
        self.cond = float(np.linalg.cond(P))
        if not np.isfinite(self.cond) or np.any(np.diag(self._lu[0]) == 0):
            raise NumericsError("singular DEIM interpolation matrix")
        if self.cond >= COND_WARNING:
            warnings.warn(f"DEIM interpolation matrix for {self.kind!r} has condition {self.cond:.2e}",
                          RuntimeWarning, stacklevel=2)

    @property
    def n(self) -> int:
        return self.modes.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """Interpolation matrix ``P[j, i] = mode_i(x_j)``."""
        return self.modes[self.indices]

    def weights(self, values: np.ndarray) -> np.ndarray:
        """Coefficients ``theta`` with ``sum_i theta_i mode_i(x_j) = values_j``."""
        values = np.asarray(values, float)
        if values.shape[0] != self.n:
            raise ParameterError(f"expected {self.n} samples, got {values.shape[0]}")
        return sla.lu_solve(self._lu, values)

    def interpolate(self, values: np.ndarray) -> np.ndarray:
        return self.modes @ self.weights(values)

    def sample(self, family: GeometryFamily, beta) -> np.ndarray:
        """Analytic field values at the selected dofs."""
        if self.points is None:
            raise ParameterError("model has no point coordinates; attach them with attach_points")
        return sample_kind(self.kind, family, beta, self.points, self.components)

    def attach_points(self, vertices: np.ndarray) -> "DeimModel":
        """Record coordinates (and vector components) of the selected dofs for a mesh's vertices."""
        nv = len(vertices)
        node = self.indices % nv
        self.points = np.asarray(vertices, float)[node]
        self.components = (self.indices // nv).astype(np.int64)
        return self

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}modes": self.modes, f"{prefix}indices": self.indices}
        if self.points is not None:
            out[f"{prefix}points"] = self.points
            out[f"{prefix}components"] = self.components
        return out

    @classmethod
    def from_arrays(cls, kind: str, arrays: dict, prefix: str) -> "DeimModel":
        return cls(kind, arrays[f"{prefix}modes"], arrays[f"{prefix}indices"],
                   arrays.get(f"{prefix}points"), arrays.get(f"{prefix}components"))


def sample_kind(kind: str, family: GeometryFamily, beta, points: np.ndarray,
                components: np.ndarray | None = None) -> np.ndarray:
    """Values of field ``kind`` (xi, zeta, t, phi) at points; for ``t`` pick the given components."""
    b = family.check_beta(beta)
    xi, zeta, t = evaluate_fields(family, b, points)
    if kind == "xi":
        return xi
    if kind == "zeta":
        return zeta
    if kind == "phi":
        return xi ** 2
    if kind == "t":
        comp = np.zeros(len(points), dtype=np.int64) if components is None else components
        return t[np.arange(len(points)), comp]
    raise ParameterError(f"cannot sample field kind {kind!r}")


def select_points(basis: ModeBasis | np.ndarray, N: int, kind: str | None = None) -> DeimModel:
    """Greedy DEIM point selection on the first ``N`` modes (ties: lowest index)."""
    U = basis.modes if isinstance(basis, ModeBasis) else np.asarray(basis, float)
    kind = kind or (basis.kind if isinstance(basis, ModeBasis) else "field")
    if not 1 <= N <= U.shape[1]:
        raise ParameterError(f"N must lie in [1, {U.shape[1]}], got {N}")
    U = U[:, :N]
    idx = [int(np.argmax(np.abs(U[:, 0])))]  # argmax returns the first maximum
    if U[idx[0], 0] == 0:
        raise NumericsError("first DEIM mode vanishes identically")
    for n in range(1, N):
        P = U[idx, :n]
        try:
            c = np.linalg.solve(P, U[idx, n])
        except np.linalg.LinAlgError as exc:
            raise NumericsError(f"singular DEIM interpolation matrix at n={n}") from exc
        r = np.abs(U[:, n] - U[:, :n] @ c)
        j = int(np.argmax(r))
        if r[j] <= 1e-14 * max(np.abs(U[:, n]).max(), 1e-300) or j in idx:
            raise NumericsError(f"DEIM residual vanishes at n={n + 1}: mode is interpolated exactly")
        idx.append(j)
    return DeimModel(kind, U, np.array(idx))


def train(basis: ModeBasis, N: int, vertices: np.ndarray) -> DeimModel:
    """Select points and attach their coordinates."""
    return select_points(basis, N).attach_points(vertices)


# -- squared expansion --------------------------------------------------------

def pair_indices(N: int) -> tuple[np.ndarray, np.ndarray]:
    """``(i, j)`` with ``i <= j`` in the documented order."""
    i = np.concatenate([np.arange(j + 1) for j in range(N)]).astype(np.int64)
    j = np.concatenate([np.full(j + 1, j) for j in range(N)]).astype(np.int64)
    return i, j


def expand_squared(theta: np.ndarray) -> np.ndarray:
    """Expanded weights: ``theta_i^2`` on the diagonal, ``2 theta_i theta_j`` off it."""
    theta = np.asarray(theta, float)
    i, j = pair_indices(len(theta))
    return np.where(i == j, 1.0, 2.0) * theta[i] * theta[j]


def scalar_mode_products(modes: np.ndarray) -> np.ndarray:
    """Nodal products ``f_i f_j`` as columns, in pair order (n_rows x N(N+1)/2)."""
    i, j = pair_indices(modes.shape[1])
    return modes[:, i] * modes[:, j]


def tensor_mode_products(modes: np.ndarray) -> np.ndarray:
    """Symmetrised outer products of stacked vector modes.

    Returns ``(nv, 3, K)`` with components xx, xy, yy of
    ``(t_i t_j^T + t_j t_i^T) / 2``.
    """
    nv = modes.shape[0] // 2
    tx, ty = modes[:nv], modes[nv:]
    i, j = pair_indices(modes.shape[1])
    xx = tx[:, i] * tx[:, j]
    xy = 0.5 * (tx[:, i] * ty[:, j] + tx[:, j] * ty[:, i])
    yy = ty[:, i] * ty[:, j]
    return np.stack([xx, xy, yy], axis=1)


# -- reconstruction -----------------------------------------------------------

@dataclass
class AffineWeights:
    """DEIM coefficients of xi, zeta and t at one parameter point (expanded lazily)."""

    theta_xi: np.ndarray
    theta_zeta: np.ndarray
    theta_t: np.ndarray

    @property
    def theta_phi(self) -> np.ndarray:
        return expand_squared(self.theta_xi)

    @property
    def theta_psi(self) -> np.ndarray:
        return expand_squared(self.theta_zeta)

    @property
    def theta_alpha(self) -> np.ndarray:
        return expand_squared(self.theta_t)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.theta_xi), len(self.theta_zeta), len(self.theta_t)


def affine_weights(model_xi: DeimModel, model_zeta: DeimModel, model_t: DeimModel,
                   family: GeometryFamily, beta) -> AffineWeights:
    return AffineWeights(model_xi.weights(model_xi.sample(family, beta)),
                         model_zeta.weights(model_zeta.sample(family, beta)),
                         model_t.weights(model_t.sample(family, beta)))


@dataclass
class ReconstructedFields:
    """Nodal fields rebuilt from DEIM interpolants of the square roots."""

    xi: np.ndarray
    zeta: np.ndarray
    t: np.ndarray  # (nv, 2)

    @property
    def phi(self) -> np.ndarray:
        return self.xi ** 2

    @property
    def psi(self) -> np.ndarray:
        return self.zeta ** 2

    @property
    def alpha(self) -> np.ndarray:
        """(nv, 3) columns xx, xy, yy of ``t t^T``."""
        tx, ty = self.t[:, 0], self.t[:, 1]
        return np.stack([tx * tx, tx * ty, ty * ty], axis=1)


def reconstruct_nonneg(model_xi: DeimModel, model_zeta: DeimModel, model_t: DeimModel,
                       beta, family: GeometryFamily, mesh=None) -> ReconstructedFields:
    """Squared DEIM reconstruction: ``phi, psi >= 0`` and PSD ``alpha`` at every node."""
    w = affine_weights(model_xi, model_zeta, model_t, family, beta)
    xi = model_xi.modes @ w.theta_xi
    zeta = model_zeta.modes @ w.theta_zeta
    ts = model_t.modes @ w.theta_t
    nv = len(xi)
    if mesh is not None and mesh.n_vertices != nv:
        raise ParameterError("DEIM models were trained on a different mesh")
    return ReconstructedFields(xi, zeta, np.column_stack([ts[:nv], ts[nv:]]))


def reconstruct_classical(model: DeimModel, samples) -> np.ndarray:
    """Plain DEIM: ``sum_i theta_i f_i`` from the field's values at the selected dofs."""
    return model.interpolate(samples)
