"""Parametric phase fields and the derived nodal fields xi, zeta and t.

A phase field ``phi`` is close to 1 in the free-flow (Stokes) region and close
to 0 in the porous (Darcy) region.  For the sharp-interface families it is the
logistic profile of a signed distance ``s`` (positive toward Stokes)::

    phi = 1 / (1 + exp(-6 s / delta)) = (1 + tanh(3 s / delta)) / 2

so ``phi = 0.5`` on the nominal interface and ``phi > 0.99`` at ``s >= delta``.
The square-root fields are ``xi = sqrt(phi)``, ``zeta = sqrt(1 - phi)``, and
the tangential field is::

    t = sqrt(2 alpha / |grad phi|) * rot90(grad phi)

which gives ``t (x) t = (2 alpha / |g|) (|g|^2 I - g (x) g)`` with ``g = grad phi``.
All gradients are analytic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import ParameterError, RefinementRequiredError
from .mesh import TriMesh, hexagon_corners

FAMILY_KINDS = ("spiral", "rotating_channel", "three_holes", "hex_damage")

# relative gradient magnitude under which t is set to zero
GRADIENT_FLOOR = 1e-3
# nodes with |grad phi| above this fraction of the profile maximum form the interface band
BAND_FRACTION = 0.1


@dataclass(frozen=True)
class GeometryFamily:
    """A parametric geometry: kind, constants, interface width and shear resistance."""

    kind: str
    delta: float
    alpha_shear: float
    constants: dict = field(default_factory=dict)
    lower: tuple = ()
    upper: tuple = ()

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ParameterError(f"unknown family kind {self.kind!r}")
        if not self.delta > 0:
            raise ParameterError("delta must be positive")
        if not self.alpha_shear >= 0:
            raise ParameterError("alpha_shear must be nonnegative")
        dims = {"spiral": 1, "rotating_channel": 1, "three_holes": 3, "hex_damage": 6}
        if len(self.lower) != dims[self.kind] or len(self.upper) != dims[self.kind]:
            raise ParameterError(f"{self.kind} needs a {dims[self.kind]}-dimensional parameter box")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def grad_scale(self) -> float:
        """Largest |grad phi| of the logistic profile, 1.5/delta."""
        return 1.5 / self.delta

    def check_beta(self, beta) -> np.ndarray:
        b = np.atleast_1d(np.asarray(beta, dtype=float))
        if b.shape != (self.dim,):
            raise ParameterError(f"{self.kind} expects {self.dim} parameters, got shape {b.shape}")
        lo, hi = np.array(self.lower), np.array(self.upper)
        tol = 1e-12 * np.maximum(1.0, np.abs(hi - lo))
        if np.any(b < lo - tol) or np.any(b > hi + tol) or not np.all(np.isfinite(b)):
            raise ParameterError(f"beta {b.tolist()} outside box [{self.lower}, {self.upper}]")
        return np.clip(b, lo, hi)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "alpha_shear": self.alpha_shear,
                "constants": dict(self.constants), "lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "GeometryFamily":
        return cls(d["kind"], float(d["delta"]), float(d["alpha_shear"]), dict(d.get("constants", {})),
                   tuple(float(v) for v in d["lower"]), tuple(float(v) for v in d["upper"]))


# -- family constructors -------------------------------------------------------

def spiral_family(r_inner: float = 0.25, r_outer: float = 1.0, width_fraction: float = 0.1,
                  delta: float = 0.1, alpha_shear: float = 10.0, n_segments: int = 2400) -> GeometryFamily:
    """Spiral channel from the outer circle to the inner hole; beta is its angular extent in degrees."""
    return GeometryFamily("spiral", delta, alpha_shear,
                          {"r_inner": r_inner, "r_outer": r_outer, "width": width_fraction * r_outer,
                           "n_segments": int(n_segments)}, (180.0,), (540.0,))


def rotating_channel_family(size: float = 1.0, width_fraction: float = 0.15, delta: float = 0.1,
                            alpha_shear: float = 10.0) -> GeometryFamily:
    """Straight channel through the center of a square; beta is the angle in degrees."""
    return GeometryFamily("rotating_channel", delta, alpha_shear,
                          {"size": size, "width": width_fraction * size}, (0.0,), (180.0,))


def three_holes_family(hole_width: float = 0.16, hole_height: float = 0.4,
                       centers_x: tuple = (0.3, 0.5, 0.7), center_y: float = 0.5,
                       delta: float = 0.06, alpha_shear: float = 0.01) -> GeometryFamily:
    """Three rectangular voids; beta_i shifts hole i horizontally by beta_i hole widths."""
    return GeometryFamily("three_holes", delta, alpha_shear,
                          {"hole_width": hole_width, "hole_height": hole_height,
                           "centers_x": list(centers_x), "center_y": center_y},
                          (-0.5,) * 3, (0.5,) * 3)


def hex_damage_family(well_distance: float = 15.0, well_radius: float = 0.25, delta: float = 2.0,
                      alpha_shear: float = 3.0e3, sigma_min: float = 1.0, sigma_max: float = 2.5,
                      crack_half_width: float = 1.0) -> GeometryFamily:
    """Per-sextant damage of the well hexagon; beta = (D_1, ..., D_6) in [0, 1]."""
    return GeometryFamily("hex_damage", delta, alpha_shear,
                          {"well_distance": well_distance, "well_radius": well_radius,
                           "sigma_min": sigma_min, "sigma_max": sigma_max,
                           "crack_half_width": crack_half_width},
                          (0.0,) * 6, (1.0,) * 6)


# -- geometry primitives -------------------------------------------------------

def _segment_distance(x: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance from points ``x`` (n,2) to segments ``a -> b`` (n,2) each, and the closest points."""
    d = b - a
    L2 = np.maximum((d ** 2).sum(-1), 1e-300)
    tpar = np.clip(((x - a) * d).sum(-1) / L2, 0.0, 1.0)
    c = a + tpar[..., None] * d
    diff = x - c
    return np.hypot(diff[..., 0], diff[..., 1]), diff


def _unit(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    out = np.zeros_like(diff)
    ok = dist > 0
    out[ok] = diff[ok] / dist[ok, None]
    return out


def _spiral_centerline(c: dict, beta_deg: float) -> np.ndarray:
    beta = math.radians(beta_deg)
    w = c["width"]
    theta = np.linspace(0.0, beta, c["n_segments"] + 1)
    r = c["r_outer"] + w / 2 - (c["r_outer"] - c["r_inner"] + w) * theta / beta
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _spiral_sdf(c: dict, beta: np.ndarray, x: np.ndarray):
    poly = _spiral_centerline(c, float(beta[0]))
    a, b = poly[:-1], poly[1:]
    tree = cKDTree(0.5 * (a + b))
    k = min(16, len(a))
    _, cand = tree.query(x, k=k)
    cand = cand.reshape(len(x), k)
    dist, diff = _segment_distance(x[:, None, :], a[cand], b[cand])
    j = np.argmin(dist, axis=1)
    rows = np.arange(len(x))
    d = dist[rows, j]
    grad_d = _unit(diff[rows, j], d)
    return c["width"] / 2 - d, -grad_d


def _channel_sdf(c: dict, beta: np.ndarray, x: np.ndarray):
    ang = math.radians(float(beta[0]))
    n = np.array([-math.sin(ang), math.cos(ang)])
    center = np.full(2, c["size"] / 2)
    proj = (x - center) @ n
    return c["width"] / 2 - np.abs(proj), -np.sign(proj)[:, None] * n[None, :]


def _box_sdf(x: np.ndarray, center: np.ndarray, half: np.ndarray):
    """Exact signed distance to an axis-aligned box (negative inside) and its gradient."""
    p = x - center
    q = np.abs(p) - half
    qpos = np.maximum(q, 0.0)
    outside = np.hypot(qpos[:, 0], qpos[:, 1])
    inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
    sdf = outside + inside
    grad = np.zeros_like(p)
    out = outside > 0
    grad[out] = qpos[out] / outside[out, None]
    ins = ~out
    use_x = q[:, 0] >= q[:, 1]
    grad[ins & use_x, 0] = 1.0
    grad[ins & ~use_x, 1] = 1.0
    return sdf, grad * np.sign(p + (p == 0))


def _holes_sdf(c: dict, beta: np.ndarray, x: np.ndarray):
    half = np.array([c["hole_width"] / 2, c["hole_height"] / 2])
    best_s = np.full(len(x), -np.inf)
    best_g = np.zeros_like(x)
    for cx, b in zip(c["centers_x"], beta):
        center = np.array([cx + b * c["hole_width"], c["center_y"]])
        sdf, g = _box_sdf(x, center, half)
        s = -sdf
        upd = s > best_s
        best_s[upd] = s[upd]
        best_g[upd] = -g[upd]
    return best_s, best_g


_SDF: dict[str, Callable] = {"spiral": _spiral_sdf, "rotating_channel": _channel_sdf, "three_holes": _holes_sdf}


# -- hexagon damage ------------------------------------------------------------

def hex_damage_phi(D: float, x: np.ndarray, sextant: int = 0, well_distance: float = 15.0,
                   delta: float = 2.0, sigma_min: float = 1.0, sigma_max: float = 2.5,
                   crack_half_width: float = 1.0, with_gradient: bool = False):
    """Damage phase field of one sextant, the strip from the center to corner ``sextant``.

    A diffuse Gaussian channel along the center-corner axis has peak ``min(2D, 1)``
    and width ``sigma_min + (sigma_max - sigma_min) D``.  For ``D > 0.5`` a straight
    crack with a flat logistic profile grows from the injection well (corner)
    with length ``2 (D - 0.5) well_distance``, spanning the sextant at ``D = 1``.
    The two parts are combined as a union, ``1 - phi = (1 - phi_channel)(1 - phi_crack)``,
    so the crack always adds to the channel.
    """
    if not (0.0 <= D <= 1.0):
        raise ParameterError(f"damage D={D} outside [0, 1]")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    corner = hexagon_corners(well_distance)[sextant]
    origin = np.zeros(2)
    n = len(x)
    if D == 0.0:
        zero = np.zeros(n)
        return (zero, 1.0 - zero, np.zeros((n, 2))) if with_gradient else zero

    d_ch, diff_ch = _segment_distance(x, np.broadcast_to(origin, x.shape), np.broadcast_to(corner, x.shape))
    sigma = sigma_min + (sigma_max - sigma_min) * D
    peak = min(2.0 * D, 1.0)
    gauss = np.exp(-0.5 * (d_ch / sigma) ** 2)
    phi = peak * gauss
    grad = (-peak * gauss * d_ch / sigma ** 2)[:, None] * _unit(diff_ch, d_ch)
    one_minus = -np.expm1(-0.5 * (d_ch / sigma) ** 2) if peak == 1.0 else 1.0 - phi

    if D > 0.5:
        length = 2.0 * (D - 0.5) * well_distance
        tip = corner + (origin - corner) * (length / well_distance)
        d_cr, diff_cr = _segment_distance(x, np.broadcast_to(corner, x.shape), np.broadcast_to(tip, x.shape))
        arg = 6.0 * (crack_half_width - d_cr) / delta
        phi_cr, om_cr = expit(arg), expit(-arg)
        g_cr = (-6.0 / delta * phi_cr * om_cr)[:, None] * _unit(diff_cr, d_cr)
        # union of channel and crack: 1 - phi = (1 - phi_ch)(1 - phi_cr)
        grad = om_cr[:, None] * grad + one_minus[:, None] * g_cr
        one_minus = one_minus * om_cr
        phi = 1.0 - one_minus
    return (phi, one_minus, grad) if with_gradient else phi


def _hex_fields(c: dict, delta: float, beta: np.ndarray, x: np.ndarray):
    phi = np.zeros(len(x))
    one_minus = np.ones(len(x))
    grad = np.zeros((len(x), 2))
    for k in range(6):
        p, om, g = hex_damage_phi(float(beta[k]), x, k, c["well_distance"], delta, c["sigma_min"],
                                  c["sigma_max"], c["crack_half_width"], with_gradient=True)
        upd = p > phi
        phi[upd], one_minus[upd], grad[upd] = p[upd], om[upd], g[upd]
    return phi, one_minus, grad


# -- public evaluation ---------------------------------------------------------

def phi_and_gradient(family: GeometryFamily, beta, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(phi, 1 - phi, grad phi)`` at points ``x`` of shape (n, 2).

    ``1 - phi`` is evaluated directly (not by subtraction) to keep full relative
    accuracy in the Stokes region.
    """
    b = family.check_beta(beta)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if family.kind == "hex_damage":
        return _hex_fields(family.constants, family.delta, b, x)
    s, grad_s = _SDF[family.kind](family.constants, b, x)
    arg = 6.0 * s / family.delta
    phi = expit(arg)
    one_minus = expit(-arg)
    grad = (6.0 / family.delta * phi * one_minus)[:, None] * grad_s
    return phi, one_minus, grad


def phi_of_x(family: GeometryFamily, beta, x) -> np.ndarray | float:
    """Phase-field value(s) at a point or an (n, 2) array of points."""
    arr = np.asarray(x, dtype=float)
    phi = phi_and_gradient(family, beta, arr.reshape(-1, 2))[0]
    return float(phi[0]) if arr.ndim == 1 else phi


def tangent_field(grad: np.ndarray, alpha_shear: float, floor: float) -> np.ndarray:
    """``t = sqrt(2 alpha / |g|) rot90(g)``, zero where ``|g| < floor``."""
    g = np.hypot(grad[:, 0], grad[:, 1])
    t = np.zeros_like(grad)
    ok = g >= floor
    scale = np.sqrt(2.0 * alpha_shear / g[ok])
    t[ok, 0] = -scale * grad[ok, 1]
    t[ok, 1] = scale * grad[ok, 0]
    return t


@dataclass(frozen=True, eq=False)
class FieldSample:
    """Nodal xi, zeta and t (n, 2) of one parameter point."""

    beta: np.ndarray
    xi: np.ndarray
    zeta: np.ndarray
    t: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return self.xi ** 2

    @property
    def psi(self) -> np.ndarray:
        return self.zeta ** 2

    def alpha_tensor(self) -> np.ndarray:
        """Nodal ``t (x) t`` as columns (xx, xy, yy)."""
        tx, ty = self.t[:, 0], self.t[:, 1]
        return np.stack([tx * tx, tx * ty, ty * ty], axis=1)

    def stacked_t(self) -> np.ndarray:
        """``[t_x; t_y]`` as one vector, the layout used for snapshots."""
        return np.concatenate([self.t[:, 0], self.t[:, 1]])


def evaluate_fields(family: GeometryFamily, beta, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """xi, zeta and t at arbitrary points (used for online DEIM sampling)."""
    phi, one_minus, grad = phi_and_gradient(family, beta, x)
    t = tangent_field(grad, family.alpha_shear, GRADIENT_FLOOR * family.grad_scale)
    return np.sqrt(phi), np.sqrt(one_minus), t


def check_resolution(family: GeometryFamily, mesh: TriMesh, grad: np.ndarray) -> None:
    """Require ``h <= delta/2`` on every triangle touching the interface band."""
    g = np.hypot(grad[:, 0], grad[:, 1])
    band = g >= BAND_FRACTION * family.grad_scale
    touched = band[mesh.triangles].any(axis=1)
    if not touched.any():
        return
    h = mesh.diameters()[touched].max()
    if h > family.delta / 2 * (1.0 + 1e-9):
        raise RefinementRequiredError(
            f"mesh size {h:.4g} in the interface band exceeds delta/2 = {family.delta / 2:.4g}")


def sample_fields(family: GeometryFamily, beta, mesh: TriMesh, check: bool = True) -> FieldSample:
    """Nodal interpolants of xi, zeta and t on ``mesh`` at parameter ``beta``."""
    b = family.check_beta(beta)
    phi, one_minus, grad = phi_and_gradient(family, b, mesh.vertices)
    if check:
        check_resolution(family, mesh, grad)
    t = tangent_field(grad, family.alpha_shear, GRADIENT_FLOOR * family.grad_scale)
    return FieldSample(b, np.sqrt(phi), np.sqrt(one_minus), t)
