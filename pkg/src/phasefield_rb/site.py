"""Site-scale model: one reduced hexagon block per well pattern, coupled through injection-well constraints.

Every hexagon carries the local reduced system ``K(D_h) u_h = sum_k p_k F_k``
where ``F_k`` is the reduced unit-pressure load of its corner well ``k``.
The pressure ``p_w`` of a shared injection well is an unknown (a Lagrange
multiplier) fixed by prescribing the total inflow ``u_in,w`` of the well:

    [ K_1            -F_1w ] [u_1]   [ 0      ]
    [      ...        ...  ] [...] = [ ...    ]
    [ -F_1w^T  ...     0   ] [p_w]   [ -u_in,w]

``F_k^T u`` is the inflow through corner ``k`` (the load vector of a unit
pressure is ``-int n.v``), so the multiplier rows are the transposed load
columns.  Production wells sit at zero pressure inside each local ROM.
Corners that are not wells are left open at ambient (zero) pressure.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, NumericsError, ParameterError
from .mesh import hexagon_corners
from .rom import RomBundle

LITERS_PER_M3 = 1000.0
DEFAULT_INTAKE_HEIGHT = 5.0
HONEYMOON_SHAPE = (15, 15)
HONEYMOON_BOUNDARY_WELLS = 4


# -- layouts -------------------------------------------------------------------

def hex_grid_centers(n_cols: int, n_rows: int, well_distance: float) -> np.ndarray:
    """Centers of an offset-column tiling of corner-sharing hexagons (corners at 0, 60, ... degrees)."""
    if n_cols < 1 or n_rows < 1:
        raise ConfigurationError("hexagon grid needs at least one row and column")
    R = float(well_distance)
    cols, rows = np.meshgrid(np.arange(n_cols), np.arange(n_rows), indexing="ij")
    x = 1.5 * R * cols
    y = np.sqrt(3.0) * R * (rows + 0.5 * (cols % 2))
    return np.column_stack([x.ravel(), y.ravel()])


@dataclass
class Well:
    """An injection well at a hexagon corner shared by one to three hexagons."""

    id: int
    position: np.ndarray
    members: list  # [(hexagon index, local corner 0..5)]
    inflow: float = 0.0  # l/s


@dataclass(frozen=True)
class CornerGraph:
    positions: np.ndarray           # (n_corners, 2)
    members: tuple                  # per corner: tuple of (hex, local corner)

    def adjacency_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for m in self.members:
            counts[len(m)] = counts.get(len(m), 0) + 1
        return dict(sorted(counts.items()))


def corner_graph(centers: np.ndarray, well_distance: float) -> CornerGraph:
    """Deduplicate hexagon corners; raise if the hexagons do not tile (overlap or bad spacing)."""
    centers = np.asarray(centers, float).reshape(-1, 2)
    R = float(well_distance)
    if len(centers) > 1:
        from scipy.spatial import cKDTree
        d, _ = cKDTree(centers).query(centers, k=2)
        if np.any(d[:, 1] < np.sqrt(3.0) * R * (1 - 1e-6)):
            raise ConfigurationError("hexagons overlap: center spacing below sqrt(3) * well distance")
    corners = (centers[:, None, :] + hexagon_corners(R)[None]).reshape(-1, 2)
    key = np.round(corners / (R * 1e-6)).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # order corners by first appearance for reproducible well numbering
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    ids = rank[inverse]
    members: list[list] = [[] for _ in range(len(order))]
    for flat, c in enumerate(ids):
        members[c].append((flat // 6, flat % 6))
    if any(len(m) > 3 for m in members):
        raise ConfigurationError("inconsistent tiling: a corner is shared by more than three hexagons")
    return CornerGraph(corners[first[order]], tuple(tuple(m) for m in members))


def select_wells(graph: CornerGraph, policy: str = "all", extra: int = 0) -> list[int]:
    """Corner indices that carry injection wells.

    ``all``: every corner.  ``shared``: corners of two or more hexagons plus
    the ``extra`` single-hexagon corners closest to the corners of the
    bounding box (the honeymoon preset uses 4 to reach its 452 wells).
    """
    if policy == "all":
        return list(range(len(graph.members)))
    if policy != "shared":
        raise ConfigurationError(f"unknown well policy {policy!r}")
    shared = [i for i, m in enumerate(graph.members) if len(m) >= 2]
    single = np.array([i for i, m in enumerate(graph.members) if len(m) == 1], dtype=int)
    chosen: list[int] = []
    if extra and len(single):
        pos = graph.positions[single]
        lo, hi = graph.positions.min(axis=0), graph.positions.max(axis=0)
        for corner in ([lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]])[:extra]:
            d = np.linalg.norm(pos - np.array(corner), axis=1)
            for k in np.argsort(d, kind="stable"):
                if int(single[k]) not in chosen:
                    chosen.append(int(single[k]))
                    break
    return sorted(shared + chosen)


# -- model ---------------------------------------------------------------------

@dataclass
class SiteSolution:
    coeffs: np.ndarray          # (n_hex, r)
    multipliers: np.ndarray     # (n_wells,) well pressures
    outflows: np.ndarray        # (n_hex,) production outflow, l/s
    well_inflows: np.ndarray    # (n_wells,) realised inflow, l/s
    leakage: float              # outflow through open (non-well) corners, l/s
    info: dict = field(default_factory=dict)


class SiteModel:
    """Hexagon patches sharing one RomBundle, coupled through injection wells."""

    def __init__(self, centers: np.ndarray, bundle: RomBundle, damage: np.ndarray | None = None,
                 inflows: Sequence[float] | float = 0.0, well_policy: str = "all", extra_wells: int = 0,
                 intake_height: float = DEFAULT_INTAKE_HEIGHT, workers: int = 1):
        self.bundle = bundle
        self.centers = np.asarray(centers, float).reshape(-1, 2)
        self.n_hex = len(self.centers)
        self.well_distance = float(bundle.family.constants.get("well_distance", 15.0))
        self.intake_height = float(intake_height)
        if self.intake_height <= 0:
            raise ParameterError("intake height must be positive")
        self.workers = workers
        self._tag_col = {}
        for k in range(6):
            tag = f"well_{k + 1}"
            if tag not in bundle.tags:
                raise ConfigurationError(f"bundle has no load vector for corner tag {tag!r}")
            self._tag_col[k] = bundle.tags.index(tag)
        if "production" not in bundle.tags:
            raise ConfigurationError("bundle has no production boundary")
        self._prod_col = bundle.tags.index("production")

        self.graph = corner_graph(self.centers, self.well_distance)
        well_corners = select_wells(self.graph, well_policy, extra_wells)
        self.open_corners = sorted(set(range(len(self.graph.members))) - set(well_corners))
        self.wells = [Well(i, self.graph.positions[c], list(self.graph.members[c])) for i, c in enumerate(well_corners)]
        self.set_inflows(inflows)

        if damage is None:
            damage = np.zeros((self.n_hex, 6))
        self.damage = self._check_damage(np.asarray(damage, float).reshape(self.n_hex, 6)).copy()
        self.blocks = np.zeros((self.n_hex, bundle.r, bundle.r))
        self._assemble_blocks(range(self.n_hex))
        self._coupling = self._build_coupling()

    # -- configuration --------------------------------------------------------

    @property
    def r(self) -> int:
        return self.bundle.r

    @property
    def n_wells(self) -> int:
        return len(self.wells)

    @property
    def n_dofs(self) -> int:
        return self.n_hex * self.r + self.n_wells

    def set_inflows(self, inflows: Sequence[float] | float) -> None:
        vals = np.asarray(inflows, float)
        if vals.ndim and vals.shape != (len(self.wells),):
            raise ParameterError(f"{vals.size} inflows given for {len(self.wells)} wells")
        vals = np.broadcast_to(vals, (len(self.wells),))
        for w, v in zip(self.wells, vals):
            w.inflow = float(v)

    @property
    def inflows(self) -> np.ndarray:
        return np.array([w.inflow for w in self.wells])

    def _check_damage(self, D: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(D)) or D.min() < 0.0 or D.max() > 1.0:
            raise ParameterError("damage values must lie in [0, 1]")
        return D

    # -- assembly -------------------------------------------------------------

    def _block(self, h: int) -> np.ndarray:
        return self.bundle.reduced_matrix(self.damage[h])

    def _assemble_blocks(self, hexes) -> None:
        hexes = list(hexes)
        if self.workers > 1 and len(hexes) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                mats = list(ex.map(self._block, hexes))
        else:
            mats = [self._block(h) for h in hexes]
        for h, K in zip(hexes, mats):
            self.blocks[h] = K

    def _build_coupling(self) -> sp.csr_matrix:
        r, n = self.r, self.n_dofs
        F = self.bundle.F
        rows, cols, vals = [], [], []
        for w in self.wells:
            j = self.n_hex * r + w.id
            for h, k in w.members:
                col = F[:, self._tag_col[k]]
                idx = h * r + np.arange(r)
                rows += [idx, np.full(r, j)]
                cols += [np.full(r, j), idx]
                vals += [-col, -col]
        if not rows:
            return sp.csr_matrix((n, n))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))

    def block_matrix(self) -> sp.csr_matrix:
        """Block diagonal of the per-hexagon reduced matrices (padded to the full size)."""
        bd = sp.block_diag(list(self.blocks), format="csr")
        pad = sp.csr_matrix((self.n_wells, self.n_wells))
        return sp.block_diag([bd, pad], format="csr")

    def assemble(self) -> sp.csr_matrix:
        return (self.block_matrix() + self._coupling).tocsr()

    def rhs(self) -> np.ndarray:
        b = np.zeros(self.n_dofs)
        b[self.n_hex * self.r:] = -self.inflows / (LITERS_PER_M3 * self.intake_height)
        return b

    def update_damage(self, h: int, D) -> "SiteModel":
        """Replace the damage of hexagon ``h``; only its diagonal block is recomputed."""
        if not 0 <= h < self.n_hex:
            raise ParameterError(f"no hexagon {h}")
        D = self._check_damage(np.asarray(D, float).reshape(6))
        if np.array_equal(D, self.damage[h]):
            return self
        self.damage[h] = D
        self._assemble_blocks([h])
        return self

    def set_damage(self, damage: np.ndarray) -> "SiteModel":
        damage = self._check_damage(np.asarray(damage, float).reshape(self.n_hex, 6))
        changed = [h for h in range(self.n_hex) if not np.array_equal(damage[h], self.damage[h])]
        self.damage[changed] = damage[changed]
        self._assemble_blocks(changed)
        return self

    def copy(self) -> "SiteModel":
        """Independent copy sharing the (immutable) bundle and corner graph."""
        c = object.__new__(SiteModel)
        c.__dict__.update(self.__dict__)
        c.damage = self.damage.copy()
        c.blocks = self.blocks.copy()
        c.wells = [Well(w.id, w.position, list(w.members), w.inflow) for w in self.wells]
        return c

    # -- solve ----------------------------------------------------------------

    def solve(self) -> SiteSolution:
        A = self.assemble()
        b = self.rhs()
        if not np.any(b):
            x = np.zeros(self.n_dofs)
        else:
            try:
                x = splu(A.tocsc()).solve(b)
            except RuntimeError as exc:
                raise NumericsError(f"singular site system: {exc}") from exc
            res = np.linalg.norm(A @ x - b) / np.linalg.norm(b)
            if not np.isfinite(res) or res > 1e-8:
                raise NumericsError(f"site solve residual {res:.2e}")
        r = self.r
        U = x[:self.n_hex * r].reshape(self.n_hex, r)
        p = x[self.n_hex * r:]
        scale = LITERS_PER_M3 * self.intake_height
        F = self.bundle.F
        outflow = -(U @ F[:, self._prod_col]) * scale
        inflow = np.array([sum(U[h] @ F[:, self._tag_col[k]] for h, k in w.members) for w in self.wells]) * scale
        leak = -sum(U[h] @ F[:, self._tag_col[k]] for c in self.open_corners for h, k in self.graph.members[c])
        return SiteSolution(U, p, outflow, inflow, float(leak) * scale)

    # -- persistence ----------------------------------------------------------

    def to_config(self, bundle_path: str | None = None) -> dict:
        return {"well_distance": self.well_distance, "intake_height": self.intake_height,
                "hexagons": [{"id": h, "center": self.centers[h].tolist(), "damage": self.damage[h].tolist()}
                             for h in range(self.n_hex)],
                "wells": [{"id": w.id, "position": np.asarray(w.position).tolist(),
                           "members": [list(m) for m in w.members], "inflow": w.inflow} for w in self.wells],
                "bundle": bundle_path}

    def write_config(self, path: str | Path, bundle_path: str | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_config(bundle_path), indent=1, sort_keys=True) + "\n")


def site_from_config(config: dict, bundle: RomBundle) -> SiteModel:
    """Rebuild a site; the well set is taken from the config (by corner position)."""
    hexes = sorted(config["hexagons"], key=lambda d: d["id"])
    centers = np.array([h["center"] for h in hexes], float)
    damage = np.array([h["damage"] for h in hexes], float)
    site = SiteModel(centers, bundle, damage, intake_height=config.get("intake_height", DEFAULT_INTAKE_HEIGHT))
    wells = sorted(config["wells"], key=lambda d: d["id"])
    R = site.well_distance
    want = np.array([w["position"] for w in wells], float).reshape(-1, 2)
    key = {tuple(np.round(p / (R * 1e-6)).astype(np.int64)): i for i, p in enumerate(site.graph.positions)}
    chosen = []
    for p in want:
        k = tuple(np.round(p / (R * 1e-6)).astype(np.int64))
        if k not in key:
            raise ConfigurationError(f"well at {p.tolist()} is not a hexagon corner")
        chosen.append(key[k])
    site.open_corners = sorted(set(range(len(site.graph.members))) - set(chosen))
    site.wells = [Well(i, site.graph.positions[c], list(site.graph.members[c]), float(wells[i]["inflow"]))
                  for i, c in enumerate(chosen)]
    site._coupling = site._build_coupling()
    return site


def honeymoon_site(bundle: RomBundle, damage: np.ndarray | None = None, inflows=0.0, **kw) -> SiteModel:
    """225-hexagon preset (15 x 15 offset tiling) with 452 injection wells."""
    R = float(bundle.family.constants.get("well_distance", 15.0))
    centers = hex_grid_centers(*HONEYMOON_SHAPE, R)
    return SiteModel(centers, bundle, damage, inflows, well_policy="shared",
                     extra_wells=HONEYMOON_BOUNDARY_WELLS, **kw)


def write_well_csv(path: str | Path, site: SiteModel, sol: SiteSolution, header_line: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_line:
            fh.write(header_line + "\n")
        w = csv.writer(fh)
        w.writerow(["well_id", "x", "y", "inflow_lps", "multiplier_pa"])
        for well, p in zip(site.wells, sol.multipliers):
            w.writerow([well.id, repr(float(well.position[0])), repr(float(well.position[1])),
                        repr(well.inflow), repr(float(p))])


def write_hexagon_csv(path: str | Path, site: SiteModel, sol: SiteSolution | None = None,
                      header_line: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_line:
            fh.write(header_line + "\n")
        w = csv.writer(fh)
        w.writerow(["hex_id"] + [f"D{k}" for k in range(1, 7)] + ["outflow_lps"])
        for h in range(site.n_hex):
            out = "" if sol is None else repr(float(sol.outflows[h]))
            w.writerow([h] + [repr(float(d)) for d in site.damage[h]] + [out])
