"""Fixed triangular meshes for the benchmark domains and the well-field hexagon.

All generators are mapped structured grids (polar grid for the annulus,
split quads for rectangles, fan-graded blocks for the hexagon), so they are
deterministic and need no external mesher.  Boundary edges are stored with
the orientation of their owning triangle (counter-clockwise), which makes the
outward normal of edge ``a -> b`` equal to the clockwise rotation of
``x_b - x_a``.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import FormatError, ParameterError

MESH_HEADER = "TRIMESH v1"

RECT_TAG_SCHEMES = {
    "left_right": ("left", "right", "slip", "slip"),
    "benchmark2": ("left", "right", "slip", "slip"),
    "bottom_top": ("slip", "slip", "bottom", "top"),
    "benchmark3": ("slip", "slip", "bottom", "top"),
    "sides": ("left", "right", "bottom", "top"),
}


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Simplicial 2D mesh with tagged boundary edges.

    ``vertices`` is ``(n_vertices, 2)`` in meters, ``triangles`` is
    ``(n_triangles, 3)`` counter-clockwise, ``boundary_edges`` is
    ``(n_boundary, 2)`` and ``boundary_tags`` holds one tag per boundary edge.
    Arrays are read-only.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: tuple[str, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_tags", tuple(str(t) for t in self.boundary_tags))
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise ParameterError("one tag per boundary edge required")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def tags(self) -> tuple[str, ...]:
        """Distinct boundary tags in order of first appearance."""
        return tuple(dict.fromkeys(self.boundary_tags))

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def diameters(self) -> np.ndarray:
        """Longest edge length of every triangle."""
        p = self.vertices[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.sqrt((e ** 2).sum(axis=2)).max(axis=1)

    def unique_edges(self) -> np.ndarray:
        """All mesh edges as sorted vertex pairs, lexicographically ordered."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def edges_with_tag(self, tag: str) -> np.ndarray:
        mask = np.array([t == tag for t in self.boundary_tags], dtype=bool)
        return self.boundary_edges[mask]

    def edge_geometry(self, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Outward unit normals and lengths of oriented boundary edges."""
        d = self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]]
        length = np.hypot(d[:, 0], d[:, 1])
        normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
        return normal, length

    def validate(self) -> None:
        """Raise ``ParameterError`` if a structural invariant is broken."""
        if np.any(self.signed_areas() <= 0.0):
            raise ParameterError("mesh has non-positive triangle areas")
        found = _find_boundary_edges(self.triangles)
        expected = {tuple(sorted(e)) for e in found.tolist()}
        stored = [tuple(sorted(e)) for e in self.boundary_edges.tolist()]
        if len(stored) != len(set(stored)) or set(stored) != expected:
            raise ParameterError("boundary tags must cover every boundary edge exactly once")

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"{MESH_HEADER}\n")
        out.write(f"{self.n_vertices}\n")
        for x, y in self.vertices.tolist():
            out.write(f"{x!r} {y!r}\n")
        out.write(f"{self.n_triangles}\n")
        for a, b, c in self.triangles.tolist():
            out.write(f"{a} {b} {c}\n")
        out.write(f"{len(self.boundary_edges)}\n")
        for tag, (i, j) in zip(self.boundary_tags, self.boundary_edges.tolist()):
            out.write(f"{tag} {i} {j}\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TriMesh":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MESH_HEADER:
            raise FormatError("missing TRIMESH v1 header")
        try:
            pos = 1
            nv = int(lines[pos]); pos += 1
            verts = [tuple(float(v) for v in lines[pos + i].split()) for i in range(nv)]
            pos += nv
            nt = int(lines[pos]); pos += 1
            tris = [tuple(int(v) for v in lines[pos + i].split()) for i in range(nt)]
            pos += nt
            nb = int(lines[pos]); pos += 1
            tags, edges = [], []
            for i in range(nb):
                tag, a, b = lines[pos + i].split()
                tags.append(tag)
                edges.append((int(a), int(b)))
        except (IndexError, ValueError) as exc:
            raise FormatError(f"malformed mesh file: {exc}") from exc
        return cls(np.array(verts).reshape(-1, 2), np.array(tris).reshape(-1, 3),
                   np.array(edges).reshape(-1, 2), tuple(tags))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "TriMesh":
        return cls.from_text(Path(path).read_text())

    def sha256(self) -> str:
        if "sha256" not in self._cache:
            self._cache["sha256"] = hashlib.sha256(self.to_text().encode()).hexdigest()
        return self._cache["sha256"]


def _find_boundary_edges(triangles: np.ndarray) -> np.ndarray:
    """Directed edges that belong to exactly one triangle, in triangle order."""
    directed = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    key = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return directed[counts[inverse.ravel()] == 1]


def _orient_ccw(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    cw = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) < 0
    tris = triangles.copy()
    tris[cw] = tris[cw][:, [0, 2, 1]]
    return tris


def _split_quads(grid_index: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Split every cell of a structured ``(n0+1, n1+1)`` index grid along its shorter diagonal."""
    a = grid_index[:-1, :-1].ravel()
    b = grid_index[1:, :-1].ravel()
    c = grid_index[1:, 1:].ravel()
    d = grid_index[:-1, 1:].ravel()
    diag_ac = np.linalg.norm(points[c] - points[a], axis=1)
    diag_bd = np.linalg.norm(points[d] - points[b], axis=1)
    use_ac = diag_ac <= diag_bd * (1.0 + 1e-12)
    t1 = np.where(use_ac[:, None], np.stack([a, b, c], 1), np.stack([a, b, d], 1))
    t2 = np.where(use_ac[:, None], np.stack([a, c, d], 1), np.stack([b, c, d], 1))
    return np.concatenate([t1, t2])


def _assemble(vertices: np.ndarray, triangles: np.ndarray,
              tagger: Callable[[np.ndarray, np.ndarray], Sequence[str]]) -> TriMesh:
    triangles = _orient_ccw(vertices, triangles)
    edges = _find_boundary_edges(triangles)
    tags = tagger(vertices[edges[:, 0]], vertices[edges[:, 1]])
    mesh = TriMesh(vertices, triangles, edges, tuple(tags))
    return mesh


def make_annulus_mesh(r_inner: float, r_outer: float, resolution: int) -> TriMesh:
    """Polar grid on ``r_inner <= |x| <= r_outer`` with ``resolution`` radial layers.

    The angular count is chosen so that cells at the outer circle are square;
    boundary edges are tagged ``inner`` and ``outer``.
    """
    if not (0.0 < r_inner < r_outer):
        raise ParameterError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    if int(resolution) != resolution or resolution < 4:
        raise ParameterError("resolution must be an integer >= 4")
    n_r = int(resolution)
    dr = (r_outer - r_inner) / n_r
    n_theta = max(8, math.ceil(2.0 * math.pi * r_outer / dr))
    radii = r_inner + dr * np.arange(n_r + 1)
    radii[-1] = r_outer
    theta = 2.0 * math.pi * np.arange(n_theta) / n_theta
    rr, tt = np.meshgrid(radii, theta, indexing="ij")
    vertices = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
    index = np.arange((n_r + 1) * n_theta).reshape(n_r + 1, n_theta)
    index = np.concatenate([index, index[:, :1]], axis=1)  # periodic closure
    triangles = _split_quads(index, vertices)

    r_mid = 0.5 * (r_inner + r_outer)

    def tagger(p0, p1):
        r = 0.5 * (np.hypot(*p0.T) + np.hypot(*p1.T))
        return ["inner" if ri < r_mid else "outer" for ri in r]

    return _assemble(vertices, triangles, tagger)


def make_rect_mesh(width: float, height: float, nx: int, ny: int,
                   tag_scheme: str = "left_right") -> TriMesh:
    """Structured ``nx`` x ``ny`` grid on ``[0, width] x [0, height]``, two triangles per cell.

    ``tag_scheme`` is one of ``left_right`` (alias ``benchmark2``: left/right
    pressure sides, slip top/bottom), ``bottom_top`` (alias ``benchmark3``)
    or ``sides`` (four distinct tags).
    """
    if width <= 0 or height <= 0:
        raise ParameterError("rectangle dimensions must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ParameterError("nx, ny must be integers >= 1")
    if tag_scheme not in RECT_TAG_SCHEMES:
        raise ParameterError(f"unknown tag_scheme {tag_scheme!r}; choose from {sorted(RECT_TAG_SCHEMES)}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([xx, yy], axis=-1).reshape(-1, 2)
    index = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = index[:-1, :-1].ravel()
    b = index[1:, :-1].ravel()
    c = index[1:, 1:].ravel()
    d = index[:-1, 1:].ravel()
    triangles = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    left, right, bottom, top = RECT_TAG_SCHEMES[tag_scheme]
    tol = 1e-12 * max(width, height)

    def tagger(p0, p1):
        m = 0.5 * (p0 + p1)
        tags = []
        for x, y in m:
            if abs(x) < tol:
                tags.append(left)
            elif abs(x - width) < tol:
                tags.append(right)
            elif abs(y) < tol:
                tags.append(bottom)
            else:
                tags.append(top)
        return tags

    return _assemble(vertices, triangles, tagger)


def hexagon_corners(well_distance: float) -> np.ndarray:
    """Corner (injection well) positions; corner ``k`` sits at angle ``60 k`` degrees."""
    ang = np.pi / 3.0 * np.arange(6)
    return well_distance * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _geometric(n: int, ratio: float) -> np.ndarray:
    """``n+1`` points in [0, 1] with spacing growing geometrically, last/first ~ ``ratio``."""
    if n == 1 or abs(ratio - 1.0) < 1e-12:
        return np.linspace(0.0, 1.0, n + 1)
    q = ratio ** (1.0 / n)
    s = (q ** np.arange(n + 1) - 1.0) / (q ** n - 1.0)
    s[-1] = 1.0
    return s


def _radial_count(k: int, length: float, a: float, b: float) -> int:
    # cells stay roughly square when the transverse spacing grows linearly from a/k to b/k
    return max(1, math.ceil(k * length * math.log(b / a) / (b - a)))


def _ruled_block(inner: Callable[[np.ndarray], np.ndarray], outer: Callable[[np.ndarray], np.ndarray],
                 s: np.ndarray, eta: np.ndarray) -> np.ndarray:
    a = inner(eta)  # (m, 2)
    b = outer(eta)
    return a[None, :, :] + s[:, None, None] * (b - a)[None, :, :]


def make_hexagon_mesh(well_distance: float, well_radius: float, resolution: int) -> TriMesh:
    """Regular hexagon with a production hole at the center and injection holes at the corners.

    ``well_distance`` is the center-to-corner distance.  The mesh is built from
    one twelfth of the hexagon (two fan-graded blocks around the center hole and
    the corner hole) that is mirrored and rotated; ``resolution`` is the number
    of cells across each twelfth.  Tags: ``production``, ``well_1`` ..
    ``well_6`` (corner ``k`` at angle ``60 (k-1)`` degrees) and ``slip``.
    """
    R, rw = float(well_distance), float(well_radius)
    if not (R > 0 and 0 < rw < R / 4.0):
        raise ParameterError(f"need 0 < well_radius < well_distance/4, got {rw}, {R}")
    if int(resolution) != resolution or resolution < 1:
        raise ParameterError("resolution must be a positive integer")
    k = int(resolution)
    eta = np.linspace(0.0, 1.0, k + 1)
    apothem = R * math.sqrt(3.0) / 2.0
    mp_len = R * math.sqrt(3.0) / 4.0
    P = np.array([0.75 * R, 0.0])

    def seg_mp(e):
        return np.stack([np.full_like(e, P[0]), e * mp_len], axis=1)

    def center_arc(e):
        ang = e * math.pi / 6.0
        return rw * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def corner_arc(e):
        ang = math.pi - e * math.pi / 3.0
        return np.array([R, 0.0]) + rw * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    len1 = 0.5 * ((0.75 * R - rw) + (apothem - rw))
    n1 = _radial_count(k, len1, rw * math.pi / 6.0, mp_len)
    len2 = 0.5 * ((0.25 * R - rw) + (0.5 * R - rw))
    n2 = _radial_count(k, len2, rw * math.pi / 3.0, mp_len)
    s1 = _geometric(n1, mp_len / (rw * math.pi / 6.0))
    s2 = _geometric(n2, mp_len / (rw * math.pi / 3.0))

    block1 = _ruled_block(center_arc, seg_mp, s1, eta)
    block2 = _ruled_block(corner_arc, seg_mp, s2, eta)
    pts = np.concatenate([block1.reshape(-1, 2), block2.reshape(-1, 2)])
    idx1 = np.arange(block1.shape[0] * block1.shape[1]).reshape(block1.shape[:2])
    idx2 = block1.shape[0] * block1.shape[1] + np.arange(block2.shape[0] * block2.shape[1]).reshape(block2.shape[:2])
    tri = np.concatenate([_split_quads(idx1, pts), _split_quads(idx2, pts)])

    copies, tris = [], []
    offset = 0
    for m in range(6):
        c, s = math.cos(m * math.pi / 3.0), math.sin(m * math.pi / 3.0)
        rot = np.array([[c, -s], [s, c]])
        for mirror in (False, True):
            local = pts * np.array([1.0, -1.0]) if mirror else pts
            copies.append(local @ rot.T)
            tris.append(tri + offset)
            offset += len(pts)
    allpts = np.concatenate(copies)
    alltri = np.concatenate(tris)
    vertices, alltri = _merge_vertices(allpts, alltri, tol=1e-9 * R)

    corners = hexagon_corners(R)
    hole_tol = 1e-7 * R

    def tagger(p0, p1):
        tags = []
        for a, b in zip(p0, p1):
            if abs(np.hypot(*a) - rw) < hole_tol and abs(np.hypot(*b) - rw) < hole_tol:
                tags.append("production")
                continue
            for j, cj in enumerate(corners):
                if (abs(np.hypot(*(a - cj)) - rw) < hole_tol
                        and abs(np.hypot(*(b - cj)) - rw) < hole_tol):
                    tags.append(f"well_{j + 1}")
                    break
            else:
                tags.append("slip")
        return tags

    return _assemble(vertices, alltri, tagger)


def _merge_vertices(points: np.ndarray, triangles: np.ndarray, tol: float):
    """Collapse coincident points; numbering follows first appearance."""
    pairs = cKDTree(points).query_pairs(tol, output_type="ndarray")
    n = len(points)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    first = np.full(labels.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    order = np.argsort(first, kind="stable")
    new_id = np.empty_like(order)
    new_id[order] = np.arange(len(order))
    vertices = points[first[order]]
    return vertices, new_id[labels][triangles]


def triangle_area_total(meshes: Iterable[TriMesh]) -> float:
    return float(sum(m.area() for m in meshes))
