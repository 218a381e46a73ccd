"""Template meshes and their deformation-free UV charts."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .codec import encode

__all__ = [
    "MeshError",
    "TemplateMesh",
    "UVAtlas",
    "Tessellation",
    "Axis",
    "load_mesh",
    "dump_mesh",
    "cylindrical_unwrap",
    "patch_mds_unwrap",
    "patch_mds_coordinates",
    "geodesic_distances",
    "classical_mds",
    "tessellate",
    "write_atlas_csv",
    "read_atlas_csv",
]

AREA_TOL = 1e-12
SEAM_TOL = 1e-12


class MeshError(ValueError):
    """Malformed mesh input or a violated mesh/atlas precondition."""


def _freeze(a):
    a.setflags(write=False)
    return a


def _edges(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True)
class TemplateMesh:
    """Triangle mesh with optional per-vertex chart labels.

    Arrays are copied and made read-only on construction.
    """

    vertices: np.ndarray
    faces: np.ndarray
    patch_of_vertex: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size:
            area = self._areas(v, f)
            bad = np.flatnonzero(area <= AREA_TOL)
            if bad.size:
                raise MeshError(f"degenerate face {int(bad[0])} (area {area[bad[0]]:.3g})")
        object.__setattr__(self, "vertices", _freeze(v))
        object.__setattr__(self, "faces", _freeze(f))
        if self.patch_of_vertex is not None:
            p = np.array(self.patch_of_vertex, dtype=np.int64).reshape(-1)
            if len(p) != len(v):
                raise MeshError("patch labels must have one entry per vertex")
            if p.size and p.min() < 0:
                raise MeshError("patch labels must be non-negative")
            object.__setattr__(self, "patch_of_vertex", _freeze(p))

    @staticmethod
    def _areas(v, f):
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_patches(self) -> int:
        if self.patch_of_vertex is None or not len(self.patch_of_vertex):
            return 1
        return int(self.patch_of_vertex.max()) + 1

    def edges(self) -> np.ndarray:
        return _edges(self.faces)

    def with_patches(self, labels) -> TemplateMesh:
        return TemplateMesh(self.vertices, self.faces, labels)


@dataclass(frozen=True)
class UVAtlas:
    """Per-vertex chart index and (u, v) coordinates in [0, 1]^2."""

    patch: np.ndarray
    uv: np.ndarray
    n_patches: int = field(default=-1)

    def __post_init__(self):
        p = np.array(self.patch, dtype=np.int64).reshape(-1)
        uv = np.array(self.uv, dtype=np.float64).reshape(-1, 2)
        if len(p) != len(uv):
            raise MeshError("atlas patch and uv lengths differ")
        if uv.size and (uv.min() < 0.0 or uv.max() > 1.0 or not np.all(np.isfinite(uv))):
            raise MeshError("atlas coordinates must lie in [0, 1]")
        n = self.n_patches if self.n_patches > 0 else (int(p.max()) + 1 if p.size else 1)
        if p.size and (p.min() < 0 or p.max() >= n):
            raise MeshError("atlas patch index out of range")
        object.__setattr__(self, "patch", _freeze(p))
        object.__setattr__(self, "uv", _freeze(uv))
        object.__setattr__(self, "n_patches", n)

    @property
    def u(self):
        return self.uv[:, 0]

    @property
    def v(self):
        return self.uv[:, 1]

    def is_injective(self, tol: float = 1e-9) -> bool:
        """True when no two vertices of a chart share (u, v) within ``tol``."""
        from scipy.spatial import cKDTree

        for p in range(self.n_patches):
            pts = self.uv[self.patch == p]
            if len(pts) > 1 and cKDTree(pts).query_pairs(tol, p=np.inf):
                return False
        return True


@dataclass(frozen=True)
class Tessellation:
    K: int
    qh: np.ndarray
    qv: np.ndarray

    @property
    def d(self) -> float:
        return 1.0 / self.K


@dataclass(frozen=True)
class Axis:
    """Oriented line used for cylindrical unwrapping.

    ``reference`` is the direction of angle 0 (the seam); it is projected onto
    the plane orthogonal to ``direction``. When omitted, the radial direction
    of the first vertex is used, which keeps the unwrap rigid-motion invariant.
    """

    origin: tuple
    direction: tuple
    reference: tuple | None = None


def load_mesh(text: str) -> TemplateMesh:
    """Parse the ``v``/``f`` subset of Wavefront OBJ.

    Face indices are 1-based; ``i/j/k`` style references keep only the vertex
    index. Quads and larger polygons are fan-triangulated from their first
    vertex. Other record types are rejected.
    """
    verts, faces = [], []
    face_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(x) for x in rest[:3]])
            except ValueError:
                raise MeshError(f"line {lineno}: bad vertex coordinate") from None
        elif tag == "f":
            if len(rest) < 3:
                raise MeshError(f"line {lineno}: face needs at least 3 vertices")
            try:
                idx = [int(tok.split("/")[0]) for tok in rest]
            except ValueError:
                raise MeshError(f"line {lineno}: bad face index") from None
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
                face_lines.append(lineno)
        else:
            raise MeshError(f"line {lineno}: unsupported record {tag!r}")
    n = len(verts)
    for tri, lineno in zip(faces, face_lines):
        for i in tri:
            if not 1 <= i <= n:
                raise MeshError(f"line {lineno}: face index {i} out of range 1..{n}")
    f = np.array(faces, dtype=np.int64).reshape(-1, 3) - 1
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if len(f):
        area = TemplateMesh._areas(v, f)
        bad = np.flatnonzero(area <= AREA_TOL)
        if bad.size:
            raise MeshError(f"line {face_lines[bad[0]]}: degenerate face")
    return TemplateMesh(v, f)


def dump_mesh(mesh: TemplateMesh) -> str:
    out = io.StringIO()
    for x, y, z in mesh.vertices:
        out.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    for a, b, c in mesh.faces + 1:
        out.write(f"f {a} {b} {c}\n")
    return out.getvalue()


def _unit(v, what):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise MeshError(f"{what} must be non-zero")
    return v / n


def cylindrical_unwrap(mesh: TemplateMesh, axis: Axis) -> UVAtlas:
    """Single-chart atlas from angle and height around ``axis``.

    ``u = angle / (2*pi)`` with the angle measured counter-clockwise about
    ``axis.direction`` from ``axis.reference`` (range ``[0, 2*pi)``), and ``v``
    is the height along the axis, min-max normalized.
    """
    x = mesh.vertices
    if not len(x):
        raise MeshError("cannot unwrap an empty mesh")
    o = np.asarray(axis.origin, dtype=np.float64)
    a = _unit(axis.direction, "axis direction")
    rel = x - o
    h = rel @ a
    radial = rel - h[:, None] * a
    dist = np.linalg.norm(radial, axis=1)
    if np.any(dist <= 1e-9):
        i = int(np.flatnonzero(dist <= 1e-9)[0])
        raise MeshError(f"vertex {i} lies on the unwrap axis")
    ref = radial[0] if axis.reference is None else np.asarray(axis.reference, dtype=np.float64)
    e1 = ref - (ref @ a) * a
    e1 = _unit(e1, "reference direction (orthogonal to axis)")
    e2 = np.cross(a, e1)
    theta = np.arctan2(radial @ e2, radial @ e1)
    # angles a hair below zero are seam vertices disturbed by rounding
    theta = np.where(theta < -SEAM_TOL, theta + 2 * np.pi, np.maximum(theta, 0.0))
    u = np.minimum(theta / (2 * np.pi), 1.0)
    span = h.max() - h.min()
    if span <= 1e-12:
        raise MeshError("mesh has zero extent along the unwrap axis")
    v = (h - h.min()) / span
    return UVAtlas(np.zeros(len(x), dtype=np.int64), np.column_stack([u, v]), 1)


def _patch_graph(mesh, idx):
    """Edge-graph restricted to vertex subset ``idx`` with Euclidean weights."""
    local = -np.ones(mesh.n_vertices, dtype=np.int64)
    local[idx] = np.arange(len(idx))
    e = mesh.edges()
    keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0)
    e = e[keep]
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    i, j = local[e[:, 0]], local[e[:, 1]]
    n = len(idx)
    return coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()


def classical_mds(dist: np.ndarray, dim: int = 2):
    """Classical MDS of a distance matrix; returns ``(coords, eigenvalues)``."""
    n = len(dist)
    d2 = dist**2
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ d2 @ J
    B = 0.5 * (B + B.T)
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1][:dim]
    evals, evecs = evals[order], evecs[:, order]
    return evecs * np.sqrt(np.maximum(evals, 0.0)), evals


def _patch_faces(mesh, idx):
    local = -np.ones(mesh.n_vertices, dtype=np.int64)
    local[idx] = np.arange(len(idx))
    lf = local[mesh.faces]
    return lf[np.all(lf >= 0, axis=1)]


def geodesic_distances(mesh: TemplateMesh, idx, metric: str = "exact") -> np.ndarray:
    """All-pairs surface distances among vertices ``idx``.

    ``metric="exact"`` computes polyhedral geodesics over the faces lying
    entirely inside the vertex subset; ``metric="edge"`` uses shortest paths
    on the edge graph (an upper bound that zig-zags along edges).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if metric == "edge":
        return shortest_path(_patch_graph(mesh, idx), method="D", directed=False)
    if metric != "exact":
        raise ValueError(f"unknown geodesic metric {metric!r}")
    from pygeodesic.geodesic import PyGeodesicAlgorithmExact

    faces = _patch_faces(mesh, idx)
    n = len(idx)
    dist = np.full((n, n), np.inf)
    if not len(faces):
        return dist
    # the solver needs every vertex it sees to belong to a face
    used = np.unique(faces)
    remap = -np.ones(n, dtype=np.int64)
    remap[used] = np.arange(len(used))
    algo = PyGeodesicAlgorithmExact(
        np.ascontiguousarray(mesh.vertices[idx[used]]), np.ascontiguousarray(remap[faces], dtype=np.int32)
    )
    for k, i in enumerate(used):
        d, _ = algo.geodesicDistances(np.array([k], dtype=np.int32), None)
        dist[i, used] = d
    # the solver is not exactly symmetric; average the two directions
    return 0.5 * (dist + dist.T)


def patch_mds_coordinates(mesh: TemplateMesh, idx, metric: str = "exact", patch: int = 0):
    """Raw 2-D MDS embedding (before normalization) of the vertex subset ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) < 3:
        raise MeshError(f"patch {patch} has {len(idx)} vertices; at least 3 required")
    ncomp, _ = connected_components(_patch_graph(mesh, idx), directed=False)
    if ncomp != 1:
        raise MeshError(f"patch {patch} is not connected ({ncomp} components)")
    # checked up front: the exact solver can fail on such charts instead of returning inf
    if metric == "exact" and len(np.unique(_patch_faces(mesh, idx))) < len(idx):
        raise MeshError(f"patch {patch} has vertices not covered by any of its faces")
    dist = geodesic_distances(mesh, idx, metric)
    if not np.all(np.isfinite(dist)):
        raise MeshError(f"patch {patch} has vertices not covered by any of its faces")
    coords, evals = classical_mds(dist, 2)
    tol = max(abs(evals[0]), 1.0) * 1e-12
    if evals[1] <= tol:
        raise MeshError(f"patch {patch}: non-positive leading MDS eigenvalues {evals.tolist()}")
    return coords


def _normalize_chart(coords):
    coords = coords.copy()
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    # orientation: first vertex of the patch goes to the lower-left quadrant
    for k in range(2):
        if coords[0, k] > 0.5 * (lo[k] + hi[k]):
            coords[:, k] = -coords[:, k]
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    return np.clip((coords - lo) / (hi - lo), 0.0, 1.0)


def patch_mds_unwrap(mesh: TemplateMesh, partition=None, metric: str = "exact") -> UVAtlas:
    """Flatten every chart by classical MDS on surface geodesics.

    Each chart is then min-max normalized per axis so it spans [0, 1]^2. The
    sign of each MDS axis is fixed so the chart's first vertex (lowest index)
    lies in the lower half of the respective axis. Faces that straddle two
    charts take no part in either chart's geodesics.
    """
    labels = mesh.patch_of_vertex if partition is None else np.asarray(partition, dtype=np.int64)
    if labels is None:
        raise MeshError("patch_mds_unwrap needs per-vertex patch labels")
    if len(labels) != mesh.n_vertices:
        raise MeshError("partition must have one label per vertex")
    n_patches = int(labels.max()) + 1
    uv = np.zeros((mesh.n_vertices, 2))
    for p in range(n_patches):
        idx = np.flatnonzero(labels == p)
        uv[idx] = _normalize_chart(patch_mds_coordinates(mesh, idx, metric, p))
    return UVAtlas(labels, uv, n_patches)


def tessellate(atlas: UVAtlas, K: int) -> Tessellation:
    """Per-vertex bin indices of a uniform K x K grid over each chart."""
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    qh, _ = encode(atlas.u, K)
    qv, _ = encode(atlas.v, K)
    return Tessellation(int(K), _freeze(qh), _freeze(qv))


def write_atlas_csv(atlas: UVAtlas, fp) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["vertex", "patch", "u", "v"])
    for i, (p, (u, v)) in enumerate(zip(atlas.patch, atlas.uv)):
        w.writerow([i, int(p), f"{u:.9g}", f"{v:.9g}"])


def read_atlas_csv(fp) -> UVAtlas:
    rows = list(csv.DictReader(fp))
    rows.sort(key=lambda r: int(r["vertex"]))
    patch = [int(r["patch"]) for r in rows]
    uv = [[float(r["u"]), float(r["v"])] for r in rows]
    return UVAtlas(patch, uv)
