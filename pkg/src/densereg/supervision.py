"""Template-to-image transfer: landmarks, part labels and thin-plate splines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atlas import TemplateMesh, UVAtlas
from .fields import Camera, CorrespondenceField
from .raster import NEAR, rasterize_correspondence

__all__ = [
    "Landmark",
    "LandmarkSet",
    "LandmarkError",
    "locate_in_atlas",
    "project_landmarks",
    "ClassMap",
    "transfer_segmentation",
    "TPSWarp",
    "tps_fit",
    "tps_apply",
    "tps_correspondence",
    "VISIBILITY_EPS",
]

VISIBILITY_EPS = 1e-6


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class Landmark:
    name: str
    patch: int
    u: float
    v: float


class LandmarkSet:
    """Named template points given in chart coordinates."""

    def __init__(self, landmarks):
        self.landmarks = tuple(landmarks)
        names = [lm.name for lm in self.landmarks]
        if len(set(names)) != len(names):
            raise LandmarkError("landmark names must be unique")
        for lm in self.landmarks:
            if not (0.0 <= lm.u <= 1.0 and 0.0 <= lm.v <= 1.0):
                raise LandmarkError(f"landmark {lm.name!r} lies outside [0, 1]^2")

    @classmethod
    def from_uv(cls, mapping, patch=0):
        return cls(Landmark(n, patch, float(u), float(v)) for n, (u, v) in mapping.items())

    def __len__(self):
        return len(self.landmarks)

    def __iter__(self):
        return iter(self.landmarks)

    @property
    def names(self):
        return [lm.name for lm in self.landmarks]

    def index(self, name):
        return self.names.index(name)

    def to_dict(self):
        return [{"name": lm.name, "patch": lm.patch, "u": lm.u, "v": lm.v} for lm in self.landmarks]

    @classmethod
    def from_dict(cls, rows):
        return cls(Landmark(r["name"], int(r["patch"]), float(r["u"]), float(r["v"])) for r in rows)


def _bary2d(p, a, b, c):
    """Barycentric weights of 2-D points ``p`` w.r.t. triangles ``(a, b, c)``."""
    v0, v1, v2 = b - a, c - a, p - a
    den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
        l2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def locate_in_atlas(mesh: TemplateMesh, atlas: UVAtlas, patch: int, u: float, v: float, tol=1e-12):
    """Face index and barycentric weights of chart point ``(patch, u, v)``, or None."""
    f = mesh.faces
    in_chart = np.all(atlas.patch[f] == patch, axis=1)
    cand = np.flatnonzero(in_chart)
    if not cand.size:
        return None
    uv = atlas.uv[f[cand]]
    w = _bary2d(np.array([u, v]), uv[:, 0], uv[:, 1], uv[:, 2])
    ok = np.all(w >= -tol, axis=1) & np.all(np.isfinite(w), axis=1)
    if not ok.any():
        return None
    k = int(np.flatnonzero(ok)[0])
    return int(cand[k]), w[k]


def _nearest_depth_at(screen, faces, x, y):
    """Smallest depth among triangles covering image point ``(x, y)`` (edges inclusive)."""
    tri = screen[faces]
    ok = np.all(tri[:, :, 2] > NEAR, axis=1) & np.all(np.isfinite(tri), axis=(1, 2))
    tri = tri[ok]
    if not len(tri):
        return np.inf
    w = _bary2d(np.array([x, y]), tri[:, 0, :2], tri[:, 1, :2], tri[:, 2, :2])
    cover = np.all(w >= -1e-12, axis=1) & np.all(np.isfinite(w), axis=1)
    if not cover.any():
        return np.inf
    w, z = w[cover], tri[cover, :, 2]
    return float(np.min(1.0 / np.sum(w / z, axis=1)))


def project_landmarks(posed, mesh: TemplateMesh, atlas: UVAtlas, landmarks: LandmarkSet, camera: Camera,
                      field: CorrespondenceField | None = None):
    """Image position and visibility of each template landmark.

    Returns ``(positions, visible)`` with positions ``(L, 2)`` in pixel units
    (pixel ``(r, c)`` has its centre at ``(c + 0.5, r + 0.5)``). A landmark is
    visible when it projects inside the frame in front of the camera, no
    surface covering its exact image position is nearer by more than
    ``VISIBILITY_EPS``, and the rasterized ``field`` (computed when not
    given) assigns the pixel containing it to the landmark's chart.
    """
    posed = np.asarray(posed, dtype=np.float64).reshape(-1, 3)
    if len(posed) != mesh.n_vertices:
        raise ValueError("posed vertex count does not match the template")
    if field is None:
        field = rasterize_correspondence(posed, mesh, atlas, camera)
    screen = camera.project(posed)
    pos = np.zeros((len(landmarks), 2))
    vis = np.zeros(len(landmarks), dtype=bool)
    for i, lm in enumerate(landmarks):
        hit = locate_in_atlas(mesh, atlas, lm.patch, lm.u, lm.v)
        if hit is None:
            raise LandmarkError(f"landmark {lm.name!r} lies outside every triangle of chart {lm.patch}")
        fi, w = hit
        x, y, z = camera.project(w @ posed[mesh.faces[fi]])
        pos[i] = x, y
        if z <= NEAR or not (0.0 <= x < camera.width and 0.0 <= y < camera.height):
            continue
        r, c = int(y), int(x)
        if not (field.mask[r, c] and field.patch[r, c] == lm.patch):
            continue
        vis[i] = z <= _nearest_depth_at(screen, mesh.faces, x, y) + VISIBILITY_EPS
    return pos, vis


class ClassMap:
    """Partition of every chart into class ids, stored as a raster per chart.

    ``grid[p, i, j]`` is the class of chart ``p`` points with
    ``v`` in row ``i`` and ``u`` in column ``j`` of a uniform ``R x R`` grid.
    """

    def __init__(self, grid, background=0):
        g = np.asarray(grid, dtype=np.int64)
        if g.ndim == 2:
            g = g[None]
        if g.ndim != 3:
            raise ValueError("class grid must be (P, R, C) or (R, C)")
        if np.any(g == background):
            raise ValueError(f"class ids must differ from the background id {background}")
        self.grid = g
        self.background = int(background)

    @property
    def n_patches(self):
        return self.grid.shape[0]

    def lookup(self, patch, u, v):
        patch = np.asarray(patch, dtype=np.int64)
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if np.any(patch < 0) or np.any(patch >= self.n_patches):
            raise ValueError("class map has no region for the queried chart")
        if np.any(u < 0) or np.any(u > 1) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("class map queried outside [0, 1]^2")
        _, R, C = self.grid.shape
        i = np.minimum((v * R).astype(np.int64), R - 1)
        j = np.minimum((u * C).astype(np.int64), C - 1)
        return self.grid[patch, i, j]

    @classmethod
    def from_function(cls, fn, n_patches=1, resolution=256, background=0):
        """Rasterize ``fn(patch, u, v) -> class`` at cell centres."""
        c = (np.arange(resolution) + 0.5) / resolution
        uu, vv = np.meshgrid(c, c)
        grid = np.stack([np.asarray(fn(p, uu, vv), dtype=np.int64) * np.ones_like(uu, dtype=np.int64)
                         for p in range(n_patches)])
        return cls(grid, background)


def transfer_segmentation(field: CorrespondenceField, classes: ClassMap) -> np.ndarray:
    """Per-pixel class labels; background pixels get ``classes.background``."""
    out = np.full(field.mask.shape, classes.background, dtype=np.int64)
    m = field.mask
    if m.any():
        out[m] = classes.lookup(field.patch[m], field.u[m], field.v[m])
    return out


@dataclass(frozen=True)
class TPSWarp:
    """Thin-plate spline ``f(p) = A[:, :2] p + A[:, 2] + sum_i w_i U(|p - c_i|)``."""

    controls: np.ndarray  # (n, 2) source control points
    affine: np.ndarray  # (2, 3)
    weights: np.ndarray  # (n, 2) kernel weights


def _tps_kernel(r2):
    # U(r) = r^2 log r = 0.5 r^2 log r^2, with U(0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        k = 0.5 * r2 * np.log(r2)
    return np.where(r2 > 0, k, 0.0)


def _sqdist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.sum(d * d, axis=-1)


def tps_fit(src, dst, cond_limit=1e12) -> TPSWarp:
    """Interpolating thin-plate spline mapping ``src`` controls onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise np.linalg.LinAlgError("TPS needs at least 3 matching control pairs")
    if len(np.unique(src, axis=0)) != n:
        raise np.linalg.LinAlgError("TPS source controls must be distinct")
    P = np.column_stack([src, np.ones(n)])
    if np.linalg.matrix_rank(P, tol=1e-10 * max(1.0, np.abs(src).max())) < 3:
        raise np.linalg.LinAlgError("TPS source controls are collinear")
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _tps_kernel(_sqdist(src, src))
    L[:n, n:] = P
    L[n:, :n] = P.T
    if np.linalg.cond(L) > cond_limit:
        raise np.linalg.LinAlgError("TPS system is numerically singular")
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    sol = np.linalg.solve(L, rhs)
    w, a = sol[:n], sol[n:]
    # a rows are coefficients of (x, y, 1)
    return TPSWarp(src.copy(), a.T.copy(), w)


def tps_apply(warp: TPSWarp, points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    shape = p.shape
    p = p.reshape(-1, 2)
    out = p @ warp.affine[:, :2].T + warp.affine[:, 2]
    out += _tps_kernel(_sqdist(p, warp.controls)) @ warp.weights
    return out.reshape(shape)


def tps_correspondence(image_points, template_uv, width, height, template_mask=None) -> CorrespondenceField:
    """Dense field for a planar template from sparse landmark matches.

    A spline is fitted from image landmark positions to their template (u, v)
    and evaluated at every pixel centre. Pixels mapping outside [0, 1]^2, or
    outside ``template_mask(u, v)`` when given, are background.
    """
    warp = tps_fit(image_points, template_uv)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    grid = np.stack(np.meshgrid(xs, ys), axis=-1)
    uv = tps_apply(warp, grid)
    u, v = uv[..., 0], uv[..., 1]
    mask = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if template_mask is not None:
        mask &= np.asarray(template_mask(np.clip(u, 0, 1), np.clip(v, 0, 1)), dtype=bool)
    field = CorrespondenceField.empty(width, height, with_depth=False)
    field.mask = mask
    field.u[mask] = u[mask]
    field.v[mask] = v[mask]
    return field
