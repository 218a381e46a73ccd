"""Z-buffered triangle rasterization of posed template meshes.

Conventions: pixel ``(row, col)`` is sampled at its centre ``(col + 0.5,
row + 0.5)``; a centre lying exactly on an edge belongs to the triangle for
which that edge is a top or left edge, so shared edges are filled once.
Attributes are interpolated perspective-correctly. Triangles with a vertex
at or behind ``NEAR`` are skipped (there is no near-plane clipping). No
back-face culling; the nearest surface wins, earlier faces win exact ties.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atlas import TemplateMesh, UVAtlas
from .fields import Camera, CorrespondenceField

__all__ = [
    "NEAR",
    "RasterBuffers",
    "rasterize",
    "rasterize_correspondence",
    "face_patches",
    "is_top_left",
]

NEAR = 1e-6


@dataclass
class RasterBuffers:
    face: np.ndarray  # (H, W) int, -1 where empty
    depth: np.ndarray  # (H, W) camera-frame z, inf where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct weights of face vertices

    @property
    def mask(self):
        return self.face >= 0


def is_top_left(dx, dy):
    """Edge direction test for a triangle wound so its edge functions are positive inside."""
    return (dy < 0) | ((dy == 0) & (dx > 0))


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(screen, faces, width, height) -> RasterBuffers:
    """Rasterize triangles given per-vertex ``(x, y, z)`` screen coordinates.

    ``screen`` is ``(n, 3)``: pixel x, pixel y, camera depth.
    """
    screen = np.asarray(screen, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    face_buf = -np.ones((height, width), dtype=np.int64)
    depth = np.full((height, width), np.inf)
    bary = np.zeros((height, width, 3))
    for fi, tri in enumerate(faces):
        pts = screen[tri]
        if np.any(~np.isfinite(pts)) or np.any(pts[:, 2] <= NEAR):
            continue
        (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = pts
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        order = (0, 1, 2)
        if area < 0:
            # swap vertices 1 and 2 so edge functions are positive inside
            order = (0, 2, 1)
            x1, y1, z1, x2, y2, z2 = x2, y2, z2, x1, y1, z1
            area = -area
        c0 = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        c1 = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        r0 = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        r1 = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        if c0 > c1 or r0 > r1:
            continue
        px = np.arange(c0, c1 + 1) + 0.5
        py = np.arange(r0, r1 + 1)[:, None] + 0.5
        w0 = _edge(x1, y1, x2, y2, px, py)
        w1 = _edge(x2, y2, x0, y0, px, py)
        w2 = _edge(x0, y0, x1, y1, px, py)
        inside = np.ones(w0.shape, dtype=bool)
        for w, (ax, ay, bx, by) in (
            (w0, (x1, y1, x2, y2)),
            (w1, (x2, y2, x0, y0)),
            (w2, (x0, y0, x1, y1)),
        ):
            if is_top_left(bx - ax, by - ay):
                inside &= w >= 0
            else:
                inside &= w > 0
        if not inside.any():
            continue
        l0, l1, l2 = w0 / area, w1 / area, w2 / area
        inv_z = l0 / z0 + l1 / z1 + l2 / z2
        z = 1.0 / inv_z
        sub_d = depth[r0:r1 + 1, c0:c1 + 1]
        win = inside & (z < sub_d)
        if not win.any():
            continue
        b = np.empty(w0.shape + (3,))
        b[..., order[0]] = l0 / z0 * z
        b[..., order[1]] = l1 / z1 * z
        b[..., order[2]] = l2 / z2 * z
        sub_d[win] = z[win]
        face_buf[r0:r1 + 1, c0:c1 + 1][win] = fi
        bary[r0:r1 + 1, c0:c1 + 1][win] = b[win]
    return RasterBuffers(face_buf, depth, bary)


def face_patches(mesh: TemplateMesh, atlas: UVAtlas) -> np.ndarray:
    """Chart of each face: the chart of its first vertex."""
    if not len(mesh.faces):
        return np.zeros(0, dtype=np.int64)
    return atlas.patch[mesh.faces[:, 0]]


def rasterize_correspondence(posed, mesh: TemplateMesh, atlas: UVAtlas, camera: Camera) -> CorrespondenceField:
    """Render the per-pixel chart and (u, v) of a posed template.

    ``posed`` holds the world-space positions of the template's vertices.
    Meshes whose charts are split should duplicate seam vertices so every
    face lies inside a single chart.
    """
    posed = np.asarray(posed, dtype=np.float64).reshape(-1, 3)
    if len(posed) != mesh.n_vertices:
        raise ValueError(f"posed vertex count {len(posed)} != template vertex count {mesh.n_vertices}")
    if len(atlas.uv) != mesh.n_vertices:
        raise ValueError("atlas does not match the template mesh")
    field = CorrespondenceField.empty(camera.width, camera.height)
    if not len(mesh.faces):
        return field
    buf = rasterize(camera.project(posed), mesh.faces, camera.width, camera.height)
    m = buf.mask
    fid = buf.face[m]
    tri = mesh.faces[fid]
    w = buf.bary[m]
    uv = np.einsum("nk,nkc->nc", w, atlas.uv[tri])
    field.mask = m
    field.face = buf.face
    field.depth = buf.depth
    field.patch[m] = face_patches(mesh, atlas)[fid]
    field.u[m] = np.clip(uv[:, 0], 0.0, 1.0)
    field.v[m] = np.clip(uv[:, 1], 0.0, 1.0)
    return field
