"""Correspondence fields, cameras, and their on-disk formats.

DRF1 layout (all little-endian)::

    b"DRF1" | u32 width | u32 height | u8 n_channels
    | n_channels x 4-byte ASCII tag | n_channels x (height*width) float32, row-major
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FormatError",
    "Camera",
    "CorrespondenceField",
    "write_drf",
    "read_drf",
    "write_field",
    "read_field",
    "write_ppm",
    "read_ppm",
    "write_landmarks_csv",
    "read_landmarks_csv",
]

DRF_MAGIC = b"DRF1"
FIELD_TAGS = ("MASK", "PTCH", "U___", "V___", "DPTH")


class FormatError(ValueError):
    """Malformed file contents."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; image x grows right, y grows down, pixel centres at +0.5."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: float
    principal: tuple
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation must be orthonormal")
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        R.setflags(write=False)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal", tuple(float(c) for c in self.principal))

    @classmethod
    def looking_down_z(cls, width, height, focal, distance=0.0):
        """Identity rotation, world origin ``distance`` in front of the camera."""
        return cls(np.eye(3), (0.0, 0.0, distance), focal, (width / 2, height / 2), width, height)

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """World points to ``(x, y, z)``: pixel coordinates and camera-frame depth."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.focal * pc[..., 0] / z + self.principal[0]
            y = self.focal * pc[..., 1] / z + self.principal[1]
        return np.stack([x, y, z], axis=-1)

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal,
            "principal": list(self.principal),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["rotation"], d["translation"], d["focal"], d["principal"], d["width"], d["height"])


@dataclass
class CorrespondenceField:
    """Image-domain chart index and (u, v) per foreground pixel.

    Arrays are ``(height, width)``. Background pixels carry ``patch=0``,
    ``u=v=0`` and, when present, ``depth=inf``. ``face`` (the winning triangle
    per pixel, -1 for background) is kept in memory only.
    """

    mask: np.ndarray
    patch: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray | None = None
    face: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @classmethod
    def empty(cls, width, height, with_depth=True):
        return cls(
            np.zeros((height, width), dtype=bool),
            np.zeros((height, width), dtype=np.int64),
            np.zeros((height, width)),
            np.zeros((height, width)),
            np.full((height, width), np.inf) if with_depth else None,
            -np.ones((height, width), dtype=np.int64),
        )

    def validate(self, n_patches=None):
        m = self.mask
        for name in ("patch", "u", "v"):
            if getattr(self, name).shape != m.shape:
                raise ValueError(f"field channel {name} has shape {getattr(self, name).shape}, expected {m.shape}")
        for name in ("u", "v"):
            vals = getattr(self, name)[m]
            if vals.size and (vals.min() < 0 or vals.max() > 1 or not np.all(np.isfinite(vals))):
                raise ValueError(f"field {name} outside [0, 1] on foreground")
            if np.any(getattr(self, name)[~m] != 0):
                raise ValueError(f"field {name} defined on background")
        p = self.patch[m]
        if p.size and (p.min() < 0 or (n_patches is not None and p.max() >= n_patches)):
            raise ValueError("field patch index out of range")
        return self

    def copy(self):
        return CorrespondenceField(
            self.mask.copy(), self.patch.copy(), self.u.copy(), self.v.copy(),
            None if self.depth is None else self.depth.copy(),
            None if self.face is None else self.face.copy(),
        )

    def equals(self, other, atol=0.0) -> bool:
        if self.mask.shape != other.mask.shape or not np.array_equal(self.mask, other.mask):
            return False
        m = self.mask
        return (
            np.array_equal(self.patch[m], other.patch[m])
            and np.allclose(self.u[m], other.u[m], atol=atol, rtol=0)
            and np.allclose(self.v[m], other.v[m], atol=atol, rtol=0)
        )


def write_drf(fp, channels: dict) -> None:
    """Write named float planes to a DRF1 container; tags must be 4 ASCII bytes."""
    if not channels:
        raise ValueError("DRF1 needs at least one channel")
    shapes = {np.shape(a) for a in channels.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError("all DRF1 channels must share one 2-D shape")
    h, w = next(iter(shapes))
    if len(channels) > 255:
        raise ValueError("too many channels for DRF1")
    fp.write(DRF_MAGIC)
    fp.write(struct.pack("<IIB", w, h, len(channels)))
    for tag in channels:
        b = tag.encode("ascii")
        if len(b) != 4:
            raise ValueError(f"DRF1 tag must be 4 ASCII bytes, got {tag!r}")
        fp.write(b)
    for plane in channels.values():
        fp.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_drf(fp) -> dict:
    head = fp.read(13)
    if len(head) < 13 or head[:4] != DRF_MAGIC:
        raise FormatError("not a DRF1 file (bad magic)")
    w, h, n = struct.unpack("<IIB", head[4:])
    tags = [fp.read(4) for _ in range(n)]
    if any(len(t) != 4 for t in tags):
        raise FormatError("truncated DRF1 tag table")
    out = {}
    size = 4 * w * h
    for t in tags:
        buf = fp.read(size)
        if len(buf) != size:
            raise FormatError(f"truncated DRF1 plane {t!r}")
        out[t.decode("ascii")] = np.frombuffer(buf, dtype="<f4").reshape(h, w).astype(np.float64)
    if fp.read(1):
        raise FormatError("trailing bytes after DRF1 planes")
    return out


def write_field(fp, field: CorrespondenceField) -> None:
    ch = {
        "MASK": field.mask.astype(np.float32),
        "PTCH": np.where(field.mask, field.patch, 0).astype(np.float32),
        "U___": np.where(field.mask, field.u, 0.0),
        "V___": np.where(field.mask, field.v, 0.0),
    }
    if field.depth is not None:
        ch["DPTH"] = np.where(field.mask, field.depth, 0.0)
    write_drf(fp, ch)


def read_field(fp) -> CorrespondenceField:
    ch = read_drf(fp)
    for tag in FIELD_TAGS[:4]:
        if tag not in ch:
            raise FormatError(f"DRF1 field missing channel {tag}")
    mask = ch["MASK"] > 0.5
    depth = None
    if "DPTH" in ch:
        depth = np.where(mask, ch["DPTH"], np.inf)
    return CorrespondenceField(
        mask,
        np.rint(ch["PTCH"]).astype(np.int64) * mask,
        np.where(mask, np.clip(ch["U___"], 0.0, 1.0), 0.0),
        np.where(mask, np.clip(ch["V___"], 0.0, 1.0), 0.0),
        depth,
    )


def write_ppm(fp, image) -> None:
    """Binary P6 from an ``(H, W, 3)`` array of floats in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM export needs an (H, W, 3) image")
    h, w, _ = img.shape
    fp.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
    fp.write(np.ascontiguousarray(img).tobytes())


def read_ppm(fp) -> np.ndarray:
    """Read a binary P6 image as uint8 ``(H, W, 3)``."""
    data = fp.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError("not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported")
    pix = data[pos + 1:]
    if len(pix) != w * h * 3:
        raise FormatError("PPM pixel data has the wrong size")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w, 3).copy()


def write_landmarks_csv(fp, names, positions, visible) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["name", "x", "y", "visible"])
    for n, (x, y), vis in zip(names, positions, visible):
        w.writerow([n, f"{x:.9g}", f"{y:.9g}", int(bool(vis))])


def read_landmarks_csv(fp):
    names, pos, vis = [], [], []
    for row in csv.DictReader(fp):
        names.append(row["name"])
        pos.append([float(row["x"]), float(row["y"])])
        vis.append(row["visible"].strip() in ("1", "true", "True"))
    return names, np.array(pos, dtype=np.float64).reshape(-1, 2), np.array(vis, dtype=bool)
