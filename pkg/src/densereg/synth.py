"""Procedural templates and seeded synthetic correspondence datasets."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .atlas import Axis, TemplateMesh, UVAtlas, cylindrical_unwrap
from .fields import (
    Camera,
    CorrespondenceField,
    read_field,
    read_landmarks_csv,
    read_ppm,
    write_field,
    write_landmarks_csv,
    write_ppm,
)
from .raster import rasterize_correspondence
from .supervision import LandmarkSet, project_landmarks

__all__ = [
    "head_template",
    "head_landmarks",
    "grid_patch_template",
    "Pose",
    "SynthParams",
    "Sample",
    "SynthError",
    "pose_vertices",
    "texture_rgb",
    "render_sample",
    "synth_dataset",
    "write_dataset",
    "read_dataset",
    "sample_stem",
]

HEAD_THETA = (0.08 * 2 * math.pi, 0.92 * 2 * math.pi)


class SynthError(RuntimeError):
    pass


def _grid_faces(n_rows, n_cols, offset=0):
    faces = []
    for i in range(n_rows - 1):
        for j in range(n_cols - 1):
            a = offset + i * n_cols + j
            b, c, d = a + 1, a + n_cols, a + n_cols + 1
            faces += [[a, c, d], [a, d, b]]
    return faces


def head_template(n_theta=40, n_height=24):
    """Closed-ish head surface around the y axis, open at the back.

    Built as a radial displacement of a cylinder (with a nose bump) so that
    cylindrical unwrapping recovers the construction parameters exactly:
    ``u = theta / 2pi`` and ``v = (1 + y) / 2``. Returns ``(mesh, atlas, axis)``.
    The face looks toward ``-z`` and world ``-y`` is up, so ``v`` grows from
    the crown (0) to the chin (1) like image rows.
    """
    theta = np.linspace(*HEAD_THETA, n_theta)
    h = np.linspace(-1.0, 1.0, n_height)
    tt, hh = np.meshgrid(theta, h)
    # radius: ellipsoid-like profile, nose and brow bumps on the front (theta = pi)
    r = 0.85 * np.sqrt(np.maximum(1.0 - 0.55 * hh**2, 0.05))
    r = r + 0.28 * np.exp(-(((tt - math.pi) / 0.22) ** 2) - ((hh - 0.0) / 0.28) ** 2)
    r = r + 0.06 * np.exp(-(((tt - math.pi) / 0.7) ** 2) - ((hh - 0.45) / 0.12) ** 2)
    # angle measured about +y from +z, via x = sin, z = cos
    x = r * np.sin(tt)
    z = r * np.cos(tt)
    y = hh
    # world y is flipped so the head is upright in image coordinates
    verts = np.column_stack([x.ravel(), -y.ravel(), z.ravel()])
    mesh = TemplateMesh(verts, _grid_faces(n_height, n_theta))
    axis = Axis((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    atlas = cylindrical_unwrap(mesh, axis)
    return mesh, atlas, axis


def head_landmarks():
    """Named facial points in chart coordinates of :func:`head_template`."""
    def uv(theta, h):
        return theta / (2 * math.pi), (1.0 - h) / 2.0

    pi = math.pi
    pts = {
        "right_eye": uv(pi - 0.38, 0.3),
        "left_eye": uv(pi + 0.38, 0.3),
        "nose_tip": uv(pi, 0.0),
        "mouth_right": uv(pi - 0.3, -0.45),
        "mouth_left": uv(pi + 0.3, -0.45),
        "chin": uv(pi, -0.8),
        "right_ear": uv(pi / 2, 0.1),
        "left_ear": uv(3 * pi / 2, 0.1),
    }
    return LandmarkSet.from_uv(pts)


def grid_patch_template(n_patches_side=5, n=6, bend=0.3, seed=0):
    """Body-like template: ``n_patches_side**2`` gently curved charts.

    Charts are separate grids (seam vertices duplicated) laid out on a bumpy
    sheet, so every face lies inside a single chart.
    """
    rng = np.random.default_rng(seed)
    verts, faces, labels = [], [], []
    for p in range(n_patches_side**2):
        pi_, pj = divmod(p, n_patches_side)
        s = np.linspace(0, 1, n)
        xx, yy = np.meshgrid(pj + s * 0.9, pi_ + s * 0.9)
        amp = bend * rng.uniform(0.5, 1.0)
        zz = amp * np.sin(0.8 * xx) * np.cos(0.6 * yy)
        off = len(verts)
        verts.extend(np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()]).tolist())
        faces.extend(_grid_faces(n, n, off))
        labels.extend([p] * (n * n))
    return TemplateMesh(verts, faces, labels)


@dataclass(frozen=True)
class Pose:
    """Rigid pose with uniform scale: ``x' = scale * R x + t``; angles in degrees."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 4.5

    def rotation(self):
        return Rotation.from_euler("yxz", [self.yaw, self.pitch, self.roll], degrees=True).as_matrix()


def pose_vertices(vertices, pose: Pose):
    return pose.scale * (np.asarray(vertices) @ pose.rotation().T) + np.array([pose.tx, pose.ty, pose.tz])


@dataclass(frozen=True)
class SynthParams:
    """Pose ranges (inclusive ``[lo, hi]``), image size and noise levels."""

    size: int = 64
    focal: float = 110.0
    yaw: tuple = (-35.0, 35.0)
    pitch: tuple = (-15.0, 15.0)
    roll: tuple = (-15.0, 15.0)
    scale: tuple = (0.85, 1.1)
    tx: tuple = (-0.25, 0.25)
    ty: tuple = (-0.25, 0.25)
    tz: tuple = (4.5, 4.5)
    noise: float = 0.03
    min_foreground: float = 0.05

    def validate(self):
        if self.size < 4 or self.focal <= 0:
            raise ValueError("image size and focal length must be positive")
        for name in ("yaw", "pitch", "roll", "scale", "tx", "ty", "tz"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"empty range for {name}: {lo} > {hi}")
        if self.scale[0] <= 0:
            raise ValueError("scale must be positive")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    field: CorrespondenceField
    landmarks: np.ndarray  # (L, 2) pixel positions
    visible: np.ndarray  # (L,) bool
    pose: Pose
    extra: dict = field(default_factory=dict)

    def image_float(self):
        return self.image.astype(np.float64) / 255.0


def texture_rgb(patch, u, v):
    """Smooth colour of chart point ``(patch, u, v)``; values in [0, 1].

    Colour is a nonlinear, many-to-one function of the coordinates: red and
    green oscillate with ``u`` and ``v`` respectively, blue carries a slow
    mixed gradient, so local appearance alone pins a coordinate only up to
    its oscillation period.
    """
    patch = np.asarray(patch, dtype=np.float64)
    ph = 0.7 * patch
    r = 0.5 + 0.4 * np.sin(2 * math.pi * 3.0 * u + ph)
    g = 0.5 + 0.4 * np.sin(2 * math.pi * 3.0 * v + 1.3 + ph)
    b = 0.25 + 0.5 * (0.6 * u + 0.4 * v)
    return np.stack([r, g, b], axis=-1)


def _background(rng, size):
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        a, b, ph = rng.uniform(-1.5, 1.5, 3)
        img[..., c] = 0.35 + 0.25 * np.sin(2 * math.pi * (a * xs + b * ys) + 2 * math.pi * ph)
    return img


def render_sample(mesh, atlas, landmarks, pose: Pose, params: SynthParams, camera=None):
    """Rasterize the template at ``pose``; returns ``(field, positions, visible)``."""
    cam = camera or Camera.looking_down_z(params.size, params.size, params.focal)
    posed = pose_vertices(mesh.vertices, pose)
    fld = rasterize_correspondence(posed, mesh, atlas, cam)
    pos, vis = project_landmarks(posed, mesh, atlas, landmarks, cam, fld) if landmarks is not None else (None, None)
    return fld, pos, vis


def _draw(rng, rng_range):
    lo, hi = rng_range
    u = rng.random()
    return float(lo + (hi - lo) * u)


def synth_dataset(seed, count, params: SynthParams | None = None, template=None, landmarks=None,
                  texture=texture_rgb, max_attempts=100):
    """Generate ``count`` seeded samples of a posed, textured template.

    Equal ``(seed, count, params)`` give bit-identical samples. A pose whose
    rendering covers less than ``params.min_foreground`` of the frame is
    redrawn; after ``max_attempts`` failed draws a :class:`SynthError` is
    raised.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    params = (params or SynthParams()).validate()
    if template is None:
        mesh, atlas, _ = head_template()
        if landmarks is None:
            landmarks = head_landmarks()
    else:
        mesh, atlas = template
    rng = np.random.default_rng(seed)
    size = params.size
    samples = []
    for i in range(count):
        for _attempt in range(max_attempts):
            pose = Pose(*(_draw(rng, getattr(params, k)) for k in ("yaw", "pitch", "roll", "scale", "tx", "ty", "tz")))
            fld, pos, vis = render_sample(mesh, atlas, landmarks, pose, params)
            if fld.mask.mean() >= params.min_foreground:
                break
        else:
            raise SynthError(f"sample {i}: no on-screen pose after {max_attempts} attempts")
        img = _background(rng, size)
        m = fld.mask
        img[m] = texture(fld.patch[m], fld.u[m], fld.v[m])
        img = img + params.noise * rng.standard_normal(img.shape)
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        if pos is None:
            pos, vis = np.zeros((0, 2)), np.zeros(0, dtype=bool)
        samples.append(Sample(img, fld, pos, vis, pose))
    return samples


def sample_stem(i):
    return f"sample_{i:05d}"


def write_dataset(directory, samples, landmark_names=()):
    """Write samples as ``sample_NNNNN.{ppm,drf}`` plus landmark CSV and pose JSON.

    Returns the list of written file names (relative to ``directory``).
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    for i, s in enumerate(samples):
        stem = os.path.join(directory, sample_stem(i))
        with open(stem + ".ppm", "wb") as fp:
            write_ppm(fp, s.image)
        with open(stem + ".drf", "wb") as fp:
            write_field(fp, s.field)
        names = list(landmark_names) or [f"lm{j}" for j in range(len(s.landmarks))]
        with open(stem + "_landmarks.csv", "w", newline="") as fp:
            write_landmarks_csv(fp, names, s.landmarks, s.visible)
        with open(stem + "_pose.json", "w") as fp:
            json.dump(asdict(s.pose), fp, sort_keys=True, indent=1)
            fp.write("\n")
        base = sample_stem(i)
        written += [base + ".ppm", base + ".drf", base + "_landmarks.csv", base + "_pose.json"]
    return written


def read_dataset(directory):
    """Load every ``sample_NNNNN`` in ``directory`` (sorted) back into :class:`Sample` objects."""
    stems = sorted(f[:-4] for f in os.listdir(directory) if f.startswith("sample_") and f.endswith(".ppm"))
    if not stems:
        raise FileNotFoundError(f"no samples in {directory}")
    out = []
    for stem in stems:
        base = os.path.join(directory, stem)
        with open(base + ".ppm", "rb") as fp:
            img = read_ppm(fp)
        with open(base + ".drf", "rb") as fp:
            fld = read_field(fp)
        pos, vis = np.zeros((0, 2)), np.zeros(0, dtype=bool)
        extra = {}
        if os.path.exists(base + "_landmarks.csv"):
            with open(base + "_landmarks.csv", newline="") as fp:
                names, pos, vis = read_landmarks_csv(fp)
            extra["landmark_names"] = names
        pose = Pose()
        if os.path.exists(base + "_pose.json"):
            with open(base + "_pose.json") as fp:
                pose = Pose(**json.load(fp))
        out.append(Sample(img, fld, pos, vis, pose, extra))
    return out
