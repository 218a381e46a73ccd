import numpy as np
import pytest

from densereg.atlas import cylindrical_unwrap
from densereg.fields import Camera
from densereg.raster import rasterize_correspondence
from densereg.supervision import project_landmarks
from densereg.synth import (
    Pose,
    SynthError,
    SynthParams,
    grid_patch_template,
    head_landmarks,
    head_template,
    pose_vertices,
    read_dataset,
    synth_dataset,
    texture_rgb,
    write_dataset,
)

SMALL = SynthParams(size=24, focal=40.0)


def test_head_unwrap_recovers_construction():
    mesh, atlas, axis = head_template()
    assert atlas.is_injective()
    assert atlas.u.min() > 0.0 and atlas.u.max() < 1.0
    np.testing.assert_allclose(cylindrical_unwrap(mesh, axis).uv, atlas.uv, atol=0)
    # v runs from the crown (row 0 of the image, world -y up) to the chin
    top = mesh.vertices[:, 1].argmin()
    assert atlas.v[top] == pytest.approx(0.0, abs=1e-12)


def test_seeded_determinism():
    a = synth_dataset(3, 4, SMALL)
    b = synth_dataset(3, 4, SMALL)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.field.equals(y.field) and x.pose == y.pose
        assert np.array_equal(x.landmarks, y.landmarks) and np.array_equal(x.visible, y.visible)
    c = synth_dataset(4, 4, SMALL)
    assert not np.array_equal(a[0].image, c[0].image)


def test_zero_width_ranges_fix_the_pose():
    p = SynthParams(size=24, focal=40.0, yaw=(10.0, 10.0), pitch=(0.0, 0.0), roll=(5.0, 5.0), scale=(1.0, 1.0),
                    tx=(0.0, 0.0), ty=(0.1, 0.1), tz=(4.5, 4.5), noise=0.0)
    poses = {s.pose for s in synth_dataset(0, 3, p)}
    assert poses == {Pose(10.0, 0.0, 5.0, 1.0, 0.0, 0.1, 4.5)}


def test_sample_matches_independent_rerender():
    mesh, atlas, _ = head_template()
    lms = head_landmarks()
    p = SynthParams(size=32, focal=55.0, noise=0.0)
    cam = Camera.looking_down_z(32, 32, 55.0)
    for s in synth_dataset(1, 3, p):
        posed = pose_vertices(mesh.vertices, s.pose)
        fld = rasterize_correspondence(posed, mesh, atlas, cam)
        assert s.field.equals(fld)
        pos, vis = project_landmarks(posed, mesh, atlas, lms, cam)
        assert np.array_equal(s.landmarks, pos) and np.array_equal(s.visible, vis)
        # noise-free foreground pixels carry the texture at their (u, v)
        m = fld.mask
        tex = np.clip(np.rint(texture_rgb(fld.patch[m], fld.u[m], fld.v[m]) * 255), 0, 255)
        assert np.array_equal(s.image[m], tex.astype(np.uint8))


def test_pose_rotation_is_rigid():
    pose = Pose(20.0, -10.0, 7.0, 1.3, 0.2, -0.1, 4.0)
    R = pose.rotation()
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
    v = np.random.default_rng(0).normal(size=(10, 3))
    out = pose_vertices(v, pose)
    d0 = np.linalg.norm(v[:, None] - v[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d1, 1.3 * d0, atol=1e-12)


def test_dataset_directory_round_trip(tmp_path):
    samples = synth_dataset(2, 3, SMALL)
    names = write_dataset(tmp_path, samples, head_landmarks().names)
    assert len(names) == 12 and all((tmp_path / n).exists() for n in names)
    back = read_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.field.mask, b.field.mask)
        np.testing.assert_allclose(b.field.u, a.field.u.astype(np.float32), atol=0)
        assert b.pose == a.pose and np.array_equal(a.visible, b.visible)
        assert b.extra["landmark_names"] == head_landmarks().names
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "empty")


def test_grid_template_charts():
    mesh = grid_patch_template()
    assert mesh.n_patches == 25
    lab = mesh.patch_of_vertex
    assert np.all(lab[mesh.faces] == lab[mesh.faces[:, :1]])


def test_validation_and_exhaustion():
    with pytest.raises(ValueError):
        SynthParams(yaw=(5.0, -5.0)).validate()
    with pytest.raises(ValueError):
        SynthParams(size=2).validate()
    with pytest.raises(ValueError):
        synth_dataset(0, 0, SMALL)
    off = SynthParams(size=16, focal=20.0, tx=(50.0, 50.0))
    with pytest.raises(SynthError):
        synth_dataset(0, 1, off, max_attempts=3)
    assert SynthParams.from_dict(SMALL.to_dict()) == SMALL
