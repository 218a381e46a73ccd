import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densereg.atlas import TemplateMesh, UVAtlas
from densereg.fields import Camera
from densereg.raster import rasterize_correspondence
from densereg.supervision import (
    ClassMap,
    Landmark,
    LandmarkError,
    LandmarkSet,
    locate_in_atlas,
    project_landmarks,
    tps_apply,
    tps_correspondence,
    tps_fit,
    transfer_segmentation,
)


def sheet(z, half=1.0, patch=0, offset=0):
    """Square of two triangles facing the camera at depth ``z``."""
    sq = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    verts = np.column_stack([sq, np.full(4, z)])
    faces = np.array([[0, 1, 2], [0, 2, 3]]) + offset
    uv = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    return verts, faces, uv, [patch] * 4


def two_sheets():
    v0, f0, uv0, p0 = sheet(1.0, 1.0, 0)
    v1, f1, uv1, p1 = sheet(2.0, 1.0, 1, offset=4)
    mesh = TemplateMesh(np.vstack([v0, v1]), np.vstack([f0, f1]))
    atlas = UVAtlas(p0 + p1, np.vstack([uv0, uv1]), 2)
    return mesh, atlas


def pinhole(cam, p):
    x, y, z = p
    return cam.focal * x / z + cam.principal[0], cam.focal * y / z + cam.principal[1]


class TestLandmarks:
    def test_vertex_landmark_is_its_projection(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(32, 32, 10.0)
        lms = LandmarkSet([Landmark("a", 0, 0.0, 0.0), Landmark("b", 0, 1.0, 1.0), Landmark("c", 0, 0.5, 0.5)])
        pos, vis = project_landmarks(mesh.vertices, mesh, atlas, lms, cam)
        np.testing.assert_allclose(pos[0], pinhole(cam, mesh.vertices[0]), atol=1e-12)
        np.testing.assert_allclose(pos[1], pinhole(cam, mesh.vertices[2]), atol=1e-12)
        np.testing.assert_allclose(pos[2], pinhole(cam, [0.0, 0.0, 1.0]), atol=1e-12)
        # b sits on the far corner: the pixel holding it has its centre off the sheet
        assert vis.tolist() == [True, False, True]

    def test_occluded_by_nearer_sheet(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(32, 32, 10.0)
        lms = LandmarkSet([Landmark("front", 0, 0.5, 0.5), Landmark("back", 1, 0.5, 0.5)])
        pos, vis = project_landmarks(mesh.vertices, mesh, atlas, lms, cam)
        assert vis.tolist() == [True, False]
        np.testing.assert_allclose(pos[0], pos[1], atol=1e-12)

    def test_back_sheet_visible_once_front_is_moved(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(64, 64, 10.0)
        posed = mesh.vertices.copy()
        posed[:4, 0] += 2.5  # slide front sheet sideways
        lms = LandmarkSet([Landmark("back", 1, 0.5, 0.5)])
        _, vis = project_landmarks(posed, mesh, atlas, lms, cam)
        assert vis.tolist() == [True]

    def test_off_frame_and_behind(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(8, 8, 40.0)  # corners of the front sheet fall outside
        lms = LandmarkSet([Landmark("corner", 0, 0.0, 0.0), Landmark("centre", 0, 0.5, 0.5)])
        _, vis = project_landmarks(mesh.vertices, mesh, atlas, lms, cam)
        assert vis.tolist() == [False, True]
        behind = Camera.looking_down_z(8, 8, 40.0, distance=-5.0)
        _, vis = project_landmarks(mesh.vertices, mesh, atlas, lms, behind)
        assert not vis.any()

    def test_agrees_with_rasterized_field(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(32, 32, 10.0)
        rng = np.random.default_rng(3)
        lms = LandmarkSet([Landmark(f"p{i}", int(rng.integers(2)), *rng.uniform(0.1, 0.9, 2)) for i in range(20)])
        pos, vis = project_landmarks(mesh.vertices, mesh, atlas, lms, cam)
        fld = rasterize_correspondence(mesh.vertices, mesh, atlas, cam)
        for lm, p, ok in zip(lms, pos, vis):
            r, c = int(p[1]), int(p[0])
            assert ok == (lm.patch == fld.patch[r, c])

    def test_errors(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(8, 8, 4.0)
        with pytest.raises(LandmarkError):
            LandmarkSet([Landmark("a", 0, 0.1, 0.1), Landmark("a", 0, 0.2, 0.2)])
        with pytest.raises(LandmarkError):
            LandmarkSet([Landmark("a", 0, 1.5, 0.1)])
        with pytest.raises(LandmarkError):
            project_landmarks(mesh.vertices, mesh, atlas, LandmarkSet([Landmark("x", 5, 0.5, 0.5)]), cam)
        with pytest.raises(ValueError):
            project_landmarks(mesh.vertices[:3], mesh, atlas, LandmarkSet([]), cam)

    def test_dict_round_trip_and_locate(self):
        lms = LandmarkSet.from_uv({"a": (0.2, 0.3), "b": (0.9, 0.1)}, patch=1)
        assert LandmarkSet.from_dict(lms.to_dict()).landmarks == lms.landmarks
        assert lms.names == ["a", "b"] and lms.index("b") == 1
        mesh, atlas = two_sheets()
        fi, w = locate_in_atlas(mesh, atlas, 1, 0.25, 0.5)
        np.testing.assert_allclose(w @ atlas.uv[mesh.faces[fi]], [0.25, 0.5], atol=1e-14)
        assert locate_in_atlas(mesh, atlas, 7, 0.5, 0.5) is None


class TestSegmentation:
    def test_lookup_cells(self):
        cm = ClassMap([[1, 2], [3, 4]])
        assert cm.lookup(0, 0.1, 0.1) == 1
        assert cm.lookup(0, 0.9, 0.1) == 2
        assert cm.lookup(0, 0.1, 0.9) == 3
        assert cm.lookup(0, 1.0, 1.0) == 4
        with pytest.raises(ValueError):
            cm.lookup(1, 0.5, 0.5)
        with pytest.raises(ValueError):
            cm.lookup(0, 1.1, 0.5)
        with pytest.raises(ValueError):
            ClassMap([[0, 1]])

    def test_background_and_per_class_oracle(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(24, 24, 6.0)
        cm = ClassMap.from_function(lambda p, u, v: 1 + p * 2 + (u > 0.5), n_patches=2, resolution=64)
        fld = rasterize_correspondence(mesh.vertices, mesh, atlas, cam)
        lab = transfer_segmentation(fld, cm)
        assert np.all(lab[~fld.mask] == 0)
        assert fld.mask.any() and (~fld.mask).any()
        # oracle: rasterize each class region separately as its own sub-sheet
        for cls, (lo, hi) in ((1, (0.0, 0.5)), (2, (0.5, 1.0))):
            x0, x1 = -1 + 2 * lo, -1 + 2 * hi
            verts = np.array([[x0, -1, 1.0], [x1, -1, 1.0], [x1, 1, 1.0], [x0, 1, 1.0]])
            sub = TemplateMesh(verts, [[0, 1, 2], [0, 2, 3]])
            sub_uv = UVAtlas([0] * 4, [[lo, 0], [hi, 0], [hi, 1], [lo, 1]], 1)
            ref = rasterize_correspondence(verts, sub, sub_uv, cam).mask
            assert np.array_equal(lab == cls, ref)

    def test_empty_field(self):
        mesh, atlas = two_sheets()
        cam = Camera.looking_down_z(8, 8, 4.0, distance=-5.0)
        fld = rasterize_correspondence(mesh.vertices, mesh, atlas, cam)
        lab = transfer_segmentation(fld, ClassMap([[5]], background=-1))
        assert np.all(lab == -1)


controls = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


class TestTPS:
    def test_identity(self):
        src = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.3, 0.6]])
        w = tps_fit(src, src)
        assert np.abs(w.weights).max() < 1e-9
        np.testing.assert_allclose(w.affine, [[1, 0, 0], [0, 1, 0]], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(controls)
    def test_affine_controls_have_no_bending(self, rng):
        src = rng.uniform(-5, 5, (int(rng.integers(4, 30)), 2))
        A = rng.normal(size=(2, 2)) + 2 * np.eye(2)
        t = rng.normal(size=2)
        w = tps_fit(src, src @ A.T + t)
        assert np.abs(w.weights).max() < 1e-9
        q = rng.uniform(-5, 5, (50, 2))
        np.testing.assert_allclose(tps_apply(w, q), q @ A.T + t, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(controls)
    def test_interpolates_controls(self, rng):
        src = rng.uniform(0, 1, (int(rng.integers(3, 40)), 2))
        dst = rng.uniform(0, 1, src.shape)
        w = tps_fit(src, dst)
        assert np.abs(tps_apply(w, src) - dst).max() < 1e-9

    def test_weights_orthogonal_to_affine(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(0, 1, (12, 2))
        w = tps_fit(src, rng.uniform(0, 1, (12, 2)))
        P = np.column_stack([src, np.ones(12)])
        np.testing.assert_allclose(P.T @ w.weights, 0, atol=1e-9)

    def test_errors(self):
        with pytest.raises(np.linalg.LinAlgError):
            tps_fit([[0, 0], [1, 1]], [[0, 0], [1, 1]])
        with pytest.raises(np.linalg.LinAlgError):
            tps_fit([[0, 0], [1, 1], [2, 2], [3, 3]], np.zeros((4, 2)))
        with pytest.raises(np.linalg.LinAlgError):
            tps_fit([[0, 0], [1, 0], [0, 1], [0, 1]], np.zeros((4, 2)))
        with pytest.raises(np.linalg.LinAlgError):
            tps_fit([[0, 0], [1, 0], [0, 1]], np.zeros((2, 2)))

    def test_correspondence_field(self):
        # image landmarks are an exact scaling of the template square
        uv = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]])
        img = uv * 8 + 4
        fld = tps_correspondence(img, uv, 16, 16)
        xs = (np.arange(16) + 0.5 - 4) / 8
        inside = (xs >= 0) & (xs <= 1)
        assert np.array_equal(fld.mask, inside[:, None] & inside[None, :])
        np.testing.assert_allclose(fld.u[fld.mask], np.broadcast_to(xs[None, :], (16, 16))[fld.mask], atol=1e-9)
        fld2 = tps_correspondence(img, uv, 16, 16, template_mask=lambda u, v: u < 0.5)
        assert fld2.mask.sum() < fld.mask.sum() and np.all(fld2.u[fld2.mask] < 0.5)
