import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from densereg.atlas import (
    Axis,
    MeshError,
    TemplateMesh,
    UVAtlas,
    classical_mds,
    cylindrical_unwrap,
    dump_mesh,
    geodesic_distances,
    load_mesh,
    patch_mds_coordinates,
    patch_mds_unwrap,
    read_atlas_csv,
    tessellate,
    write_atlas_csv,
)
from densereg.codec import encode
from densereg.synth import grid_patch_template, head_template


def procrustes_residual(a, b):
    """Max point error after the best similarity map (reflections allowed) of ``a`` onto ``b``."""
    a0, b0 = a - a.mean(0), b - b.mean(0)
    u, s, vt = np.linalg.svd(a0.T @ b0)
    R = u @ vt
    scale = np.sum(s) / np.sum(a0 * a0)
    return np.max(np.linalg.norm(scale * a0 @ R - b0, axis=1))


def plane_grid(nx=7, ny=5, sx=2.0, sy=1.2):
    xs, ys = np.meshgrid(np.linspace(0, sx, nx), np.linspace(0, sy, ny))
    pts2 = np.column_stack([xs.ravel(), ys.ravel()])
    faces = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            faces += [[a, a + 1, a + nx + 1], [a, a + nx + 1, a + nx]]
    return pts2, np.array(faces)


def cylinder(n_theta=24, n_h=5, r=1.0):
    th = np.arange(n_theta) * 2 * np.pi / n_theta
    hs = np.linspace(-1, 1, n_h)
    T, Hh = np.meshgrid(th, hs)
    verts = np.column_stack([r * np.cos(T.ravel()), Hh.ravel(), r * np.sin(T.ravel())])
    faces = []
    for i in range(n_h - 1):
        for j in range(n_theta):
            a, b = i * n_theta + j, i * n_theta + (j + 1) % n_theta
            faces += [[a, b, b + n_theta], [a, b + n_theta, a + n_theta]]
    return TemplateMesh(verts, faces), T.ravel(), Hh.ravel()


class TestLoadMesh:
    def test_triangle(self):
        m = load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        assert m.n_vertices == 3 and m.faces.tolist() == [[0, 1, 2]]

    def test_out_of_range_names_line(self):
        with pytest.raises(MeshError, match="line 4"):
            load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")

    def test_quad_fan(self):
        m = load_mesh("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_slashes_and_comments(self):
        m = load_mesh("# c\nv 0 0 0\nv 1 0 0 # x\nv 0 1 0\n\nf 1/1/1 2//2 3/3\n")
        assert m.faces.tolist() == [[0, 1, 2]]

    @pytest.mark.parametrize("text", [
        "v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n",  # collinear
        "v 0 0\n",
        "vt 0 0\n",
        "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 x 3\n",
        "v 0 0 0\nv 1 0 0\nf 1 2\n",
    ])
    def test_errors(self, text):
        with pytest.raises(MeshError):
            load_mesh(text)

    def test_dump_round_trip(self):
        mesh, _, _ = head_template(12, 6)
        back = load_mesh(dump_mesh(mesh))
        assert np.array_equal(back.vertices, mesh.vertices) and np.array_equal(back.faces, mesh.faces)

    def test_immutable(self):
        m = load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 5.0


class TestCylindrical:
    def test_unit_cylinder(self):
        mesh, th, h = cylinder()
        at = cylindrical_unwrap(mesh, Axis((0, 0, 0), (0, 1, 0), (1, 0, 0)))
        # angle measured counter-clockwise about +y from +x runs through -z
        expected_u = np.mod(-th, 2 * np.pi) / (2 * np.pi)
        np.testing.assert_allclose(at.u, expected_u, atol=1e-12)
        np.testing.assert_allclose(at.v, (h + 1) / 2, atol=1e-12)
        assert at.n_patches == 1 and at.is_injective()

    def test_definition_with_flipped_axis(self):
        mesh, th, h = cylinder()
        at = cylindrical_unwrap(mesh, Axis((0, 0, 0), (0, -1, 0), (1, 0, 0)))
        np.testing.assert_allclose(at.u, th / (2 * np.pi), atol=1e-12)
        np.testing.assert_allclose(at.v, (1 - h) / 2, atol=1e-12)

    def test_on_axis_error(self):
        mesh = TemplateMesh([[0, 0.5, 0], [1, 0, 0], [0, 1, 1]], [[0, 1, 2]])
        with pytest.raises(MeshError, match="vertex 0"):
            cylindrical_unwrap(mesh, Axis((0, 0, 0), (0, 1, 0)))

    def test_zero_height_error(self):
        mesh = TemplateMesh([[1, 0, 0], [0, 0, 1], [-1, 0, 0]], [[0, 1, 2]])
        with pytest.raises(MeshError):
            cylindrical_unwrap(mesh, Axis((0, 0, 0), (0, 1, 0)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        mesh, _, _ = head_template(16, 8)
        axis = Axis((0, 0, 0), (0, 1, 0), (0, 0, 1))
        base = cylindrical_unwrap(mesh, axis)
        R = Rotation.random(random_state=seed).as_matrix()
        t = rng.normal(size=3) * 3
        moved = TemplateMesh(mesh.vertices @ R.T + t, mesh.faces)
        axis2 = Axis(tuple(R @ np.zeros(3) + t), tuple(R @ np.array([0, 1.0, 0])), tuple(R @ np.array([0, 0, 1.0])))
        np.testing.assert_allclose(cylindrical_unwrap(moved, axis2).uv, base.uv, atol=1e-9)
        # with no reference the first vertex defines the seam, also invariant
        a0 = Axis((0, 0, 0), (0, 1, 0))
        a1 = Axis(tuple(t), tuple(R @ np.array([0, 1.0, 0])))
        np.testing.assert_allclose(cylindrical_unwrap(moved, a1).uv, cylindrical_unwrap(mesh, a0).uv, atol=1e-9)


class TestMDS:
    def test_classical_mds_exact_for_euclidean(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        coords, ev = classical_mds(d)
        assert procrustes_residual(coords, pts) < 1e-10
        assert ev[0] >= ev[1] > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_flat_patch_procrustes(self, seed):
        pts2, faces = plane_grid()
        R = Rotation.random(random_state=seed).as_matrix()
        verts = np.column_stack([pts2, np.zeros(len(pts2))]) @ R.T + np.arange(3)
        mesh = TemplateMesh(verts, faces, np.zeros(len(verts), dtype=int))
        coords = patch_mds_coordinates(mesh, np.arange(len(verts)))
        assert procrustes_residual(coords, pts2) < 1e-8

    def test_flat_patch_normalized_is_affine_image(self):
        pts2, faces = plane_grid()
        mesh = TemplateMesh(np.column_stack([pts2, np.zeros(len(pts2))]), faces, np.zeros(len(pts2), dtype=int))
        at = patch_mds_unwrap(mesh)
        assert at.uv.min(0).tolist() == [0, 0] and at.uv.max(0).tolist() == [1, 1]
        # first vertex pinned to the lower-left quadrant
        assert np.all(at.uv[0] <= 0.5)
        # normalized chart = planar coordinates up to an affine map
        A = np.column_stack([pts2, np.ones(len(pts2))])
        sol, *_ = np.linalg.lstsq(A, at.uv, rcond=None)
        assert np.max(np.abs(A @ sol - at.uv)) < 1e-8

    def test_edge_metric_overestimates(self):
        pts2, faces = plane_grid()
        mesh = TemplateMesh(np.column_stack([pts2, np.zeros(len(pts2))]), faces)
        idx = np.arange(len(pts2))
        exact = geodesic_distances(mesh, idx)
        edge = geodesic_distances(mesh, idx, "edge")
        assert np.all(edge >= exact - 1e-9)
        eucl = np.linalg.norm(pts2[:, None] - pts2[None], axis=-1)
        np.testing.assert_allclose(exact, eucl, atol=1e-9)
        with pytest.raises(ValueError):
            geodesic_distances(mesh, idx, "chebyshev")

    def test_25_patches(self):
        mesh = grid_patch_template(5, 6, bend=0.3, seed=1)
        at = patch_mds_unwrap(mesh)
        assert at.n_patches == 25
        for p in range(25):
            uv = at.uv[at.patch == p]
            np.testing.assert_allclose(uv.min(0), [0, 0], atol=1e-15)
            np.testing.assert_allclose(uv.max(0), [1, 1], atol=1e-15)
        assert at.is_injective()

    def test_rigid_invariance(self):
        mesh = grid_patch_template(2, 5, bend=0.4, seed=3)
        base = patch_mds_unwrap(mesh)
        R = Rotation.random(random_state=9).as_matrix()
        moved = TemplateMesh(mesh.vertices @ R.T + [1.0, -2.0, 0.5], mesh.faces, mesh.patch_of_vertex)
        again = patch_mds_unwrap(moved)
        for p in range(base.n_patches):
            sel = base.patch == p
            assert procrustes_residual(again.uv[sel], base.uv[sel]) < 1e-8

    def test_errors(self):
        pts2, faces = plane_grid(3, 3)
        verts = np.column_stack([pts2, np.zeros(len(pts2))])
        extra = np.vstack([verts, [[5, 5, 0], [6, 5, 0]]])  # a 2-vertex chart
        labels = np.r_[np.zeros(len(verts), dtype=int), 1, 1]
        with pytest.raises(MeshError, match="patch 1 has 2 vertices"):
            patch_mds_unwrap(TemplateMesh(extra, faces), labels)
        # a chart vertex touching none of the chart's faces
        labels = np.zeros(len(verts), dtype=int)
        labels[4] = 1  # the centre; corners 0 and 8 then sit in no chart-0 face
        with pytest.raises(MeshError, match="patch 0 has vertices not covered"):
            patch_mds_unwrap(TemplateMesh(verts, faces), labels)
        # two disjoint triangles in one chart
        m = TemplateMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 0], [6, 5, 0], [5, 6, 0]], [[0, 1, 2], [3, 4, 5]])
        with pytest.raises(MeshError, match="not connected"):
            patch_mds_unwrap(m, np.zeros(6, dtype=int))
        with pytest.raises(MeshError):
            patch_mds_unwrap(TemplateMesh(verts, faces))  # no labels


class TestTessellate:
    def test_examples(self):
        at = UVAtlas([0, 0, 0], [[0.3, 0.7], [1.0, 1.0], [0.0, 0.0]])
        t = tessellate(at, 2)
        assert (t.qh[0], t.qv[0]) == (0, 1)
        assert tessellate(at, 10).qh[1] == 9
        t1 = tessellate(at, 1)
        assert not t1.qh.any() and not t1.qv.any()
        with pytest.raises(ValueError):
            tessellate(at, 0)

    @given(st.integers(1, 50))
    def test_agrees_with_encode(self, K):
        _, at, _ = head_template(20, 10)
        t = tessellate(at, K)
        assert np.array_equal(t.qh, encode(at.u, K)[0]) and np.array_equal(t.qv, encode(at.v, K)[0])


class TestAtlasIO:
    def test_csv_round_trip(self):
        _, at, _ = head_template(12, 6)
        buf = io.StringIO()
        write_atlas_csv(at, buf)
        text = buf.getvalue()
        assert text.startswith("vertex,patch,u,v\n")
        assert len(text.splitlines()) == len(at.uv) + 1
        back = read_atlas_csv(io.StringIO(text))
        np.testing.assert_allclose(back.uv, at.uv, atol=5e-9)
        assert np.array_equal(back.patch, at.patch)

    def test_atlas_validation(self):
        with pytest.raises(MeshError):
            UVAtlas([0], [[1.5, 0.0]])
        with pytest.raises(MeshError):
            UVAtlas([0, 1], [[0, 0]])

    def test_injectivity_detects_duplicates(self):
        assert not UVAtlas([0, 0], [[0.2, 0.2], [0.2, 0.2]]).is_injective()
        assert UVAtlas([0, 1], [[0.2, 0.2], [0.2, 0.2]]).is_injective()
