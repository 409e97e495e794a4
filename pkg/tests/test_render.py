import numpy as np
import pytest

from patchpose.geom import CameraIntrinsics, RigidTransform
from patchpose.render import (
    FramingError,
    MeshError,
    TriMesh,
    box_mesh,
    load_mesh,
    mesh_diameter,
    raycast_depth,
    render_templates,
    sample_surface,
    save_mesh_ply,
    uv_sphere_mesh,
)

K = CameraIntrinsics(600.0, 600.0, 160.0, 120.0, 320, 240)

CUBE_OBJ = """# unit cube
v -0.5 -0.5 -0.5
v  0.5 -0.5 -0.5
v  0.5  0.5 -0.5
v -0.5  0.5 -0.5
v -0.5 -0.5  0.5
v  0.5 -0.5  0.5
v  0.5  0.5  0.5
v -0.5  0.5  0.5
f 1 2 3
f 1 3 4
f 5 7 6
f 5 8 7
f 1 6 2
f 1 5 6
f 4 3 7
f 4 7 8
f 1 4 8
f 1 8 5
f 2 6 7
f 2 7 3
"""


# ---------------------------------------------------------------------------
# loading


def test_load_obj_cube(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    mesh = load_mesh(p)
    assert len(mesh.vertices) == 8
    assert len(mesh.faces) == 12


def test_load_obj_mm_scale(tmp_path):
    p = tmp_path / "cube.obj"
    # 100 mm cube written in millimeters
    p.write_text(CUBE_OBJ.replace("0.5", "50.0"))
    mesh = load_mesh(p, scale=0.001)
    assert mesh_diameter(mesh) == pytest.approx(np.sqrt(3) * 0.1, rel=1e-9)


def test_load_obj_malformed_face_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n")
    with pytest.raises(MeshError, match="line 4"):
        load_mesh(p)


def test_load_obj_rejects_quads(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError, match="triangular"):
        load_mesh(p)


def test_load_empty_mesh_rejected(tmp_path):
    p = tmp_path / "empty.obj"
    p.write_text("# nothing\n")
    with pytest.raises(MeshError):
        load_mesh(p)


def test_ply_round_trip(tmp_path):
    mesh = box_mesh(0.1, 0.2, 0.3)
    p = tmp_path / "box.ply"
    save_mesh_ply(mesh, p, scale=1000.0)
    back = load_mesh(p, scale=0.001)
    assert len(back.vertices) == len(mesh.vertices)
    assert len(back.faces) == len(mesh.faces)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-7)
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_ply_bad_header(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("plyx\nformat ascii 1.0\nend_header\n")
    with pytest.raises(MeshError, match="line 1"):
        load_mesh(p)


def test_mesh_validation():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))  # index out of range
    with pytest.raises(MeshError):
        TriMesh(np.array([[np.nan, 0, 0]]), np.array([[0, 0, 0]]))


# ---------------------------------------------------------------------------
# diameter


def test_diameter_cube():
    assert mesh_diameter(box_mesh(1, 1, 1)) == pytest.approx(np.sqrt(3))


def test_diameter_two_points():
    mesh = TriMesh(np.array([[0.0, 0, 0], [2.0, 0, 0]]), np.array([[0, 1, 0]]))
    assert mesh_diameter(mesh) == pytest.approx(2.0)


def test_diameter_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 3))
    mesh = TriMesh(pts, np.array([[0, 1, 2]]))
    brute = 0.0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            brute = max(brute, float(np.linalg.norm(pts[i] - pts[j])))
    assert mesh_diameter(mesh) == pytest.approx(brute, rel=1e-12)


def test_diameter_hull_path_matches_brute_force():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(6000, 3))  # above the brute-force limit
    mesh = TriMesh(pts, np.array([[0, 1, 2]]))
    d2 = np.sum((pts[:, None, :4000] if False else pts[:, None, :] - pts[None]) ** 2, axis=-1)
    assert mesh_diameter(mesh) == pytest.approx(np.sqrt(d2.max()), rel=1e-12)


# ---------------------------------------------------------------------------
# ray casting


def test_raycast_centered_plane():
    verts = np.array([[-0.5, -0.5, 1.0], [0.5, -0.5, 1.0], [0.5, 0.5, 1.0], [-0.5, 0.5, 1.0]])
    mesh = TriMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))
    r = raycast_depth(mesh, RigidTransform.identity(), K)
    assert r.depth.data[int(K.cy), int(K.cx)] == pytest.approx(1.0, abs=1e-9)
    # the whole covered area has depth exactly 1
    assert np.allclose(r.depth.data[r.mask], 1.0, atol=1e-9)


def test_raycast_sphere_min_depth():
    mesh = uv_sphere_mesh(0.1, 48, 64)
    pose = RigidTransform(np.eye(3), [0.0, 0.0, 0.5])
    r = raycast_depth(mesh, pose, K)
    assert r.depth.data[r.mask].min() == pytest.approx(0.4, rel=0.02)


def test_raycast_object_behind_camera():
    mesh = uv_sphere_mesh(0.1)
    pose = RigidTransform(np.eye(3), [0.0, 0.0, -0.5])
    r = raycast_depth(mesh, pose, K)
    assert not r.mask.any()


def test_raycast_depth_matches_backprojection():
    # lifted pixels must land on the analytic sphere surface
    from patchpose.geom import backproject

    mesh = uv_sphere_mesh(0.1, 64, 96)
    center = np.array([0.02, -0.01, 0.6])
    r = raycast_depth(mesh, RigidTransform(np.eye(3), center), K)
    ys, xs = np.nonzero(r.mask)
    pts = backproject(xs, ys, r.depth.data[ys, xs], K)
    radii = np.linalg.norm(pts - center, axis=1)
    assert np.all(np.abs(radii - 0.1) < 0.1 * 0.02)


def test_raycast_deterministic():
    mesh = uv_sphere_mesh(0.1, 16, 24)
    pose = RigidTransform(np.eye(3), [0.01, 0.0, 0.5])
    a = raycast_depth(mesh, pose, K)
    b = raycast_depth(mesh, pose, K)
    assert np.array_equal(a.depth.data, b.depth.data)
    assert np.array_equal(a.mask, b.mask)


# ---------------------------------------------------------------------------
# template rendering


SMALL_KR = CameraIntrinsics(105.0, 105.0, 35.0, 35.0, 70, 70)


def test_render_templates_count_and_framing():
    mesh = uv_sphere_mesh(0.05, 24, 32)
    temps = render_templates(mesh, 45.0, 60.0, 56.0, SMALL_KR)
    assert len(temps) == 120
    for t in temps:
        m = t.mask
        assert m.any()
        assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def test_render_templates_sphere_mask_area_stable():
    mesh = uv_sphere_mesh(0.05, 48, 64)
    temps = render_templates(mesh, 45.0, 120.0, 56.0, SMALL_KR)
    counts = np.array([t.mask.sum() for t in temps])
    assert counts.max() - counts.min() <= 0.01 * counts.mean() + 1


def test_render_templates_framing_error_when_too_close():
    mesh = uv_sphere_mesh(0.05, 16, 24)
    with pytest.raises(FramingError):
        render_templates(mesh, 45.0, 120.0, 200.0, SMALL_KR)


# ---------------------------------------------------------------------------
# surface sampling


def test_sample_surface_on_sphere():
    mesh = uv_sphere_mesh(0.1, 48, 64)
    pts = sample_surface(mesh, 2000, seed=0)
    radii = np.linalg.norm(pts, axis=1)
    assert np.all(radii <= 0.1 + 1e-12)
    assert radii.min() > 0.1 * 0.99  # within tessellation error of the surface
    # deterministic
    np.testing.assert_array_equal(pts, sample_surface(mesh, 2000, seed=0))


def test_sample_surface_area_weighted():
    # areas 0.5 and 9: the larger triangle should draw 9/9.5 of the samples
    verts = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 10, 0], [13, 10, 0], [10, 16, 0]],
        dtype=float,
    )
    mesh = TriMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_surface(mesh, 4000, seed=1)
    frac_big = np.mean(pts[:, 0] > 5)
    assert frac_big == pytest.approx(9 / 9.5, abs=0.02)
