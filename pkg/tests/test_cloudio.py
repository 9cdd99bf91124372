import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorloc.cloudio import (CloudParseError, PointCloud, RigidTransform, apply_transform, compose,
                              estimate_normals, invert, load_cloud, rotation_error, save_cloud,
                              translation_error)
from conftest import plane_cloud, random_transform


# ---------------------------------------------------------------- types


def test_cloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_cloud_rejects_non_unit_normals():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))


def test_cloud_rejects_normal_count_mismatch():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.array([[0.0, 0.0, 1.0]]))


def test_cloud_arrays_are_read_only():
    c = PointCloud(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_transform_rejects_reflection():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


# ---------------------------------------------------------------- transforms


def test_identity_transform_is_exact():
    c = plane_cloud(50)
    out = apply_transform(c, RigidTransform.identity())
    assert np.array_equal(out.points, c.points)


def test_pure_translation():
    T = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    out = apply_transform(PointCloud(np.zeros((1, 3))), T)
    assert np.array_equal(out.points, [[1.0, 0.0, 0.0]])


def test_apply_transform_rotates_normals_only():
    c = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([[0.0, 0.0, 1.0]]))
    T = RigidTransform.from_rotvec([math.pi / 2, 0, 0], [5.0, 5.0, 5.0])
    out = apply_transform(c, T)
    assert np.allclose(out.normals, [[0.0, -1.0, 0.0]], atol=1e-12)
    # input untouched
    assert np.array_equal(c.points, [[1.0, 2.0, 3.0]])


def test_compose_equals_sequential(rng):
    pts = rng.normal(size=(100, 3))
    for _ in range(50):
        T1, T2 = random_transform(rng), random_transform(rng)
        once = compose(T2, T1).apply(pts)
        twice = T2.apply(T1.apply(pts))
        assert np.max(np.abs(once - twice)) < 1e-9


def test_invert_identity():
    I = invert(RigidTransform.identity())
    assert np.allclose(I.matrix(), np.eye(4), atol=0)


def test_compose_with_inverse_is_identity(rng):
    for _ in range(100):
        T = random_transform(rng)
        assert np.max(np.abs(compose(T, invert(T)).matrix() - np.eye(4))) < 1e-9
        p = rng.normal(size=(1, 3))
        assert np.max(np.abs(invert(T).apply(T.apply(p)) - p)) < 1e-9


def test_compose_translations_sum():
    a = RigidTransform(np.eye(3), [1.0, 2.0, 3.0])
    b = RigidTransform(np.eye(3), [-0.5, 4.0, 0.25])
    assert np.allclose(compose(a, b).translation, [0.5, 6.0, 3.25], atol=0)


def test_isometry(rng):
    p = rng.normal(size=(200, 3))
    for _ in range(20):
        q = random_transform(rng).apply(p)
        i, j = rng.integers(0, 200, (2, 100))
        d0 = np.linalg.norm(p[i] - p[j], axis=1)
        d1 = np.linalg.norm(q[i] - q[j], axis=1)
        assert np.max(np.abs(d0 - d1)) < 1e-9


def test_exp_log_round_trip(rng):
    for _ in range(100):
        xi = np.concatenate([rng.normal(size=3) * 0.8, rng.normal(size=3)])
        back = RigidTransform.exp(xi).log()
        assert np.allclose(back, xi, atol=1e-9)


def test_quaternion_round_trip(rng):
    T = random_transform(rng)
    q = T.quaternion()
    assert q[3] >= 0 and abs(np.linalg.norm(q) - 1) < 1e-12
    back = RigidTransform.from_quaternion(q, T.translation)
    assert rotation_error(back, T) < 1e-9 and translation_error(back, T) == 0


def test_compose_keeps_rotation_valid(rng):
    T = RigidTransform.identity()
    step = random_transform(rng, max_angle=0.1, max_shift=0.1)
    for _ in range(2000):
        T = compose(step, T)
    R = T.rotation
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9


# ---------------------------------------------------------------- I/O


def test_ply_zero_vertices(tmp_path):
    path = tmp_path / "empty.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\n"
                    "property float y\nproperty float z\nend_header\n")
    assert len(load_cloud(path)) == 0


def test_pcd_fixture(tmp_path):
    path = tmp_path / "three.pcd"
    path.write_text("# .PCD v0.7\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n"
                    "WIDTH 3\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS 3\nDATA ascii\n"
                    "0 0 0\n1 0 0\n0 1 0\n")
    c = load_cloud(path)
    assert np.array_equal(c.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert not c.has_normals


def test_ply_with_extra_properties_and_elements(tmp_path):
    path = tmp_path / "extra.ply"
    path.write_text("ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n"
                    "property float intensity\nproperty float x\nproperty float y\nproperty float z\n"
                    "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
                    "7 1 2 3\n8 4 5 6\n3 0 1 1\n")
    c = load_cloud(path)
    assert np.array_equal(c.points, [[1, 2, 3], [4, 5, 6]])


@pytest.mark.parametrize("fmt", ["ply", "pcd"])
def test_round_trip(tmp_path, rng, fmt):
    pts = rng.uniform(-100, 100, (500, 3))
    n = rng.normal(size=(500, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    c = PointCloud(pts, n)
    path = tmp_path / f"c.{fmt}"
    save_cloud(c, path)
    back = load_cloud(path)
    assert np.max(np.abs(back.points - pts)) < 1e-6
    assert np.max(np.abs(back.normals - n)) < 1e-6


@pytest.mark.parametrize("fmt", ["ply", "pcd"])
def test_empty_cloud_writes_header_only(tmp_path, fmt):
    path = tmp_path / f"e.{fmt}"
    save_cloud(PointCloud.empty(), path)
    text = path.read_text()
    assert text.strip().endswith(("end_header", "DATA ascii"))
    assert len(load_cloud(path)) == 0


def test_single_point_with_normal_record(tmp_path):
    path = tmp_path / "one.ply"
    save_cloud(PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([[0.0, 0.0, 1.0]])), path)
    lines = path.read_text().splitlines()
    assert "property double nx" in lines
    assert lines[-1].split() == ["1", "2", "3", "0", "0", "1"]


def test_nonfinite_coordinate_names_line(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                    "property float z\nend_header\n0 0 0\n1 nan 2\n")
    with pytest.raises(CloudParseError) as err:
        load_cloud(path)
    assert err.value.line == 9


def test_malformed_header(tmp_path):
    path = tmp_path / "bad.pcd"
    path.write_text("VERSION 0.7\nFIELDS a b c\nPOINTS 1\nDATA ascii\n1 2 3\n")
    with pytest.raises(CloudParseError):
        load_cloud(path)


def test_binary_rejected(tmp_path):
    path = tmp_path / "bin.ply"
    path.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(CloudParseError):
        load_cloud(path)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_cloud(PointCloud.empty(), tmp_path / "missing" / "x.ply")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e4, 1e4, allow_nan=False)] * 3), min_size=0, max_size=40))
def test_round_trip_property(tmp_path_factory, rows):
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    path = tmp_path_factory.mktemp("rt") / "c.pcd"
    save_cloud(PointCloud(pts), path)
    back = load_cloud(path)
    assert back.points.shape == pts.shape
    assert np.all(np.abs(back.points - pts) <= 1e-6 * np.maximum(1.0, np.abs(pts)))


# ---------------------------------------------------------------- normals


def test_normals_plane_z():
    c = estimate_normals(plane_cloud(300), k=10, viewpoint=(0, 0, 10))
    assert np.max(np.abs(c.normals - [0, 0, 1])) < 1e-6


def test_normals_plane_x(rng):
    yz = rng.uniform(0, 1, (300, 2))
    c = PointCloud(np.column_stack([np.zeros(300), yz]))
    out = estimate_normals(c, k=10, viewpoint=(10, 0, 0))
    assert np.max(np.abs(out.normals - [1, 0, 0])) < 1e-6


def test_normals_noisy_plane(rng):
    # 200 points keeps the neighbour spacing well above sigma
    c = plane_cloud(200, rng=rng, noise=0.01)
    out = estimate_normals(c, k=15, viewpoint=(0.5, 0.5, 10))
    ang = np.degrees(np.arccos(np.clip(out.normals[:, 2], -1, 1)))
    assert ang.mean() < 5.0


def test_normals_match_brute_force_pca(rng):
    pts = rng.normal(size=(150, 3)) * [1.0, 0.6, 0.2]
    out = estimate_normals(PointCloud(pts), k=12, viewpoint=(0, 0, 50))
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    for i in range(len(pts)):
        nb = pts[np.argsort(d2[i], kind="stable")[:12]]
        w, v = np.linalg.eigh(np.cov((nb - nb.mean(0)).T, bias=True))
        n = v[:, 0]
        assert abs(abs(n @ out.normals[i]) - 1) < 1e-9


def test_normals_rigid_invariance(rng):
    c = plane_cloud(300, rng=rng)
    T = random_transform(rng)
    a = estimate_normals(c, k=10, viewpoint=(0.5, 0.5, 10))
    b = estimate_normals(apply_transform(c, T), k=10, viewpoint=T.apply(np.array([[0.5, 0.5, 10]]))[0])
    rotated = a.normals @ T.rotation.T
    cos = np.clip(np.einsum("ij,ij->i", rotated, b.normals), -1, 1)
    assert np.degrees(np.arccos(cos)).max() < 1e-6


def test_normals_degenerate_flag():
    # every neighbourhood is the same point repeated: all eigenvalues zero
    c = PointCloud(np.tile([[1.0, 1.0, 1.0]], (12, 1)))
    out, degenerate = estimate_normals(c, k=5, return_degenerate=True)
    assert degenerate.all()
    assert np.array_equal(out.normals, np.tile([0.0, 0.0, 1.0], (12, 1)))


def test_normals_unit_norm(rng):
    c = PointCloud(rng.normal(size=(300, 3)))
    out = estimate_normals(c, k=8)
    assert np.max(np.abs(np.linalg.norm(out.normals, axis=1) - 1)) < 1e-12


def test_normals_precondition():
    with pytest.raises(ValueError):
        estimate_normals(plane_cloud(5), k=10)
