import math

import numpy as np
import pytest
import yaml

from priorloc.cloudio import RigidTransform
from priorloc.simulation import (LidarModel, SceneConfigError, TrajectorySpec, build_lidar, build_scene,
                                 build_trajectory, generate_sequence, load_simulation_spec,
                                 simulate_scan, trajectory_poses)
from conftest import FIXTURES

FLAT = {"bounds": [-10, 10, -10, 10]}


def test_flat_scene_all_ground():
    ref, labels = build_scene(FLAT).reference_cloud(0.5)
    assert labels.all() and np.all(ref.points[:, 2] == 0)


def test_box_labels_partition():
    scene = build_scene({**FLAT, "boxes": [{"min": [-1, -1, -0.5], "max": [1, 1, 1.0]}]})
    ref, labels = scene.reference_cloud(0.1)
    ground, other = ref.points[labels], ref.points[~labels]
    assert len(ground) + len(other) == len(ref)
    assert np.all(scene.inside_box(other, 1e-9))
    # no ground sample under the box footprint
    under = np.all(np.abs(ground[:, :2]) < 1 - 1e-9, axis=1)
    assert not under.any()


def test_sinusoid_extremum():
    scene = build_scene({**FLAT, "terrain": {"sinusoids": [{"amplitude": 0.3, "wavelength": 4.0}]}})
    ref, _ = scene.reference_cloud(0.05)
    assert abs(np.max(np.abs(ref.points[:, 2])) - 0.3) < 1e-3


def test_downward_rays_hit_plane():
    scene = build_scene({**FLAT, "terrain": {"plane": [0.1, -0.05, 0.2]}})
    pose = RigidTransform.from_rotvec([0, 0, 0.7], [1.0, -2.0, 1.2])
    model = LidarModel(range_noise_sigma=0.0, max_range=50.0)
    w = pose.apply(simulate_scan(scene, pose, model).points)
    down = w[w[:, 2] < pose.translation[2]]
    assert len(down) > 1000
    assert np.max(np.abs(down[:, 2] - scene.height(down[:, 0], down[:, 1]))) < 1e-6


def test_zero_noise_points_on_surfaces(yard):
    scene, lidar, _ = yard
    model = LidarModel(lidar.ring_elevations, lidar.horizontal_resolution, 30.0, 0.3, 0.0, 0)
    pose = RigidTransform.from_rotvec([0, 0, 1.0], [3.0, -2.0, 1.0])
    w = pose.apply(simulate_scan(scene, pose, model).points)
    assert np.max(scene.surface_distance(w)) < 1e-6


def test_determinism():
    scene = build_scene({**FLAT, "boxes": [{"min": [2, 2, -1], "max": [3, 3, 2]}]})
    pose = RigidTransform.from_rotvec([0, 0, 0], [0, 0, 1])
    for sigma in (0.0, 0.02):
        a = simulate_scan(scene, pose, LidarModel(range_noise_sigma=sigma, seed=4))
        b = simulate_scan(scene, pose, LidarModel(range_noise_sigma=sigma, seed=4))
        assert np.array_equal(a.points, b.points)
    c = simulate_scan(scene, pose, LidarModel(range_noise_sigma=0.02, seed=5))
    assert not np.array_equal(a.points, c.points)


def test_noise_level():
    scene = build_scene(FLAT)
    pose = RigidTransform.from_rotvec([0, 0, 0], [0, 0, 1])
    clean = simulate_scan(scene, pose, LidarModel(range_noise_sigma=0.0))
    noisy = simulate_scan(scene, pose, LidarModel(range_noise_sigma=0.01, seed=1))
    dr = np.linalg.norm(noisy.points, axis=1) - np.linalg.norm(clean.points, axis=1)
    assert abs(dr.std() - 0.01) < 1e-3 and abs(dr.mean()) < 1e-3


def test_out_of_range_empty():
    scene = build_scene(FLAT)
    pose = RigidTransform.from_rotvec([0, 0, 0], [0, 0, 10])
    assert len(simulate_scan(scene, pose, LidarModel(max_range=5.0))) == 0


def test_single_waypoint_dwell():
    poses = trajectory_poses(TrajectorySpec([[1.0, 2.0, 1.0]], dwell_ticks=10))
    assert len(poses) == 10
    assert all(np.array_equal(p.matrix(), poses[0][1].matrix()) for _, p in poses)
    ts = [t for t, _ in poses]
    assert ts == pytest.approx([k / 10 for k in range(10)])


def test_straight_line_arithmetic():
    poses = trajectory_poses(TrajectorySpec([[0, 0, 1], [10, 0, 1]], speed=1.0, rate=10.0, dwell_ticks=1))
    assert len(poses) == 101
    xs = np.array([p.translation[0] for _, p in poses])
    assert np.allclose(np.diff(xs), 0.1, atol=1e-12)


def test_heading_follows_path():
    poses = trajectory_poses(TrajectorySpec([[0, 0, 1], [0, 5, 1]], dwell_ticks=2))
    yaw = math.atan2(poses[-1][1].rotation[1, 0], poses[-1][1].rotation[0, 0])
    assert yaw == pytest.approx(math.pi / 2)


def test_generate_sequence_lengths():
    scene = build_scene(FLAT)
    seq = generate_sequence(scene, TrajectorySpec([[0, 0, 1], [1, 0, 1]], dwell_ticks=3),
                            LidarModel(horizontal_resolution=math.radians(5)))
    assert len(seq.scans) == len(seq.ground_truth) == 13
    assert seq.reference_labels is not None


def test_fixture_files_load():
    for name in ("yard.yaml", "aisles.yaml", "annex.yaml"):
        scene, lidar, traj = load_simulation_spec(FIXTURES / name)
        assert traj is not None and len(lidar.ring_elevations) == 16


def test_seed_override(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump({**FLAT, "lidar": {"seed": 3}}))
    assert load_simulation_spec(path)[1].seed == 3
    assert load_simulation_spec(path, seed=9)[1].seed == 9


@pytest.mark.parametrize("spec, where", [
    ({"bounds": [0, 1, 0]}, "scene.bounds"),
    ({"bounds": [0, 1, 0, 1], "boxes": [{"min": [0, 0, 0], "max": [2, 0.5, 1]}]}, "scene.boxes[0]"),
    ({"bounds": [0, 1, 0, 1], "terrain": {"sinusoids": [{"amplitude": 1, "wavelength": -2}]}},
     "scene.terrain.sinusoids[0].wavelength"),
    ({"bounds": [0, 1, 0, 1], "colour": 3}, "scene.colour"),
])
def test_scene_errors_name_field(spec, where):
    with pytest.raises(SceneConfigError) as err:
        build_scene(spec)
    assert err.value.field_path == where


def test_lidar_and_trajectory_errors():
    with pytest.raises(SceneConfigError) as err:
        build_lidar({"range_noise_sigma": -1})
    assert err.value.field_path == "scene.lidar.range_noise_sigma"
    with pytest.raises(SceneConfigError):
        build_trajectory({"waypoints": [[0, 0]]})
