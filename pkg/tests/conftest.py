from pathlib import Path

import numpy as np
import pytest

from priorloc.cloudio import PointCloud, RigidTransform

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_transform(rng, max_angle=np.pi, max_shift=5.0) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return RigidTransform.from_rotvec(axis * angle, rng.uniform(-max_shift, max_shift, 3))


def plane_cloud(n=400, extent=1.0, z=0.0, rng=None, noise=0.0) -> PointCloud:
    rng = rng or np.random.default_rng(0)
    xy = rng.uniform(0, extent, (n, 2))
    zz = z + (rng.normal(0, noise, n) if noise else np.zeros(n))
    return PointCloud(np.column_stack([xy, zz]))


@pytest.fixture(scope="session")
def yard():
    from priorloc.simulation import load_simulation_spec
    return load_simulation_spec(FIXTURES / "yard.yaml")


@pytest.fixture(scope="session")
def yard_sequence(yard):
    from priorloc.simulation import generate_sequence
    scene, lidar, traj = yard
    return generate_sequence(scene, traj, lidar)
