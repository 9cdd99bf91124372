from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .types import PointCloud

ROTATION_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


def so3_exp(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=np.float64)
    return Rotation.from_rotvec(rotvec).as_matrix()


def so3_log(rotation: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(rotation).as_rotvec()


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation plus translation acting as ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOL or abs(
            np.linalg.det(R) - 1.0
        ) > ROTATION_TOL:
            raise ValueError("rotation is not a member of SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(so3_exp(rotvec), translation)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "RigidTransform":
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    @classmethod
    def exp(cls, xi) -> "RigidTransform":
        """SE(3) exponential of a twist ``(omega, v)``."""
        xi = np.asarray(xi, dtype=np.float64)
        omega, v = xi[:3], xi[3:]
        return cls(so3_exp(omega), _left_jacobian(omega) @ v)

    def log(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        v = np.linalg.solve(_left_jacobian(omega), self.translation)
        return np.concatenate([omega, v])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.rotation)))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        rv = so3_log(self.rotation)
        return f"RigidTransform(rotvec={rv.tolist()}, translation={self.translation.tolist()})"


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def compose(T2: RigidTransform, T1: RigidTransform) -> RigidTransform:
    """Transform that applies ``T1`` first, then ``T2``."""
    R = T2.rotation @ T1.rotation
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-12:
        R = _orthonormalize(R)
    return RigidTransform(R, T2.rotation @ T1.translation + T2.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    points = T.apply(cloud.points)
    normals = None if cloud.normals is None else cloud.normals @ T.rotation.T
    if normals is not None and len(normals):
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points, normals)


def translation_error(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotation_error(a: RigidTransform, b: RigidTransform) -> float:
    """Angle in radians of the relative rotation between two poses."""
    return compose(invert(a), b).rotation_angle()
