from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

NORMAL_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points in meters with optional unit normals.

    Arrays are copied on construction and made read-only, so a cloud can be
    shared between threads without defensive copies.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.size == 0:
                nrm = nrm.reshape(0, 3)
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            if not np.all(np.isfinite(nrm)):
                raise ValueError("normals contain non-finite values")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > NORMAL_TOL):
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    @classmethod
    def empty(cls, with_normals: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)) if with_normals else None)

    def select(self, mask_or_index) -> "PointCloud":
        normals = None if self.normals is None else self.normals[mask_or_index]
        return PointCloud(self.points[mask_or_index], normals)

    def with_normals(self, normals: Optional[np.ndarray]) -> "PointCloud":
        return PointCloud(self.points, normals)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.has_normals != other.has_normals:
            return False
        same = np.array_equal(self.points, other.points)
        if self.has_normals:
            same = same and np.array_equal(self.normals, other.normals)
        return bool(same)

    __hash__ = None

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        points = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.has_normals for c in clouds):
            normals = np.concatenate([c.normals for c in clouds], axis=0)
        else:
            normals = None
        return PointCloud(points, normals)


@dataclass(frozen=True, eq=False)
class StampedScan:
    """One Lidar sweep in the sensor frame."""

    timestamp: float
    cloud: PointCloud

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise ValueError("scan timestamp must be finite")
