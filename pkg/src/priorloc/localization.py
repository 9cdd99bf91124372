"""Pose initialization on a prior map and hybrid scan-to-map localization.

Tracking uses a constant-velocity motion model for the prediction and
point-to-plane Gauss-Newton refinement against the map for the correction.
Once the sequence clock passes ``map_update_enable_time`` the registered
scans are also inserted into the map, so the robot can keep localizing while
it extends the prior map into unmapped areas.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .cloudio import PointCloud, RigidTransform, StampedScan, compose, invert
from .mapcraft import uniform_sample, uniform_sample_indices, UniformSamplingParams
from .registration import IcpParams, IcpResult, icp, point_to_plane_refine
from .spatial import DEFAULT_LEAF_SIZE, DEFAULT_REBUILD_RATIO, IncrementalIndex

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    def __init__(self, result: Optional[IcpResult], message: str):
        self.result = result
        self.fitness = math.inf if result is None else result.fitness
        super().__init__(message)


class ScanOrderError(ValueError):
    pass


def _default_refine_params():
    return IcpParams(max_iterations=30, max_correspondence_distance=0.5)


@dataclass
class LocalizerConfig:
    init_scan_count: int = 10
    init_fitness_threshold: float = 0.01
    map_update_enable_time: float = math.inf
    scan_downsample_voxel: float = 0.1
    velocity_smoothing: float = 0.5
    icp_params: IcpParams = field(default_factory=IcpParams)
    refine_params: IcpParams = field(default_factory=_default_refine_params)
    leaf_size: int = DEFAULT_LEAF_SIZE
    rebuild_ratio: float = DEFAULT_REBUILD_RATIO

    def __post_init__(self):
        if self.init_scan_count < 1:
            raise ValueError("init_scan_count must be >= 1")
        if not self.init_fitness_threshold > 0:
            raise ValueError("init_fitness_threshold must be positive")
        if not self.scan_downsample_voxel > 0:
            raise ValueError("scan_downsample_voxel must be positive")
        if not 0 < self.velocity_smoothing <= 1:
            raise ValueError("velocity_smoothing must be in (0, 1]")


class LocalizerState:
    """Mutable tracking state; feed scans from one thread, in timestamp order."""

    def __init__(self, map_points, config: LocalizerConfig):
        self.config = config
        self.map = IncrementalIndex(map_points, config.leaf_size, config.rebuild_ratio)
        self.prior_size = self.map.size
        self.pose = RigidTransform.identity()
        self.velocity = np.zeros(6)
        self.initialized = False
        self.trajectory: List[Tuple[float, RigidTransform]] = []
        self.degraded: List[bool] = []
        self.last_result: Optional[IcpResult] = None

    def set_initial_pose(self, pose: RigidTransform) -> None:
        self.pose = pose
        self.velocity = np.zeros(6)
        self.initialized = True

    @property
    def last_timestamp(self) -> Optional[float]:
        return self.trajectory[-1][0] if self.trajectory else None

    def map_cloud(self) -> PointCloud:
        return PointCloud(self.map.points)


def initialize_pose(scans: List[StampedScan], map_index, initial_guess: RigidTransform,
                    config: LocalizerConfig) -> IcpResult:
    """Align the first ``init_scan_count`` scans (Lidar held static) to the map.

    The scans are concatenated without motion compensation.  Success needs a
    converged ICP *and* a fitness score below ``init_fitness_threshold``;
    otherwise :class:`InitializationError` is raised with the ICP result.
    """
    n = config.init_scan_count
    if len(scans) < n:
        raise ValueError(f"initialization needs {n} scans, got {len(scans)}")
    merged = PointCloud.concatenate([s.cloud for s in scans[:n]])
    if len(merged) == 0:
        raise InitializationError(None, "initialization scans are empty")
    source = uniform_sample(merged, UniformSamplingParams(config.scan_downsample_voxel))
    result = icp(source, map_index, initial_guess, config.icp_params)
    if not result.converged:
        raise InitializationError(result, f"ICP did not converge (fitness={result.fitness:.6g})")
    if not result.fitness < config.init_fitness_threshold:
        raise InitializationError(
            result, f"fitness {result.fitness:.6g} >= threshold {config.init_fitness_threshold:g}")
    return result


def predict_pose(state: LocalizerState, timestamp: float) -> RigidTransform:
    """Constant-velocity prediction; the velocity is a body-frame twist."""
    if not state.initialized:
        raise RuntimeError("localizer is not initialized")
    last = state.last_timestamp
    if last is None:
        return state.pose
    dt = timestamp - last
    if dt < 0:
        raise ScanOrderError(f"timestamp {timestamp} precedes last pose at {last}")
    if dt == 0 or not np.any(state.velocity):
        return state.pose
    return compose(state.pose, RigidTransform.exp(state.velocity * dt))


def update_velocity(state: LocalizerState, new_pose: RigidTransform, dt: float) -> np.ndarray:
    """Blend the body-frame twist between ``state.pose`` and ``new_pose`` into the velocity."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    xi = compose(invert(state.pose), new_pose).log() / dt
    a = state.config.velocity_smoothing
    state.velocity = a * xi + (1.0 - a) * state.velocity
    return state.velocity


def localize_scan(state: LocalizerState, scan: StampedScan) -> RigidTransform:
    """Register one scan against the map, starting from the motion prediction.

    A scan that fails to converge keeps the predicted pose and is flagged as
    degraded.  Stale scans raise :class:`ScanOrderError` and leave the state
    untouched.
    """
    if not state.initialized:
        raise RuntimeError("localizer is not initialized")
    last = state.last_timestamp
    if last is not None and not scan.timestamp > last:
        raise ScanOrderError(f"scan at {scan.timestamp} is not newer than {last}")
    if len(scan.cloud) == 0:
        raise ValueError("scan is empty")
    cfg = state.config
    predicted = predict_pose(state, scan.timestamp)
    source = uniform_sample(scan.cloud, UniformSamplingParams(cfg.scan_downsample_voxel))
    result = point_to_plane_refine(source, state.map, None, predicted, cfg.refine_params)
    state.last_result = result
    if result.converged:
        pose = result.transform
        if last is not None:
            update_velocity(state, pose, scan.timestamp - last)
        degraded = False
    else:
        pose = predicted
        degraded = True
        log.warning("scan at t=%.3f did not converge (%d usable planes); keeping prediction",
                    scan.timestamp, result.valid_planes)
    state.pose = pose
    state.trajectory.append((scan.timestamp, pose))
    state.degraded.append(degraded)
    return pose


def maybe_extend_map(state: LocalizerState, scan: StampedScan, registered_pose: RigidTransform,
                     config: LocalizerConfig) -> int:
    """Insert the new parts of a registered scan once map updates are enabled.

    Points are voxel-sampled and skipped when an existing map point lies
    closer than ``scan_downsample_voxel``.  Returns the number inserted.
    """
    if not scan.timestamp >= config.map_update_enable_time or len(scan.cloud) == 0:
        return 0
    voxel = config.scan_downsample_voxel
    world = registered_pose.apply(scan.cloud.points)
    cand = world[uniform_sample_indices(world, voxel)]
    if state.map.size:
        _, d2 = state.map.knn_sq(cand, 1)
        cand = cand[d2[:, 0] >= voxel * voxel]
    state.map.insert(cand)
    return len(cand)


@dataclass
class LocalizationRun:
    trajectory: List[Tuple[float, RigidTransform]]
    registered_cloud: PointCloud
    map_cloud: PointCloud
    degraded: List[bool]
    init_result: IcpResult
    inserted: List[int]


def run_sequence(map_cloud: PointCloud, sequence, initial_guess: RigidTransform,
                 config: LocalizerConfig) -> LocalizationRun:
    """Initialize on the first scans, then localize (and maybe extend) every scan."""
    scans = sequence.scans if hasattr(sequence, "scans") else list(sequence)
    if not scans:
        raise ValueError("sequence is empty")
    state = LocalizerState(map_cloud.points, config)
    init = initialize_pose(scans, state.map, initial_guess, config)
    state.set_initial_pose(init.transform)
    registered = []
    inserted = []
    for scan in scans:
        pose = localize_scan(state, scan)
        registered.append(pose.apply(scan.cloud.points))
        inserted.append(maybe_extend_map(state, scan, pose, config))
    reg = PointCloud(np.concatenate(registered, axis=0)) if registered else PointCloud.empty()
    return LocalizationRun(state.trajectory, reg, state.map_cloud(), state.degraded, init, inserted)
