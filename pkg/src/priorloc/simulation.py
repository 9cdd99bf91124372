"""Synthetic scenes, a raycast multi-ring Lidar and trajectory playback.

Scenes are an analytic heightfield (plane plus sinusoids) with axis-aligned
boxes standing on it, so every generated point has closed-form ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .cloudio import PointCloud, RigidTransform, StampedScan


class SceneConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float
    wavelength: float
    direction: Tuple[float, float] = (1.0, 0.0)
    phase: float = 0.0


@dataclass(frozen=True)
class Box:
    min: Tuple[float, float, float]
    max: Tuple[float, float, float]
    label: str = "box"


@dataclass
class Scene:
    bounds: Tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    plane: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # z = a x + b y + c
    sinusoids: List[Sinusoid] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)
    reference_spacing: float = 0.05

    def height(self, x, y):
        a, b, c = self.plane
        z = a * np.asarray(x, dtype=np.float64) + b * np.asarray(y, dtype=np.float64) + c
        for s in self.sinusoids:
            dx, dy = s.direction
            norm = math.hypot(dx, dy)
            arg = 2.0 * math.pi * (x * dx + y * dy) / (norm * s.wavelength) + s.phase
            z = z + s.amplitude * np.sin(arg)
        return z

    def inside_box(self, points, margin: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        hit = np.zeros(len(p), bool)
        for b in self.boxes:
            lo = np.asarray(b.min) - margin
            hi = np.asarray(b.max) + margin
            hit |= np.all((p >= lo) & (p <= hi), axis=1)
        return hit

    def reference_cloud(self, spacing: Optional[float] = None):
        """Dense surface samples and their labels (True = ground)."""
        h = spacing or self.reference_spacing
        xmin, xmax, ymin, ymax = self.bounds
        xs = np.arange(xmin, xmax + 0.5 * h, h)
        ys = np.arange(ymin, ymax + 0.5 * h, h)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        ground = np.column_stack([X.ravel(), Y.ravel(), self.height(X, Y).ravel()])
        covered = np.zeros(len(ground), bool)
        for b in self.boxes:
            covered |= (
                (ground[:, 0] >= b.min[0]) & (ground[:, 0] <= b.max[0])
                & (ground[:, 1] >= b.min[1]) & (ground[:, 1] <= b.max[1])
                & (ground[:, 2] >= b.min[2]) & (ground[:, 2] <= b.max[2])
            )
        ground = ground[~covered]
        parts = [ground]
        for b in self.boxes:
            parts.append(self._box_samples(b, h))
        points = np.concatenate(parts, axis=0)
        labels = np.zeros(len(points), bool)
        labels[: len(ground)] = True
        return PointCloud(points), labels

    def _box_samples(self, b: Box, h: float) -> np.ndarray:
        x0, y0, z0 = b.min
        x1, y1, z1 = b.max

        def span(a, c):
            n = max(1, int(round((c - a) / h)))
            return np.linspace(a, c, n + 1)

        xs, ys, zs = span(x0, x1), span(y0, y1), span(z0, z1)
        out = []
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        out.append(np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z1)]))
        for x in (x0, x1):
            Yv, Z = np.meshgrid(ys, zs[:-1], indexing="xy")
            out.append(np.column_stack([np.full(Yv.size, x), Yv.ravel(), Z.ravel()]))
        for y in (y0, y1):
            Xv, Z = np.meshgrid(xs[1:-1], zs[:-1], indexing="xy")
            out.append(np.column_stack([Xv.ravel(), np.full(Xv.size, y), Z.ravel()]))
        pts = np.concatenate(out, axis=0)
        # drop side samples buried in the terrain
        return pts[pts[:, 2] >= self.height(pts[:, 0], pts[:, 1]) - 1e-12]

    def surface_distance(self, points) -> np.ndarray:
        """Distance of each point to the nearest scene surface (boxes exact, terrain vertical)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d = np.abs(p[:, 2] - self.height(p[:, 0], p[:, 1]))
        for b in self.boxes:
            lo = np.asarray(b.min)
            hi = np.asarray(b.max)
            outside = np.maximum(np.maximum(lo - p, p - hi), 0.0)
            inside = np.all((p >= lo) & (p <= hi), axis=1)
            dist_out = np.linalg.norm(outside, axis=1)
            dist_in = np.min(np.minimum(p - lo, hi - p), axis=1)
            d = np.minimum(d, np.where(inside, dist_in, dist_out))
        return d


@dataclass
class LidarModel:
    ring_elevations: Tuple[float, ...] = tuple(np.deg2rad(np.linspace(-15.0, 15.0, 16)).tolist())
    horizontal_resolution: float = math.radians(1.0)
    max_range: float = 30.0
    min_range: float = 0.3
    range_noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")
        if not self.horizontal_resolution > 0:
            raise ValueError("horizontal_resolution must be positive")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    def ray_directions(self) -> np.ndarray:
        """Unit rays in the sensor frame, ring-major, shape ``(rings, azimuths, 3)``."""
        n_az = int(round(2.0 * math.pi / self.horizontal_resolution))
        az = np.arange(n_az) * (2.0 * math.pi / n_az)
        el = np.asarray(self.ring_elevations, dtype=np.float64)
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)


@dataclass
class TrajectorySpec:
    waypoints: List[Sequence[float]]  # [x, y, z] or [x, y, z, yaw_deg]
    speed: float = 1.0
    rate: float = 10.0
    dwell_ticks: int = 10


@dataclass
class ScanSequence:
    scans: List[StampedScan]
    ground_truth: List[Tuple[float, RigidTransform]]
    scene_reference_cloud: PointCloud
    reference_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.scans) != len(self.ground_truth):
            raise ValueError("scans and ground truth differ in length")
        ts = [s.timestamp for s in self.scans]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("scan timestamps must be strictly increasing")


def _raycast_boxes(origin, dirs, boxes):
    t_best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for b in boxes:
            lo = (np.asarray(b.min) - origin) * inv
            hi = (np.asarray(b.max) - origin) * inv
            # rays parallel to a slab: inside -> unbounded, outside -> miss
            par = dirs == 0
            inside_slab = (origin >= np.asarray(b.min)) & (origin <= np.asarray(b.max))
            t1 = np.where(par, np.where(inside_slab, -np.inf, np.inf), np.minimum(lo, hi))
            t2 = np.where(par, np.where(inside_slab, np.inf, -np.inf), np.maximum(lo, hi))
            tn = t1.max(axis=1)
            tf = t2.min(axis=1)
            hit = (tn <= tf) & (tn > 0)
            t_best = np.where(hit & (tn < t_best), tn, t_best)
    return t_best


def _raycast_terrain(scene: Scene, origin, dirs, max_range):
    m = len(dirs)
    if not scene.sinusoids:
        a, b, c = scene.plane
        denom = dirs[:, 2] - a * dirs[:, 0] - b * dirs[:, 1]
        num = a * origin[0] + b * origin[1] + c - origin[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        return np.where((denom != 0) & (t > 0) & (t <= max_range), t, np.inf)

    # height band of the terrain over the scene; outside it no crossing exists
    xmin, xmax, ymin, ymax = scene.bounds
    a, b, c = scene.plane
    corners = [a * x + b * y + c for x in (xmin, xmax) for y in (ymin, ymax)]
    amp = sum(abs(s.amplitude) for s in scene.sinusoids)
    z_hi = max(corners) + amp
    z_lo = min(corners) - amp
    oz = origin[2]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_enter = np.where(oz > z_hi, np.where(dz < 0, (oz - z_hi) / -dz, np.inf), 0.0)
        t_exit = np.where(dz < 0, (oz - z_lo) / -dz, max_range)
    t_exit = np.minimum(t_exit, max_range)
    t = np.full(m, np.inf)
    cand = np.nonzero(t_enter <= t_exit)[0]
    if len(cand) == 0:
        return t

    def g(tt, d):
        p = origin + tt[:, None] * d
        return p[:, 2] - scene.height(p[:, 0], p[:, 1])

    lam = min(s.wavelength for s in scene.sinusoids)
    step = min(0.1, lam / 20.0)
    active = cand[g(t_enter[cand], dirs[cand]) > 0]
    t_prev = t_enter[active]
    lo_all = np.zeros(m)
    hi_all = np.zeros(m)
    found = np.zeros(m, bool)
    while len(active):
        t_next = np.minimum(t_prev + step, t_exit[active])
        gk = g(t_next, dirs[active])
        cross = gk <= 0
        idx = active[cross]
        lo_all[idx] = t_prev[cross]
        hi_all[idx] = t_next[cross]
        found[idx] = True
        keep = ~cross & (t_next < t_exit[active])
        active = active[keep]
        t_prev = t_next[keep]
    idx = np.nonzero(found)[0]
    lo, hi = lo_all[idx], hi_all[idx]
    d_ = dirs[idx]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pos = g(mid, d_) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    t[idx] = 0.5 * (lo + hi)
    return np.where(t <= max_range, t, np.inf)


def simulate_scan(scene: Scene, pose: RigidTransform, model: LidarModel, stream: int = 0) -> PointCloud:
    """Raycast one sweep from ``pose``; points are returned in the sensor frame.

    Range noise for ray (ring i, azimuth j) is element ``[i, j]`` of a normal
    draw seeded by ``(model.seed, stream)``, independent of which rays hit.
    """
    u = model.ray_directions()
    shape = u.shape[:2]
    u = u.reshape(-1, 3)
    origin = np.asarray(pose.translation, dtype=np.float64)
    dirs = u @ pose.rotation.T
    t = np.minimum(_raycast_terrain(scene, origin, dirs, model.max_range),
                   _raycast_boxes(origin, dirs, scene.boxes))
    rng = np.random.default_rng(np.random.SeedSequence([int(model.seed), int(stream)]))
    noise = rng.standard_normal(shape).reshape(-1) * model.range_noise_sigma
    hit = (t <= model.max_range) & (t >= model.min_range)
    r = t[hit] + noise[hit]
    return PointCloud(u[hit] * r[:, None])


def _yaw_pose(position, yaw) -> RigidTransform:
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(R, position)


def _waypoint_yaws(wps):
    n = len(wps)
    yaws = []
    for i, w in enumerate(wps):
        if len(w) >= 4:
            yaws.append(math.radians(w[3]))
            continue
        if n == 1:
            yaws.append(0.0)
            continue
        a, b = (wps[i], wps[i + 1]) if i + 1 < n else (wps[i - 1], wps[i])
        yaws.append(math.atan2(b[1] - a[1], b[0] - a[0]))
    return yaws


def trajectory_poses(spec: TrajectorySpec) -> List[Tuple[float, RigidTransform]]:
    """Ground-truth poses, one per tick at ``spec.rate``.

    The first ``max(dwell_ticks, 1)`` ticks sit at the first waypoint; after
    that the sensor moves along the polyline at ``spec.speed`` with linear
    position and shortest-arc yaw interpolation between waypoints.
    """
    wps = [list(map(float, w)) for w in spec.waypoints]
    if not wps:
        raise ValueError("trajectory needs at least one waypoint")
    if not (spec.speed > 0 and spec.rate > 0):
        raise ValueError("speed and rate must be positive")
    yaws = _waypoint_yaws(wps)
    pos = np.array([w[:3] for w in wps])
    seg_len = np.linalg.norm(np.diff(pos, axis=0), axis=1) if len(pos) > 1 else np.zeros(0)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    step = spec.speed / spec.rate
    n_move = int(math.floor(total / step + 1e-9))

    def at(s):
        if len(pos) == 1 or s <= 0:
            return pos[0], yaws[0]
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        f = 0.0 if seg_len[i] == 0 else min((s - cum[i]) / seg_len[i], 1.0)
        dyaw = (yaws[i + 1] - yaws[i] + math.pi) % (2.0 * math.pi) - math.pi
        return pos[i] + f * (pos[i + 1] - pos[i]), yaws[i] + f * dyaw

    out = []
    tick = 0
    for _ in range(max(int(spec.dwell_ticks), 1)):
        p, y = at(0.0)
        out.append((tick / spec.rate, _yaw_pose(p, y)))
        tick += 1
    for k in range(1, n_move + 1):
        p, y = at(k * step)
        out.append((tick / spec.rate, _yaw_pose(p, y)))
        tick += 1
    return out


def generate_sequence(scene: Scene, trajectory: TrajectorySpec, model: LidarModel) -> ScanSequence:
    poses = trajectory_poses(trajectory)
    scans = [StampedScan(t, simulate_scan(scene, T, model, stream=i)) for i, (t, T) in enumerate(poses)]
    ref, labels = scene.reference_cloud()
    return ScanSequence(scans, poses, ref, labels)


# ---------------------------------------------------------------- config


def _num(d, key, path, default=None, positive=False, nonneg=False):
    if key not in d:
        if default is None:
            raise SceneConfigError(f"{path}.{key}", "missing required field")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SceneConfigError(f"{path}.{key}", f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise SceneConfigError(f"{path}.{key}", "must be positive")
    if nonneg and v < 0:
        raise SceneConfigError(f"{path}.{key}", "must be non-negative")
    return float(v)


def _vec(d, key, path, n, default=None):
    if key not in d:
        if default is None:
            raise SceneConfigError(f"{path}.{key}", "missing required field")
        return tuple(default)
    v = d[key]
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise SceneConfigError(f"{path}.{key}", f"expected a list of {n} numbers")
    for i, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise SceneConfigError(f"{path}.{key}[{i}]", f"expected a finite number, got {x!r}")
    return tuple(float(x) for x in v)


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise SceneConfigError(path, "expected a mapping")
    for k in d:
        if k not in allowed:
            raise SceneConfigError(f"{path}.{k}", "unknown field")


def build_scene(spec: dict) -> Scene:
    """Scene from a parsed description (``bounds``, ``terrain``, ``boxes``...)."""
    _check_keys(spec, {"bounds", "terrain", "boxes", "reference_spacing", "lidar", "trajectory"}, "scene")
    bounds = _vec(spec, "bounds", "scene", 4)
    if not (bounds[0] < bounds[1] and bounds[2] < bounds[3]):
        raise SceneConfigError("scene.bounds", "expected [xmin, xmax, ymin, ymax] with min < max")
    terrain = spec.get("terrain", {}) or {}
    _check_keys(terrain, {"plane", "sinusoids"}, "scene.terrain")
    plane = _vec(terrain, "plane", "scene.terrain", 3, default=(0.0, 0.0, 0.0))
    sinusoids = []
    for i, s in enumerate(terrain.get("sinusoids", []) or []):
        p = f"scene.terrain.sinusoids[{i}]"
        _check_keys(s, {"amplitude", "wavelength", "direction", "phase"}, p)
        direction = _vec(s, "direction", p, 2, default=(1.0, 0.0))
        if direction == (0.0, 0.0):
            raise SceneConfigError(f"{p}.direction", "must be non-zero")
        sinusoids.append(Sinusoid(_num(s, "amplitude", p), _num(s, "wavelength", p, positive=True),
                                  direction, _num(s, "phase", p, default=0.0)))
    boxes = []
    for i, b in enumerate(spec.get("boxes", []) or []):
        p = f"scene.boxes[{i}]"
        _check_keys(b, {"min", "max", "label"}, p)
        lo, hi = _vec(b, "min", p, 3), _vec(b, "max", p, 3)
        if not all(a < c for a, c in zip(lo, hi)):
            raise SceneConfigError(p, "min must be below max on every axis")
        if lo[0] < bounds[0] or hi[0] > bounds[1] or lo[1] < bounds[2] or hi[1] > bounds[3]:
            raise SceneConfigError(p, "box lies outside scene bounds")
        boxes.append(Box(lo, hi, str(b.get("label", "box"))))
    spacing = _num(spec, "reference_spacing", "scene", default=0.05, positive=True)
    return Scene(bounds, plane, sinusoids, boxes, spacing)


def build_lidar(spec: dict, seed: Optional[int] = None) -> LidarModel:
    spec = spec or {}
    p = "scene.lidar"
    _check_keys(spec, {"rings", "ring_min_deg", "ring_max_deg", "ring_elevations_deg",
                       "horizontal_resolution_deg", "max_range", "min_range",
                       "range_noise_sigma", "seed"}, p)
    if "ring_elevations_deg" in spec:
        el = spec["ring_elevations_deg"]
        if not isinstance(el, list) or not el:
            raise SceneConfigError(f"{p}.ring_elevations_deg", "expected a non-empty list")
        rings = np.deg2rad(np.asarray(el, dtype=np.float64))
    else:
        n = int(_num(spec, "rings", p, default=16, positive=True))
        rings = np.deg2rad(np.linspace(_num(spec, "ring_min_deg", p, default=-15.0),
                                       _num(spec, "ring_max_deg", p, default=15.0), n))
    return LidarModel(
        ring_elevations=tuple(rings.tolist()),
        horizontal_resolution=math.radians(_num(spec, "horizontal_resolution_deg", p, default=1.0, positive=True)),
        max_range=_num(spec, "max_range", p, default=30.0, positive=True),
        min_range=_num(spec, "min_range", p, default=0.3, nonneg=True),
        range_noise_sigma=_num(spec, "range_noise_sigma", p, default=0.01, nonneg=True),
        seed=int(seed if seed is not None else _num(spec, "seed", p, default=0.0, nonneg=True)),
    )


def build_trajectory(spec: dict) -> TrajectorySpec:
    p = "scene.trajectory"
    _check_keys(spec, {"waypoints", "speed", "rate", "dwell_ticks"}, p)
    wps = spec.get("waypoints")
    if not isinstance(wps, list) or not wps:
        raise SceneConfigError(f"{p}.waypoints", "expected a non-empty list")
    for i, w in enumerate(wps):
        if not isinstance(w, (list, tuple)) or len(w) not in (3, 4):
            raise SceneConfigError(f"{p}.waypoints[{i}]", "expected [x, y, z] or [x, y, z, yaw_deg]")
    return TrajectorySpec(
        waypoints=[list(map(float, w)) for w in wps],
        speed=_num(spec, "speed", p, default=1.0, positive=True),
        rate=_num(spec, "rate", p, default=10.0, positive=True),
        dwell_ticks=int(_num(spec, "dwell_ticks", p, default=10, nonneg=True)),
    )


def load_simulation_spec(path, seed: Optional[int] = None):
    """Parse a scene YAML file into ``(scene, lidar, trajectory or None)``."""
    with open(path) as fh:
        spec = yaml.safe_load(fh)
    if not isinstance(spec, dict):
        raise SceneConfigError("scene", "expected a mapping at top level")
    scene = build_scene(spec)
    lidar = build_lidar(spec.get("lidar", {}), seed)
    traj = build_trajectory(spec["trajectory"]) if spec.get("trajectory") else None
    return scene, lidar, traj
