"""Cloth simulation ground filter.

The cloud is flipped upside down and a cloth of particles is dropped onto
it.  Particles stick when they reach the (inverted) surface, and spring
relaxation keeps the cloth from sinking into the pits that overground
objects become after the flip.  Points close to the settled cloth are ground.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .cloudio import PointCloud
from .spatial import KDTree

DAMPING = 0.01


class DegenerateExtentError(ValueError):
    pass


@dataclass
class CsfParams:
    cloth_resolution: float = 0.5
    class_threshold: float = 0.1
    rigidness: int = 2
    time_step: float = 0.65
    gravity: float = 0.2
    max_iterations: int = 500
    displacement_epsilon: float = 0.005

    def __post_init__(self):
        if self.rigidness not in (1, 2, 3):
            raise ValueError("rigidness must be 1, 2 or 3")
        for name in ("cloth_resolution", "class_threshold", "time_step", "gravity",
                     "max_iterations", "displacement_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CsfParams.{name} must be positive")


class Cloth:
    """Particle grid over the xy extent; ``heights[iy, ix]`` live in the inverted frame."""

    def __init__(self, origin, shape, spacing: float, start_height: float):
        self.origin = np.asarray(origin, dtype=np.float64)  # xy of particle (0, 0)
        self.spacing = float(spacing)
        self.heights = np.full(shape, float(start_height))
        self.previous = self.heights.copy()
        self.movable = np.ones(shape, bool)

    @property
    def shape(self):
        return self.heights.shape

    def interpolate(self, xy) -> np.ndarray:
        g = (np.asarray(xy, dtype=np.float64) - self.origin) / self.spacing
        ny, nx = self.shape
        x0 = np.clip(np.floor(g[:, 0]).astype(np.int64), 0, max(nx - 2, 0))
        y0 = np.clip(np.floor(g[:, 1]).astype(np.int64), 0, max(ny - 2, 0))
        fx = np.clip(g[:, 0] - x0, 0.0, 1.0)
        fy = np.clip(g[:, 1] - y0, 0.0, 1.0)
        x1 = np.minimum(x0 + 1, nx - 1)
        y1 = np.minimum(y0 + 1, ny - 1)
        h = self.heights
        return ((1 - fx) * (1 - fy) * h[y0, x0] + fx * (1 - fy) * h[y0, x1]
                + (1 - fx) * fy * h[y1, x0] + fx * fy * h[y1, x1])


def _neighbor_mean(h: np.ndarray) -> np.ndarray:
    total = np.zeros_like(h)
    count = np.zeros_like(h)
    total[1:, :] += h[:-1, :]
    count[1:, :] += 1
    total[:-1, :] += h[1:, :]
    count[:-1, :] += 1
    total[:, 1:] += h[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += h[:, 1:]
    count[:, :-1] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), h)


FOOTPRINT_FRACTION = 0.25


def collision_heights(cloth: Cloth, inverted: np.ndarray) -> np.ndarray:
    """Highest inverted-z inside each particle's footprint.

    The footprint is the xy disc of radius ``spacing / 4`` around the
    particle.  A full cell would span more height than the classification
    threshold on moderate slopes; a disc that is too small misses the top of
    a step when the particle sits on its edge.  Particles with an empty
    footprint use the point nearest to them in xy.
    """
    ny, nx = cloth.shape
    gx, gy = np.meshgrid(cloth.origin[0] + cloth.spacing * np.arange(nx),
                         cloth.origin[1] + cloth.spacing * np.arange(ny))
    flat = np.column_stack([inverted[:, :2], np.zeros(len(inverted))])
    nodes = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    tree = KDTree(flat)
    ids, _ = tree.knn_sq(nodes, 1)
    heights = inverted[ids[:, 0], 2]
    offsets, hits, _ = tree.radius_sq(nodes, FOOTPRINT_FRACTION * cloth.spacing)
    filled = offsets[1:] > offsets[:-1]
    if hits.size:
        top = np.maximum.reduceat(inverted[hits, 2], offsets[:-1][filled])
        heights[filled] = top
    return heights.reshape(ny, nx)


def simulate_cloth_step(cloth: Cloth, collision: np.ndarray, params: CsfParams) -> float:
    """Advance the cloth one step in place; returns the largest height change."""
    h0 = cloth.heights.copy()
    mov = cloth.movable
    if not mov.any():
        return 0.0
    h = h0.copy()
    accel = -params.gravity * params.time_step ** 2
    h[mov] = h0[mov] + (h0[mov] - cloth.previous[mov]) * (1.0 - DAMPING) + accel
    hit = mov & (h <= collision)
    h[hit] = collision[hit]
    mov = mov & ~hit
    for _ in range(params.rigidness):
        # Jacobi pass: every particle reads the heights of the previous pass
        mean = _neighbor_mean(h)
        h = np.where(mov, h + 0.5 * (mean - h), h)
    # relaxation can drag a free particle below the surface
    pen = mov & (h < collision)
    h[pen] = collision[pen]
    mov = mov & ~pen
    cloth.previous = h0
    cloth.heights = h
    cloth.movable = mov
    return float(np.max(np.abs(h - h0)))


def make_cloth(cloud: PointCloud, params: CsfParams) -> Tuple[Cloth, np.ndarray]:
    """Cloth over the inverted cloud plus the per-particle collision heights."""
    if len(cloud) == 0:
        raise ValueError("cloud is empty")
    pts = cloud.points
    lo = pts[:, :2].min(axis=0)
    hi = pts[:, :2].max(axis=0)
    if np.any(hi - lo <= 0):
        raise DegenerateExtentError("cloud has zero extent in x or y")
    s = params.cloth_resolution
    origin = lo - s
    nx = int(np.ceil((hi[0] - lo[0]) / s)) + 3
    ny = int(np.ceil((hi[1] - lo[1]) / s)) + 3
    inverted = pts * np.array([1.0, 1.0, -1.0])
    cloth = Cloth(origin, (ny, nx), s, inverted[:, 2].max() + s)
    return cloth, collision_heights(cloth, inverted)


def run_cloth(cloth: Cloth, collision: np.ndarray, params: CsfParams):
    """Iterate until displacement drops below epsilon; returns the displacement history."""
    history = []
    for _ in range(int(params.max_iterations)):
        d = simulate_cloth_step(cloth, collision, params)
        history.append(d)
        if d < params.displacement_epsilon:
            break
    return history


def csf_labels(cloud: PointCloud, params: CsfParams) -> np.ndarray:
    """Boolean ground mask for ``cloud``."""
    cloth, coll = make_cloth(cloud, params)
    run_cloth(cloth, coll, params)
    inverted_z = -cloud.points[:, 2]
    cloth_z = cloth.interpolate(cloud.points[:, :2])
    return np.abs(inverted_z - cloth_z) <= params.class_threshold


def csf_extract(cloud: PointCloud, params: CsfParams) -> Tuple[PointCloud, PointCloud]:
    """Split into (ground, nonground), each keeping input order."""
    ground = csf_labels(cloud, params)
    return cloud.select(ground), cloud.select(~ground)
