"""Elevation grid, terrain filters and costmap export.

Layers are ``(height, width)`` float arrays indexed ``[iy, ix]``; NaN marks
no-data.  Cell ``(0, 0)`` is the min-x/min-y corner and ``origin`` is its
center.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .cloudio import PointCloud

NO_DATA = np.nan
NORMAL_LAYERS = ("normal_x", "normal_y", "normal_z")
FREE, OCCUPIED, UNKNOWN = 254, 0, 205


@dataclass
class TraversabilityParams:
    cell_size: float = 0.2
    normal_radius: float = 0.5
    roughness_radius: float = 0.3
    slope_critical: float = 0.35
    roughness_critical: float = 0.1
    slope_weight: float = 0.5
    roughness_weight: float = 0.5
    cost_cutoff: float = 0.8

    def __post_init__(self):
        for name in ("cell_size", "normal_radius", "roughness_radius", "slope_critical",
                     "roughness_critical"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TraversabilityParams.{name} must be positive")
        if self.slope_weight < 0 or self.roughness_weight < 0:
            raise ValueError("weights must be nonnegative")
        if abs(self.slope_weight + self.roughness_weight - 1.0) > 1e-9:
            raise ValueError("slope_weight + roughness_weight must equal 1")
        if not 0.0 <= self.cost_cutoff <= 1.0:
            raise ValueError("cost_cutoff must be in [0, 1]")


@dataclass
class ElevationGrid:
    origin: np.ndarray
    cell_size: float
    width: int
    height: int
    layers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        for name, layer in self.layers.items():
            self._check(name, layer)

    def _check(self, name, layer):
        if layer.shape != (self.height, self.width):
            raise ValueError(f"layer {name!r} has shape {layer.shape}, "
                             f"expected {(self.height, self.width)}")

    def __getitem__(self, name) -> np.ndarray:
        return self.layers[name]

    def __contains__(self, name) -> bool:
        return name in self.layers

    def with_layers(self, **new) -> "ElevationGrid":
        layers = dict(self.layers)
        layers.update(new)
        return ElevationGrid(self.origin.copy(), self.cell_size, self.width, self.height, layers)

    def cell_centers(self):
        """``(x, y)`` arrays of cell-center coordinates, each ``(height, width)``."""
        xs = self.origin[0] + self.cell_size * np.arange(self.width)
        ys = self.origin[1] + self.cell_size * np.arange(self.height)
        return np.meshgrid(xs, ys)

    @property
    def min_corner(self) -> np.ndarray:
        return self.origin - 0.5 * self.cell_size

    def valid(self, name: str) -> np.ndarray:
        return ~np.isnan(self.layers[name])


def rasterize_elevation(ground: PointCloud, params: TraversabilityParams) -> ElevationGrid:
    """Mean point height per cell over the xy bounding box of ``ground``."""
    if len(ground) == 0:
        raise ValueError("ground cloud is empty")
    pts = ground.points
    s = params.cell_size
    lo = pts[:, :2].min(axis=0)
    hi = pts[:, :2].max(axis=0)
    w = int(math.floor((hi[0] - lo[0]) / s)) + 1
    h = int(math.floor((hi[1] - lo[1]) / s)) + 1
    ix = np.minimum(np.floor((pts[:, 0] - lo[0]) / s).astype(np.int64), w - 1)
    iy = np.minimum(np.floor((pts[:, 1] - lo[1]) / s).astype(np.int64), h - 1)
    flat = iy * w + ix
    count = np.bincount(flat, minlength=w * h)
    total = np.bincount(flat, weights=pts[:, 2], minlength=w * h)
    elev = np.full(w * h, NO_DATA)
    hit = count > 0
    elev[hit] = total[hit] / count[hit]
    return ElevationGrid(lo + 0.5 * s, s, w, h, {"elevation": elev.reshape(h, w)})


def _stencil(radius: float, cell: float, shape):
    """Integer cell offsets whose centers lie within ``radius`` (inclusive)."""
    r = int(math.floor(radius / cell + 1e-9))
    ry, rx = min(r, shape[0] - 1), min(r, shape[1] - 1)
    lim = (radius / cell) ** 2 * (1 + 1e-9)
    return [(dy, dx) for dy in range(-ry, ry + 1) for dx in range(-rx, rx + 1)
            if dx * dx + dy * dy <= lim]


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[iy, ix] = a[iy + dy, ix + dx]``, NaN outside the grid."""
    H, W = a.shape
    out = np.full_like(a, np.nan)
    ys, yd = slice(max(dy, 0), H + min(dy, 0)), slice(max(-dy, 0), H + min(-dy, 0))
    xs, xd = slice(max(dx, 0), W + min(dx, 0)), slice(max(-dx, 0), W + min(-dx, 0))
    out[yd, xd] = a[ys, xs]
    return out


def surface_normals_layer(grid: ElevationGrid, params: TraversabilityParams) -> ElevationGrid:
    """Least-squares plane over valid cells within ``normal_radius``.

    Adds ``normal_x/y/z`` (``normal_z >= 0``) and ``plane_offset``, the value
    ``d`` with ``n . p = d`` for points ``p = (x, y, z)`` on the cell's plane.
    Cells with fewer than 3 supporting cells, or whose support is collinear,
    get no-data.
    """
    elev = grid["elevation"]
    s = grid.cell_size
    H, W = elev.shape
    valid = ~np.isnan(elev)
    # moments in a frame centered at each cell (center, own elevation)
    m = np.zeros((H, W, 10))
    base = np.where(valid, elev, 0.0)
    for dy, dx in _stencil(params.normal_radius, s, elev.shape):
        z = _shifted(elev, dy, dx)
        ok = valid & ~np.isnan(z)
        px, py = dx * s, dy * s
        pz = np.where(ok, z - base, 0.0)
        okf = ok.astype(np.float64)
        m[..., 0] += okf
        m[..., 1] += okf * px
        m[..., 2] += okf * py
        m[..., 3] += pz
        m[..., 4] += okf * px * px
        m[..., 5] += okf * px * py
        m[..., 6] += px * pz
        m[..., 7] += okf * py * py
        m[..., 8] += py * pz
        m[..., 9] += pz * pz
    n = m[..., 0]
    enough = valid & (n >= 3)
    nn = np.where(enough, n, 1.0)
    mean = np.stack([m[..., 1], m[..., 2], m[..., 3]], axis=-1) / nn[..., None]
    C = np.empty((H, W, 3, 3))
    C[..., 0, 0] = m[..., 4] / nn - mean[..., 0] ** 2
    C[..., 0, 1] = C[..., 1, 0] = m[..., 5] / nn - mean[..., 0] * mean[..., 1]
    C[..., 0, 2] = C[..., 2, 0] = m[..., 6] / nn - mean[..., 0] * mean[..., 2]
    C[..., 1, 1] = m[..., 7] / nn - mean[..., 1] ** 2
    C[..., 1, 2] = C[..., 2, 1] = m[..., 8] / nn - mean[..., 1] * mean[..., 2]
    C[..., 2, 2] = m[..., 9] / nn - mean[..., 2] ** 2
    C[~enough] = np.eye(3)
    evals, evecs = np.linalg.eigh(C)
    normal = evecs[..., :, 0]
    normal = normal * np.where(normal[..., 2:3] < 0, -1.0, 1.0)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    # collinear support: two vanishing eigenvalues leave the plane undefined
    scale = np.maximum(evals[..., 2], s * s)
    ok = enough & (evals[..., 1] > 1e-12 * scale)
    cx, cy = grid.cell_centers()
    centroid = np.stack([cx + mean[..., 0], cy + mean[..., 1], base + mean[..., 2]], axis=-1)
    offset = np.einsum("hwj,hwj->hw", normal, centroid)
    out = {}
    for k, name in enumerate(NORMAL_LAYERS):
        out[name] = np.where(ok, normal[..., k], NO_DATA)
    out["plane_offset"] = np.where(ok, offset, NO_DATA)
    return grid.with_layers(**out)


def slope_layer(grid: ElevationGrid) -> ElevationGrid:
    nz = grid["normal_z"]
    return grid.with_layers(slope=np.arccos(np.clip(nz, 0.0, 1.0)))


def roughness_layer(grid: ElevationGrid, params: TraversabilityParams) -> ElevationGrid:
    """RMS distance of neighbouring cells (within ``roughness_radius``, the
    cell itself included) to the cell's fitted plane."""
    elev = grid["elevation"]
    s = grid.cell_size
    nx, ny, nz = (grid[k] for k in NORMAL_LAYERS)
    d = grid["plane_offset"]
    cx, cy = grid.cell_centers()
    has_plane = ~np.isnan(nz) & ~np.isnan(elev)
    sq = np.zeros_like(elev)
    count = np.zeros_like(elev)
    for dy, dx in _stencil(params.roughness_radius, s, elev.shape):
        z = _shifted(elev, dy, dx)
        ok = has_plane & ~np.isnan(z)
        r = nx * (cx + dx * s) + ny * (cy + dy * s) + nz * z - d
        sq += np.where(ok, r * r, 0.0)
        count += ok
    good = has_plane & (count >= 3)
    rough = np.full_like(elev, NO_DATA)
    rough[good] = np.sqrt(sq[good] / count[good])
    return grid.with_layers(roughness=rough)


def traversability_cost(slope, roughness, params: TraversabilityParams):
    """Cost in [0, 1] from slope and roughness; NaN in either gives NaN."""
    slope = np.asarray(slope, dtype=np.float64)
    roughness = np.asarray(roughness, dtype=np.float64)
    sn = np.minimum(slope / params.slope_critical, 1.0)
    rn = np.minimum(roughness / params.roughness_critical, 1.0)
    cost = params.slope_weight * sn + params.roughness_weight * rn
    cost = np.where((sn >= 1.0) | (rn >= 1.0), 1.0, cost)
    return np.where(np.isnan(slope) | np.isnan(roughness), NO_DATA, cost)


def traversability_layer(grid: ElevationGrid, params: TraversabilityParams) -> ElevationGrid:
    """Adds ``traversability``: the cell cost, 0 easiest and 1 impassable."""
    return grid.with_layers(
        traversability=traversability_cost(grid["slope"], grid["roughness"], params))


def compute_layers(ground: PointCloud, params: TraversabilityParams) -> ElevationGrid:
    grid = rasterize_elevation(ground, params)
    grid = surface_normals_layer(grid, params)
    grid = slope_layer(grid)
    grid = roughness_layer(grid, params)
    return traversability_layer(grid, params)


def costmap_image(grid: ElevationGrid, params: TraversabilityParams) -> np.ndarray:
    """Trinary uint8 image with row 0 at the max-y edge."""
    cost = grid["traversability"]
    img = np.full(cost.shape, UNKNOWN, np.uint8)
    known = ~np.isnan(cost)
    img[known & (cost <= params.cost_cutoff)] = FREE
    img[known & (cost > params.cost_cutoff)] = OCCUPIED
    return img[::-1]


def _fmt(v: float) -> str:
    return repr(float(v))


def export_costmap(grid: ElevationGrid, path_prefix, params: TraversabilityParams) -> None:
    """Write ``<prefix>.pgm`` (binary P5) and ``<prefix>.yaml``."""
    prefix = os.fspath(path_prefix)
    img = costmap_image(grid, params)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    with open(prefix + ".pgm", "wb") as f:
        f.write(header + img.tobytes())
    ox, oy = grid.min_corner
    meta = (f"image: {os.path.basename(prefix)}.pgm\n"
            f"resolution: {_fmt(grid.cell_size)}\n"
            f"origin: [{_fmt(ox)}, {_fmt(oy)}, 0.0]\n"
            "negate: 0\n"
            "occupied_thresh: 0.65\n"
            "free_thresh: 0.196\n")
    with open(prefix + ".yaml", "w", encoding="ascii", newline="\n") as f:
        f.write(meta)


def dump_layers(grid: ElevationGrid, path_prefix) -> list:
    """One CSV per layer, ``<prefix>_<layer>.csv``, row ``iy`` per line."""
    prefix = os.fspath(path_prefix)
    written = []
    for name in sorted(grid.layers):
        path = f"{prefix}_{name}.csv"
        np.savetxt(path, grid.layers[name], fmt="%.10g", delimiter=",")
        written.append(path)
    return written


def load_layer_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))
