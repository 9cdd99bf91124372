"""Map de-noising: voxel uniform sampling followed by moving least squares."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit, prange

from .cloudio import PointCloud, voxel_keys
from .spatial import KDTree


@dataclass
class UniformSamplingParams:
    voxel_size: float = 0.05

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")


@dataclass
class MlsParams:
    search_radius: float = 0.3
    polynomial_order: int = 2
    # width of the Gaussian weight; None means search_radius
    gaussian_scale: Optional[float] = None

    def __post_init__(self):
        if not self.search_radius > 0:
            raise ValueError("search_radius must be positive")
        if self.polynomial_order not in (1, 2):
            raise ValueError("polynomial_order must be 1 or 2")
        if self.gaussian_scale is not None and not self.gaussian_scale > 0:
            raise ValueError("gaussian_scale must be positive")

    @property
    def scale(self) -> float:
        return self.search_radius if self.gaussian_scale is None else self.gaussian_scale


def uniform_sample_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Index of the point nearest each occupied voxel's center, in voxel-key order."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, np.int64)
    keys = voxel_keys(pts, voxel_size)
    centers = (keys + 0.5) * voxel_size
    d2 = np.sum((pts - centers) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d2, keys[:, 2], keys[:, 1], keys[:, 0]))
    k = keys[order]
    first = np.ones(len(order), bool)
    first[1:] = np.any(k[1:] != k[:-1], axis=1)
    return order[first]


def uniform_sample(cloud: PointCloud, params: UniformSamplingParams) -> PointCloud:
    return cloud.select(uniform_sample_indices(cloud.points, params.voxel_size))


@njit(cache=True)
def weighted_plane(nbrs, w):
    """Plane ``<n, x> = D`` minimizing the weighted squared offsets, ``|n| = 1``.

    Returns ``(normal, D, centroid)``; the normal is the smallest-eigenvalue
    direction of the weighted covariance.
    """
    sw = 0.0
    c = np.zeros(3)
    for j in range(nbrs.shape[0]):
        sw += w[j]
        for a in range(3):
            c[a] += w[j] * nbrs[j, a]
    c /= sw
    C = np.zeros((3, 3))
    for j in range(nbrs.shape[0]):
        for a in range(3):
            da = nbrs[j, a] - c[a]
            for b in range(3):
                C[a, b] += w[j] * da * (nbrs[j, b] - c[b])
    C /= sw
    _, vecs = np.linalg.eigh(C)
    n = vecs[:, 0].copy()
    n /= np.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
    D = n[0] * c[0] + n[1] * c[1] + n[2] * c[2]
    return n, D, c


def plane_objective(nbrs, w, normal, D) -> float:
    """Weighted squared plane offsets ``sum w (<n, p> - D)^2``."""
    r = np.asarray(nbrs) @ np.asarray(normal) - D
    return float(np.sum(np.asarray(w) * r * r))


def plane_objective_gradient(nbrs, w, normal, D):
    """Gradient of :func:`plane_objective` w.r.t. ``(n, D)``."""
    nbrs = np.asarray(nbrs, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r = nbrs @ np.asarray(normal) - D
    return 2.0 * (w * r) @ nbrs, -2.0 * float(np.sum(w * r))


@njit(cache=True)
def _tangent_basis(n):
    if abs(n[0]) < 0.9:
        a = np.array([1.0, 0.0, 0.0])
    else:
        a = np.array([0.0, 1.0, 0.0])
    u = a - (a[0] * n[0] + a[1] * n[1] + a[2] * n[2]) * n
    u /= np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    v = np.array([n[1] * u[2] - n[2] * u[1], n[2] * u[0] - n[0] * u[2], n[0] * u[1] - n[1] * u[0]])
    return u, v


@njit(cache=True, parallel=True)
def _mls_kernel(points, prior, has_prior, offsets, ids, d2, inv_h2, order):
    n_pts = points.shape[0]
    out = np.empty((n_pts, 3))
    normals = np.empty((n_pts, 3))
    passthrough = np.zeros(n_pts, np.bool_)
    for i in prange(n_pts):
        a = offsets[i]
        b = offsets[i + 1]
        q = points[i]
        cnt = b - a
        if cnt < 3:
            out[i] = q
            if has_prior:
                normals[i] = prior[i]
            else:
                normals[i, 0] = 0.0
                normals[i, 1] = 0.0
                normals[i, 2] = 1.0
            passthrough[i] = True
            continue
        nb = np.empty((cnt, 3))
        w = np.empty(cnt)
        for j in range(cnt):
            nb[j] = points[ids[a + j]]
            w[j] = np.exp(-d2[a + j] * inv_h2)
        n, D, c = weighted_plane(nb, w)
        off = n[0] * q[0] + n[1] * q[1] + n[2] * q[2] - D
        origin = q - off * n
        proj = origin.copy()
        nrm = n.copy()
        if order == 2 and cnt >= 6:
            u, v = _tangent_basis(n)
            A = np.zeros((6, 6))
            rhs = np.zeros(6)
            phi = np.empty(6)
            for j in range(cnt):
                dx = nb[j] - origin
                x = dx[0] * u[0] + dx[1] * u[1] + dx[2] * u[2]
                y = dx[0] * v[0] + dx[1] * v[1] + dx[2] * v[2]
                h = dx[0] * n[0] + dx[1] * n[1] + dx[2] * n[2]
                phi[0] = 1.0
                phi[1] = x
                phi[2] = y
                phi[3] = x * x
                phi[4] = x * y
                phi[5] = y * y
                for r in range(6):
                    rhs[r] += w[j] * phi[r] * h
                    for s in range(6):
                        A[r, s] += w[j] * phi[r] * phi[s]
            # skip the polynomial when the tangent samples cannot support it
            if np.linalg.cond(A) < 1e12:
                coef = np.linalg.solve(A, rhs)
                proj = origin + coef[0] * n
                nrm = n - coef[1] * u - coef[2] * v
                nrm /= np.sqrt(nrm[0] ** 2 + nrm[1] ** 2 + nrm[2] ** 2)
        if has_prior:
            ref = prior[i]
            if nrm[0] * ref[0] + nrm[1] * ref[1] + nrm[2] * ref[2] < 0:
                nrm = -nrm
        elif nrm[2] < 0:
            nrm = -nrm
        out[i] = proj
        normals[i] = nrm
    return out, normals, passthrough


def mls_smooth(cloud: PointCloud, params: MlsParams, return_passthrough: bool = False):
    """Project every point onto a locally fitted weighted plane or quadric.

    Points with fewer than 3 neighbours inside ``search_radius`` are passed
    through unchanged and counted.
    """
    n = len(cloud)
    if n == 0:
        out = PointCloud.empty(with_normals=True)
        return (out, 0) if return_passthrough else out
    tree = KDTree(cloud.points)
    offsets, ids, d2 = tree.radius_sq(cloud.points, params.search_radius)
    prior = cloud.normals if cloud.has_normals else np.zeros((n, 3))
    pts, normals, passthrough = _mls_kernel(
        np.ascontiguousarray(cloud.points), np.ascontiguousarray(prior), cloud.has_normals,
        offsets, ids, d2, 1.0 / params.scale ** 2, int(params.polynomial_order))
    out = PointCloud(pts, normals)
    if return_passthrough:
        return out, int(passthrough.sum())
    return out


def craft_map(cloud: PointCloud, us: UniformSamplingParams, mls: MlsParams) -> PointCloud:
    """Uniform sampling then MLS smoothing; output carries the smoothed normals."""
    if len(cloud) == 0:
        return PointCloud.empty(with_normals=True)
    return mls_smooth(uniform_sample(cloud, us), mls)
