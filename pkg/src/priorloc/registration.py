"""Rigid registration: closed-form alignment, point-to-point ICP with a
fitness gate, and Gauss-Newton point-to-plane refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .cloudio import PointCloud, RigidTransform, compose, pca_normals, so3_exp


_FREEZE = 10.0


class DegenerateInputError(ValueError):
    pass


@dataclass
class IcpParams:
    max_iterations: int = 50
    max_correspondence_distance: float = 1.0
    translation_epsilon: float = 1e-4
    rotation_epsilon: float = 1e-4
    fitness_threshold: float = 0.01
    plane_neighbors: int = 5
    max_plane_dist: float = 0.1
    min_valid_planes: int = 10
    # point-to-plane only: the residual gate starts at max_correspondence_distance,
    # is scaled by trim_decay every iteration and settles at trim_sigmas robust
    # sigmas (1.4826 * median |r|), never below trim_floor; 0 sigmas disables it
    trim_sigmas: float = 3.0
    trim_floor: float = 0.05
    trim_decay: float = 0.5

    def __post_init__(self):
        for name in ("max_iterations", "max_correspondence_distance", "translation_epsilon",
                     "rotation_epsilon", "fitness_threshold", "plane_neighbors",
                     "max_plane_dist", "min_valid_planes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IcpParams.{name} must be positive")
        if self.plane_neighbors < 3:
            raise ValueError("IcpParams.plane_neighbors must be >= 3")
        if self.trim_sigmas < 0 or self.trim_floor < 0:
            raise ValueError("IcpParams.trim_sigmas and trim_floor must be >= 0")
        if not 0 < self.trim_decay <= 1:
            raise ValueError("IcpParams.trim_decay must be in (0, 1]")


@dataclass
class IcpResult:
    transform: RigidTransform
    fitness: float
    iterations_used: int
    converged: bool
    # per-iteration objective (before, after) the update, correspondences held fixed
    history: List[Tuple[float, float]] = field(default_factory=list)
    valid_planes: int = 0


@dataclass
class CorrespondenceSet:
    source_ids: np.ndarray
    target_ids: np.ndarray
    distances: np.ndarray
    max_distance: float

    def __len__(self):
        return len(self.source_ids)

    @property
    def pairs(self):
        return list(zip(self.source_ids.tolist(), self.target_ids.tolist(), self.distances.tolist()))


@dataclass
class LocalPlane:
    centroid: np.ndarray
    normal: np.ndarray
    valid: bool

    def distance(self, point) -> float:
        return float(np.dot(self.normal, np.asarray(point, dtype=np.float64) - self.centroid))


def best_rigid_transform(source_pts, target_pts) -> RigidTransform:
    """Least-squares rotation and translation mapping source onto target (SVD).

    A reflection solution is turned into the best proper rotation by flipping
    the direction of the smallest singular value.
    """
    P = np.asarray(source_pts, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target_pts, dtype=np.float64).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError("source and target must have the same length")
    if len(P) < 3:
        raise DegenerateInputError(f"need at least 3 point pairs, got {len(P)}")
    p_mean = P.mean(axis=0)
    q_mean = Q.mean(axis=0)
    H = (P - p_mean).T @ (Q - q_mean)
    U, S, Vt = np.linalg.svd(H)
    if S[0] == 0 or S[1] <= 1e-12 * S[0]:
        raise DegenerateInputError("cross-covariance is rank deficient (collinear points)")
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    return RigidTransform(R, q_mean - R @ p_mean)


def find_correspondences(source: PointCloud, target_index, T: RigidTransform,
                         max_dist: float) -> CorrespondenceSet:
    if not max_dist > 0:
        raise ValueError("max_dist must be positive")
    pts = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    if len(pts) == 0 or target_index.size == 0:
        empty = np.zeros(0, np.int64)
        return CorrespondenceSet(empty, empty.copy(), np.zeros(0), max_dist)
    ids, d2 = target_index.knn_sq(T.apply(pts), 1)
    ids = ids[:, 0]
    dist = np.sqrt(d2[:, 0])
    keep = (ids >= 0) & (dist <= max_dist)
    return CorrespondenceSet(np.nonzero(keep)[0], ids[keep], dist[keep], max_dist)


def fitness_score(source: PointCloud, target_index, T: RigidTransform, max_dist: float) -> float:
    """Mean squared nearest-neighbour distance over correspondences within ``max_dist``.

    Returns ``inf`` when nothing lies within ``max_dist``.
    """
    corr = find_correspondences(source, target_index, T, max_dist)
    if len(corr) == 0:
        return math.inf
    return float(np.sum(corr.distances ** 2) / len(corr))


def icp(source: PointCloud, target_index, initial_guess: RigidTransform,
        params: Optional[IcpParams] = None) -> IcpResult:
    params = params or IcpParams()
    if len(source) == 0:
        raise ValueError("source cloud is empty")
    target = target_index.points
    src = source.points
    T = initial_guess
    history = []
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        corr = find_correspondences(source, target_index, T, params.max_correspondence_distance)
        if len(corr) == 0:
            return IcpResult(T, math.inf, it, False, history)
        moved = T.apply(src[corr.source_ids])
        matched = target[corr.target_ids]
        before = float(np.sum((moved - matched) ** 2))
        if before == 0.0:
            # already exact; the SVD would only add rounding noise
            history.append((0.0, 0.0))
            converged = True
            break
        try:
            delta = best_rigid_transform(moved, matched)
        except DegenerateInputError:
            break
        after = float(np.sum((delta.apply(moved) - matched) ** 2))
        history.append((before, after))
        T = compose(delta, T)
        if (np.linalg.norm(delta.translation) < params.translation_epsilon
                and delta.rotation_angle() < params.rotation_epsilon):
            converged = True
            break
    fitness = fitness_score(source, target_index, T, params.max_correspondence_distance)
    return IcpResult(T, fitness, it, converged, history)


def fit_local_planes(index, queries, k: int = 5, max_plane_dist: float = 0.1):
    """Least-squares planes through the ``k`` map neighbours of each query.

    Returns ``(centroids, normals, valid)``.  A plane is invalid when a
    neighbour lies farther than ``max_plane_dist`` from it, when the
    neighbourhood is collinear or degenerate, or when the index has fewer
    than ``k`` points.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    m = len(q)
    if index.size < k or m == 0:
        return np.zeros((m, 3)), np.tile([0.0, 0.0, 1.0], (m, 1)), np.zeros(m, bool)
    ids, _ = index.knn_sq(q, k)
    nbrs = index.points[ids]
    centroids, normals, evals = pca_normals(nbrs)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    # deterministic sign: largest-magnitude component positive
    pivot = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(m), pivot])
    normals *= sign[:, None]
    offsets = np.abs(np.einsum("mkj,mj->mk", nbrs - centroids[:, None, :], normals))
    scale = np.maximum(1.0, evals[:, 2])
    degenerate = evals[:, 1] <= 1e-12 * scale
    valid = (offsets.max(axis=1) <= max_plane_dist) & ~degenerate
    return centroids, normals, valid


def fit_local_plane(index, cloud_points, query, k: int = 5, max_plane_dist: float = 0.1) -> LocalPlane:
    """Single-query form of :func:`fit_local_planes`.

    ``cloud_points`` must be the array the index was built over.
    """
    if cloud_points is not None and len(cloud_points) != index.size:
        raise ValueError("cloud_points does not match the index")
    c, n, v = fit_local_planes(index, np.asarray(query).reshape(1, 3), k, max_plane_dist)
    return LocalPlane(c[0], n[0], bool(v[0]))


def point_to_plane_residuals(points, centroids, normals, T: RigidTransform):
    x = T.apply(points)
    return np.einsum("ij,ij->i", normals, x - centroids), x


def point_to_plane_cost(points, centroids, normals, T: RigidTransform) -> float:
    r, _ = point_to_plane_residuals(points, centroids, normals, T)
    return float(np.dot(r, r))


def point_to_plane_jacobian(points, centroids, normals, T: RigidTransform):
    """Residuals and their Jacobian w.r.t. a left update ``(exp(w), v) o T``.

    Columns are ordered ``(w, v)``.
    """
    r, x = point_to_plane_residuals(points, centroids, normals, T)
    J = np.hstack([np.cross(x, normals), normals])
    return r, J


def point_to_plane_gradient(points, centroids, normals, T: RigidTransform) -> np.ndarray:
    r, J = point_to_plane_jacobian(points, centroids, normals, T)
    return 2.0 * J.T @ r


def left_update(delta, T: RigidTransform) -> RigidTransform:
    delta = np.asarray(delta, dtype=np.float64)
    return compose(RigidTransform(so3_exp(delta[:3]), delta[3:]), T)


def _solve_normal_equations(J, r):
    H = J.T @ J
    g = J.T @ r
    try:
        return -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(H, g, rcond=None)[0]


def point_to_plane_refine(scan: PointCloud, map_index, map_points=None,
                          initial: Optional[RigidTransform] = None,
                          params: Optional[IcpParams] = None) -> IcpResult:
    """Gauss-Newton over point-to-plane residuals against local map planes.

    Planes come from the ``plane_neighbors`` nearest map points of each
    transformed scan point and are re-fit every iteration.  A point is used
    when its plane is valid and its residual is within
    ``max_correspondence_distance``.  The gate then shrinks geometrically
    towards ``trim_sigmas`` robust sigmas of the residuals, so a poor
    prediction is pulled in by the wide gate before unmapped clutter is cut
    away by the narrow one.  Fewer than ``min_valid_planes`` usable
    points yields a non-converged result.
    """
    params = params or IcpParams()
    if len(scan) == 0:
        raise ValueError("scan is empty")
    if map_points is not None and len(map_points) != map_index.size:
        raise ValueError("map_points does not match the index")
    T = initial if initial is not None else RigidTransform.identity()
    pts = scan.points
    history = []
    converged = False
    n_valid = 0
    it = 0
    frozen = False
    anneal = params.max_correspondence_distance
    settled = params.trim_sigmas == 0
    for it in range(1, params.max_iterations + 1):
        if not frozen:
            x = T.apply(pts)
            c, n, valid = fit_local_planes(map_index, x, params.plane_neighbors, params.max_plane_dist)
            r_all = np.abs(np.einsum("ij,ij->i", n, x - c))
            use = valid & (r_all <= params.max_correspondence_distance)
            if params.trim_sigmas > 0 and use.any():
                robust = max(params.trim_floor, params.trim_sigmas * 1.4826 * float(np.median(r_all[use])))
                settled = anneal <= robust
                use &= r_all <= max(robust, anneal)
                anneal *= params.trim_decay
            n_valid = int(use.sum())
            if n_valid < params.min_valid_planes:
                fitness = fitness_score(scan, map_index, T, params.max_correspondence_distance)
                return IcpResult(T, fitness, it, False, history, n_valid)
        r, J = point_to_plane_jacobian(pts[use], c[use], n[use], T)
        delta = _solve_normal_equations(J, r)
        T_new = left_update(delta, T)
        before = float(np.dot(r, r))
        after = point_to_plane_cost(pts[use], c[use], n[use], T_new)
        history.append((before, after))
        T = T_new
        step_t = np.linalg.norm(delta[3:])
        step_r = np.linalg.norm(delta[:3])
        small = step_t < _FREEZE * params.translation_epsilon and step_r < _FREEZE * params.rotation_epsilon
        if not settled:
            # nothing left for the wide gate to pull in: go straight to the trim
            if small:
                anneal = 0.0
            continue
        if step_t < params.translation_epsilon and step_r < params.rotation_epsilon:
            converged = True
            break
        # near the optimum a point can flip in and out of the gates between
        # iterations; finish on a fixed association so the steps can vanish
        if small:
            frozen = True
    fitness = fitness_score(scan, map_index, T, params.max_correspondence_distance)
    return IcpResult(T, fitness, it, converged, history, n_valid)
