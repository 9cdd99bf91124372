from __future__ import annotations

import numpy as np

from ..spatial import KDTree
from .types import PointCloud

DEGENERATE_EIG_TOL = 1e-12


def pca_normals(neighborhoods: np.ndarray):
    """Smallest-eigenvalue directions of a batch of ``(M, k, 3)`` neighbourhoods.

    Returns ``(centroids, normals, eigenvalues)`` with eigenvalues ascending.
    """
    centroids = neighborhoods.mean(axis=1)
    centered = neighborhoods - centroids[:, None, :]
    cov = np.einsum("mki,mkj->mij", centered, centered) / neighborhoods.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    return centroids, evecs[:, :, 0], evals


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=(0.0, 0.0, 0.0),
                     return_degenerate: bool = False):
    """PCA normals from the ``k`` nearest neighbours, flipped toward ``viewpoint``.

    Neighbourhoods whose covariance eigenvalues are all equal (within 1e-12)
    get ``+z`` and are reported in the degenerate mask.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(cloud) < k:
        raise ValueError(f"cloud has {len(cloud)} points, need at least k={k}")
    tree = KDTree(cloud.points)
    ids, _ = tree.knn_batch(cloud.points, k)
    _, normals, evals = pca_normals(cloud.points[ids])
    spread = evals[:, 2] - evals[:, 0]
    degenerate = spread <= DEGENERATE_EIG_TOL * np.maximum(1.0, evals[:, 2])
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    to_view = np.asarray(viewpoint, dtype=np.float64) - cloud.points
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals[degenerate] = (0.0, 0.0, 1.0)
    out = PointCloud(cloud.points, normals)
    if return_degenerate:
        return out, degenerate
    return out
