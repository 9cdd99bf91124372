import numpy as np


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates on a grid anchored at the world origin."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)
