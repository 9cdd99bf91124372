from .io import CloudParseError, load_cloud, save_cloud
from .normals import estimate_normals, pca_normals
from .transform import (
    RigidTransform,
    apply_transform,
    compose,
    invert,
    rotation_error,
    so3_exp,
    so3_log,
    translation_error,
)
from .types import PointCloud, StampedScan
from .voxel import voxel_keys

__all__ = [
    "CloudParseError",
    "PointCloud",
    "StampedScan",
    "RigidTransform",
    "apply_transform",
    "compose",
    "estimate_normals",
    "invert",
    "load_cloud",
    "pca_normals",
    "rotation_error",
    "save_cloud",
    "so3_exp",
    "so3_log",
    "translation_error",
    "voxel_keys",
]
