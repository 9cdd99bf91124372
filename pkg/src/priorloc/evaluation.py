"""Cloud-to-cloud error, trajectory error and run reports."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cloudio import PointCloud, RigidTransform
from .spatial import KDTree

# Table 1 of the reference field study: mean / std of cloud-to-cloud distance (m)
REFERENCE_RESULTS = {
    "FAST-LIO-LOC": (0.026, 0.049),
    "LIORF": (0.050, 0.069),
}
DEFAULT_OUTLIER_THRESHOLD = 0.5
TIME_TOLERANCE = 1e-3


class EmptyReportError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class CloudDistanceReport:
    mean_error: float
    std_dev: float
    accepted_count: int
    rejected_count: int
    outlier_threshold: float


def nearest_distances(source: PointCloud, target: PointCloud) -> np.ndarray:
    """Euclidean distance from every source point to its nearest target point."""
    tree = KDTree(target.points)
    _, d2 = tree.knn_sq(source.points, 1)
    return np.sqrt(d2[:, 0])


def cloud_to_cloud(source: PointCloud, target: PointCloud,
                   outlier_threshold: float = DEFAULT_OUTLIER_THRESHOLD) -> CloudDistanceReport:
    """Mean and population std of source-to-target distances up to the threshold.

    The metric is directional: swapping source and target generally changes it.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("cloud_to_cloud needs two non-empty clouds")
    if not outlier_threshold > 0:
        raise ValueError("outlier_threshold must be positive")
    d = nearest_distances(source, target)
    kept = d[d <= outlier_threshold]
    if kept.size == 0:
        raise EmptyReportError(f"no source point within {outlier_threshold} m of the target")
    return CloudDistanceReport(float(kept.mean()), float(kept.std()), int(kept.size),
                               int(d.size - kept.size), float(outlier_threshold))


def associate(trajectory: Sequence[Tuple[float, RigidTransform]],
              ground_truth: Sequence[Tuple[float, RigidTransform]],
              tolerance: float = TIME_TOLERANCE) -> List[Tuple[int, int]]:
    """Pair every estimate with the nearest ground-truth stamp within ``tolerance``."""
    if not ground_truth:
        return []
    gt_t = np.array([t for t, _ in ground_truth], dtype=np.float64)
    order = np.argsort(gt_t, kind="stable")
    sorted_t = gt_t[order]
    pairs = []
    for i, (t, _) in enumerate(trajectory):
        k = int(np.searchsorted(sorted_t, t))
        best = None
        for c in (k - 1, k):
            if 0 <= c < len(sorted_t):
                dt = abs(sorted_t[c] - t)
                if dt <= tolerance and (best is None or dt < best[0]):
                    best = (dt, int(order[c]))
        if best is not None:
            pairs.append((i, best[1]))
    return pairs


def trajectory_errors(trajectory, ground_truth, tolerance: float = TIME_TOLERANCE) -> np.ndarray:
    """Per-pose translation error after association; raises if nothing matches."""
    pairs = associate(trajectory, ground_truth, tolerance)
    if not pairs:
        raise AlignmentError("no trajectory timestamp matches the ground truth")
    est = np.array([trajectory[i][1].translation for i, _ in pairs])
    ref = np.array([ground_truth[j][1].translation for _, j in pairs])
    return np.linalg.norm(est - ref, axis=1)


def absolute_trajectory_error(trajectory, ground_truth, tolerance: float = TIME_TOLERANCE) -> float:
    """RMS translation error; both trajectories are in the map frame, so no alignment."""
    e = trajectory_errors(trajectory, ground_truth, tolerance)
    return float(np.sqrt(np.mean(e * e)))


@dataclass
class RunReport:
    cloud: CloudDistanceReport
    ate_rmse: Optional[float]
    ate_max: Optional[float]
    matched_poses: int
    registered_points: int
    map_points: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["std_definition"] = "population std over per-point distances"
        d["reference"] = {k: {"mean_error": m, "std_dev": s} for k, (m, s) in REFERENCE_RESULTS.items()}
        return d


def evaluate_run(prior_map: PointCloud, registered_cloud: PointCloud, trajectory, ground_truth,
                 threshold: float = DEFAULT_OUTLIER_THRESHOLD) -> RunReport:
    """Cloud-to-cloud error of the registered scans against the prior map, plus ATE.

    Ground truth may be ``None`` (real data), in which case ATE is omitted.
    """
    cloud = cloud_to_cloud(registered_cloud, prior_map, threshold)
    ate = amax = None
    matched = 0
    if ground_truth is not None:
        e = trajectory_errors(trajectory, ground_truth)
        ate = float(np.sqrt(np.mean(e * e)))
        amax = float(e.max())
        matched = int(e.size)
    return RunReport(cloud, ate, amax, matched, len(registered_cloud), len(prior_map))


def format_report(report: RunReport) -> str:
    c = report.cloud
    lines = [
        "== localization report ==",
        f"cloud_to_cloud.mean_error_m  {c.mean_error:.6f}",
        f"cloud_to_cloud.std_dev_m     {c.std_dev:.6f}  (per-point, population)",
        f"cloud_to_cloud.accepted      {c.accepted_count}",
        f"cloud_to_cloud.rejected      {c.rejected_count}",
        f"cloud_to_cloud.threshold_m   {c.outlier_threshold:g}",
    ]
    if report.ate_rmse is not None:
        lines += [f"ate.rmse_m                   {report.ate_rmse:.6f}",
                  f"ate.max_m                    {report.ate_max:.6f}",
                  f"ate.matched_poses            {report.matched_poses}"]
    lines.append("-- field reference (mean / std, m) --")
    for name, (m, s) in REFERENCE_RESULTS.items():
        lines.append(f"{name:<14} {m:.3f} / {s:.3f}")
    return "\n".join(lines) + "\n"


def write_report(report: RunReport, json_path, text_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8") as f:
            f.write(format_report(report))


def write_tum(path, trajectory) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line."""
    with open(path, "w", encoding="ascii") as f:
        for t, T in trajectory:
            q = T.quaternion()
            vals = [t, *T.translation, *q]
            f.write(" ".join(f"{v:.9f}" if i == 0 else f"{v:.10g}" for i, v in enumerate(vals)))
            f.write("\n")


def read_tum(path) -> List[Tuple[float, RigidTransform]]:
    out = []
    with open(path, encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{os.fspath(path)}:{lineno}: expected 8 fields, got {len(parts)}")
            v = [float(p) for p in parts]
            if not all(math.isfinite(x) for x in v):
                raise ValueError(f"{os.fspath(path)}:{lineno}: non-finite value")
            out.append((v[0], RigidTransform.from_quaternion(v[4:8], v[1:4])))
    return out
