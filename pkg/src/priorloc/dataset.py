"""On-disk scan sequences.

A sequence directory holds ``sequence.txt`` (``timestamp relative_path`` per
line) plus one cloud file per scan.  A simulated sequence also carries
``ground_truth.tum``, ``reference.ply`` and ``reference_labels.txt``
(1 = ground, 0 = overground).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .cloudio import PointCloud, RigidTransform, StampedScan, load_cloud, save_cloud
from .evaluation import read_tum, write_tum

INDEX = "sequence.txt"
TRUTH = "ground_truth.tum"
REFERENCE = "reference.ply"
LABELS = "reference_labels.txt"


def save_sequence(out_dir, scans: List[StampedScan],
                  ground_truth: Optional[List[Tuple[float, RigidTransform]]] = None,
                  reference: Optional[PointCloud] = None, labels=None) -> List[Path]:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    for i, scan in enumerate(scans):
        rel = f"scans/scan_{i:06d}.ply"
        save_cloud(scan.cloud, out / rel)
        written.append(out / rel)
        lines.append(f"{scan.timestamp:.9f} {rel}\n")
    (out / INDEX).write_text("".join(lines), encoding="ascii")
    written.append(out / INDEX)
    if ground_truth is not None:
        write_tum(out / TRUTH, ground_truth)
        written.append(out / TRUTH)
    if reference is not None:
        save_cloud(reference, out / REFERENCE)
        written.append(out / REFERENCE)
        if labels is not None:
            np.savetxt(out / LABELS, np.asarray(labels, dtype=np.int64), fmt="%d")
            written.append(out / LABELS)
    return written


def load_sequence(seq_dir, limit: Optional[int] = None):
    """``(scans, ground_truth or None)``; ``limit`` reads only the first scans."""
    root = Path(seq_dir)
    index = root / INDEX
    if not index.is_file():
        raise FileNotFoundError(f"{index}: no such sequence index")
    scans = []
    with open(index, encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(maxsplit=1)
            if len(parts) != 2:
                raise ValueError(f"{index}:{lineno}: expected 'timestamp path'")
            scans.append(StampedScan(float(parts[0]), load_cloud(root / parts[1])))
            if limit is not None and len(scans) >= limit:
                break
    truth = read_tum(root / TRUTH) if (root / TRUTH).is_file() else None
    return scans, truth


def load_labels(path) -> np.ndarray:
    return np.loadtxt(os.fspath(path), dtype=np.int64, ndmin=1).astype(bool)
