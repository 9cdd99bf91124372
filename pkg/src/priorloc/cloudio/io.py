"""ASCII PLY / PCD reading and writing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .types import PointCloud

FLOAT_FMT = "%.10g"

_PCD_NORMAL_NAMES = (("normal_x", "normal_y", "normal_z"), ("nx", "ny", "nz"))
_PLY_NORMAL_NAMES = ("nx", "ny", "nz")


class CloudParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def _cloud_format(path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
    else:
        fmt = Path(path).suffix.lower().lstrip(".")
    if fmt not in ("ply", "pcd"):
        raise ValueError(f"unsupported cloud format {fmt!r} (expected ply or pcd)")
    return fmt


def _parse_rows(path, lines, start_line, count, ncols):
    """Parse ``count`` whitespace separated numeric rows starting at ``start_line``."""
    block = lines[start_line - 1 : start_line - 1 + count]
    if len(block) == count:
        try:
            data = np.array([ln.split()[:ncols] for ln in block], dtype=np.float64)
            if data.shape == (count, ncols) and np.all(np.isfinite(data)):
                return data
        except ValueError:
            pass
    # slow path, only to locate the offending line
    data = np.empty((count, ncols), dtype=np.float64)
    for i in range(count):
        lineno = start_line + i
        if lineno - 1 >= len(lines):
            raise CloudParseError(path, lineno, f"expected {count} data rows, found {i}")
        fields = lines[lineno - 1].split()
        if len(fields) < ncols:
            raise CloudParseError(path, lineno, f"expected {ncols} values, got {len(fields)}")
        try:
            row = [float(v) for v in fields[:ncols]]
        except ValueError as exc:
            raise CloudParseError(path, lineno, f"bad number ({exc})") from None
        data[i] = row
        if not np.all(np.isfinite(data[i])):
            raise CloudParseError(path, lineno, "non-finite value")
    return data


def _load_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(path, 1, "missing 'ply' magic")
    elements = []  # (name, count, [property names])
    fmt_seen = False
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise CloudParseError(path, lineno, f"only ASCII PLY is supported, got {raw.strip()!r}")
            fmt_seen = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise CloudParseError(path, lineno, "malformed element line")
            try:
                elements.append((tok[1], int(tok[2]), []))
            except ValueError:
                raise CloudParseError(path, lineno, "element count is not an integer") from None
        elif tok[0] == "property":
            if not elements:
                raise CloudParseError(path, lineno, "property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                if len(tok) != 3:
                    raise CloudParseError(path, lineno, "malformed property line")
                elements[-1][2].append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise CloudParseError(path, lineno, f"unexpected header line {raw.strip()!r}")
    if header_end is None:
        raise CloudParseError(path, len(lines), "missing end_header")
    if not fmt_seen:
        raise CloudParseError(path, header_end, "missing format line")

    row = header_end + 1
    points = normals = None
    for name, count, props in elements:
        if name != "vertex":
            row += count
            continue
        if any(kind == "list" for kind, _ in props):
            raise CloudParseError(path, header_end, "list properties on vertex are not supported")
        names = [p for _, p in props]
        for axis in "xyz":
            if axis not in names:
                raise CloudParseError(path, header_end, f"vertex element lacks property {axis}")
        data = _parse_rows(path, lines, row, count, len(names))
        points = data[:, [names.index(a) for a in "xyz"]]
        if all(n in names for n in _PLY_NORMAL_NAMES):
            normals = data[:, [names.index(n) for n in _PLY_NORMAL_NAMES]]
        row += count
    if points is None:
        raise CloudParseError(path, header_end, "no vertex element")
    return points, normals


def _load_pcd(path, lines):
    header = {}
    data_line = None
    for lineno, raw in enumerate(lines, start=1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        key = tok[0].upper()
        if key == "DATA":
            if len(tok) < 2 or tok[1].lower() != "ascii":
                raise CloudParseError(path, lineno, f"only ASCII PCD is supported, got {raw.strip()!r}")
            data_line = lineno
            break
        if key not in ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS"):
            raise CloudParseError(path, lineno, f"unexpected header line {raw.strip()!r}")
        header[key] = (lineno, tok[1:])
    if data_line is None:
        raise CloudParseError(path, len(lines), "missing DATA line")
    if "FIELDS" not in header:
        raise CloudParseError(path, data_line, "missing FIELDS line")
    fields = header["FIELDS"][1]
    counts = [1] * len(fields)
    if "COUNT" in header:
        lineno, vals = header["COUNT"]
        try:
            counts = [int(v) for v in vals]
        except ValueError:
            raise CloudParseError(path, lineno, "COUNT values must be integers") from None
        if len(counts) != len(fields):
            raise CloudParseError(path, lineno, "COUNT length does not match FIELDS")
    columns = []
    for f, c in zip(fields, counts):
        columns.extend([f] if c == 1 else [f"{f}_{i}" for i in range(c)])
    for axis in "xyz":
        if axis not in columns:
            raise CloudParseError(path, header["FIELDS"][0], f"missing field {axis}")
    if "POINTS" in header:
        lineno, vals = header["POINTS"]
        try:
            n = int(vals[0])
        except (ValueError, IndexError):
            raise CloudParseError(path, lineno, "POINTS must be an integer") from None
    elif "WIDTH" in header and "HEIGHT" in header:
        n = int(header["WIDTH"][1][0]) * int(header["HEIGHT"][1][0])
    else:
        raise CloudParseError(path, data_line, "missing POINTS line")
    data = _parse_rows(path, lines, data_line + 1, n, len(columns))
    points = data[:, [columns.index(a) for a in "xyz"]]
    normals = None
    for names in _PCD_NORMAL_NAMES:
        if all(nm in columns for nm in names):
            normals = data[:, [columns.index(nm) for nm in names]]
            break
    return points, normals


def load_cloud(path, fmt=None) -> PointCloud:
    """Read an ASCII PLY or PCD file; normals are kept when the file has them."""
    fmt = _cloud_format(path, fmt)
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if fmt == "ply":
        points, normals = _load_ply(path, lines)
    else:
        points, normals = _load_pcd(path, lines)
    if normals is not None and len(normals):
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(lengths == 0):
            raise CloudParseError(path, 0, "zero-length normal")
        # ASCII rounding leaves normals a few ulps off unit length
        normals = normals / lengths
    return PointCloud(points, normals)


def _format_rows(cloud: PointCloud) -> str:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    if len(data) == 0:
        return ""
    fmt = " ".join([FLOAT_FMT] * data.shape[1])
    return "\n".join(fmt % tuple(row) for row in data.tolist()) + "\n"


def save_cloud(cloud: PointCloud, path, fmt=None) -> None:
    fmt = _cloud_format(path, fmt)
    n = len(cloud)
    if fmt == "ply":
        props = ["x", "y", "z"] + (list(_PLY_NORMAL_NAMES) if cloud.has_normals else [])
        header = ["ply", "format ascii 1.0", f"element vertex {n}"]
        header += [f"property double {p}" for p in props]
        header.append("end_header")
    else:
        fields = ["x", "y", "z"] + (list(_PCD_NORMAL_NAMES[0]) if cloud.has_normals else [])
        k = len(fields)
        header = [
            "# .PCD v0.7 - Point Cloud Data file format",
            "VERSION 0.7",
            "FIELDS " + " ".join(fields),
            "SIZE " + " ".join(["8"] * k),
            "TYPE " + " ".join(["F"] * k),
            "COUNT " + " ".join(["1"] * k),
            f"WIDTH {n}",
            "HEIGHT 1",
            "VIEWPOINT 0 0 0 1 0 0 0",
            f"POINTS {n}",
            "DATA ascii",
        ]
    text = "\n".join(header) + "\n" + _format_rows(cloud)
    parent = os.path.dirname(os.fspath(path))
    if parent and not os.path.isdir(parent):
        raise OSError(f"directory does not exist: {parent}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
