"""ASCII PLY export of point clouds with per-vertex scalar columns."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np


def write_ply(path, points, columns: Mapping[str, np.ndarray] | None = None) -> None:
    """Write ``points`` (n x 3) plus named float columns as an ASCII PLY file."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be n x 3, got {pts.shape}")
    cols = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    for name, values in (columns or {}).items():
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(pts),):
            raise ValueError(f"column {name!r} has shape {values.shape}, expected ({len(pts)},)")
        if name in cols or not name.isidentifier():
            raise ValueError(f"bad column name {name!r}")
        cols[name] = values
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    lines += [f"property double {name}" for name in cols]
    lines.append("end_header")
    table = np.column_stack(list(cols.values()))
    lines += [" ".join(repr(float(v)) for v in row) for row in table]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> dict[str, np.ndarray]:
    """Read the vertex columns of an ASCII PLY file written by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path} is not a PLY file")
    names = []
    count = 0
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            names.append(parts[-1])
        elif line == "end_header":
            body = text[i + 1 : i + 1 + count]
            break
    else:
        raise ValueError(f"{path} has no end_header")
    table = np.array([[float(v) for v in row.split()] for row in body]).reshape(count, len(names))
    return {name: table[:, j] for j, name in enumerate(names)}
