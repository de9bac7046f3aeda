"""Plain-text point cloud formats: whitespace XYZ and ASCII PLY."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .geom3d import PointCloud, as_points


def read_xyz(path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
        rows.append([float(v) for v in parts])
    if not rows:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(rows))


def write_xyz(path, cloud) -> None:
    pts = as_points(cloud)
    # repr precision keeps the round trip exact
    lines = [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if n_vertex is None or body_start is None:
        raise ValueError(f"{path}: no vertex element or header not terminated")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ValueError(f"{path}: vertex element lacks x/y/z properties") from None
    body = [ln.split() for ln in lines[body_start : body_start + n_vertex]]
    if len(body) < n_vertex:
        raise ValueError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    pts = np.array([[float(row[c]) for c in cols] for row in body])
    return PointCloud(pts)


def write_ply(path, cloud) -> None:
    pts = as_points(cloud)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_cloud(path) -> PointCloud:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


def write_cloud(path, cloud) -> None:
    if str(path).lower().endswith(".ply"):
        write_ply(path, cloud)
    else:
        write_xyz(path, cloud)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
