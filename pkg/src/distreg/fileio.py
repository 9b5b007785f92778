"""Point-cloud ``.bin`` and pose-file readers/writers (KITTI odometry conventions)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .geom import Pose

POSE_FILE = "poses.txt"


def write_cloud(path, points) -> None:
    pts = np.ascontiguousarray(np.asarray(points).reshape(-1, 3), dtype="<f4")
    path = Path(path)
    try:
        pts.tofile(path)
    except OSError as exc:
        raise OSError(f"cannot write point cloud {path}: {exc}") from exc


def read_cloud(path, stride: int = 3) -> np.ndarray:
    """Read little-endian float32 records of ``stride`` values, keeping x, y, z."""
    if stride < 3:
        raise ValueError("stride must be at least 3")
    path = Path(path)
    size = os.path.getsize(path)
    record = 4 * stride
    if size % record:
        raise MalformedFile(path, size - size % record, f"trailing partial record of {size % record} bytes")
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(-1, stride)[:, :3].astype(np.float64)


def write_poses(path, poses) -> None:
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(" ".join(f"{v:.17g}" for v in m.ravel()))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_poses(path) -> list:
    path = Path(path)
    poses = []
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            if line:
                try:
                    vals = [float(v) for v in line.split()]
                except ValueError:
                    raise MalformedFile(path, offset, "non-numeric pose entry") from None
                if len(vals) != 12:
                    raise MalformedFile(path, offset, f"expected 12 values, found {len(vals)}")
                poses.append(Pose.from_matrix(np.array(vals).reshape(3, 4)))
            offset += len(raw)
    return poses
