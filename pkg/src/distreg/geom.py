"""Rigid-body geometry: poses, transforms, weighted pose fitting and error primitives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration

RANK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping x to ``rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass
class PointCloud:
    """Points in the sensor frame (LiDAR center at the origin)."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


def _as_points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def apply_pose(cloud, pose: Pose):
    """Return ``R p + t`` for every point; keeps the input container type."""
    pts = _as_points(cloud)
    out = pts @ pose.rotation.T + pose.translation
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.frame_id)
    return out


def compose(a: Pose, b: Pose) -> Pose:
    """The pose that applies ``a`` first, then ``b``."""
    return Pose(b.rotation @ a.rotation, b.rotation @ a.translation + b.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_about(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit-normalized ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    # uniform on SO(3) via a normalized Gaussian quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator, translation_scale: float = 10.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-translation_scale, translation_scale, 3))


def fit_pose_weighted(src, dst, weights=None) -> Pose:
    """Weighted least-squares rigid transform with ``dst ~ R src + t``.

    Kabsch/Umeyama without scale. Raises DegenerateConfiguration when the
    weighted cross-covariance has rank below two, since the rotation is then
    not determined.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if src.shape != dst.shape:
        raise ValueError(f"src/dst length mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.shape != (len(src),):
        raise ValueError("weights must be non-negative, one per pair")
    total = w.sum()
    if not total > 0:
        raise DegenerateConfiguration("total weight is zero")
    w = w / total

    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    h = (xs * w[:, None]).T @ xd
    u, s, vt = np.linalg.svd(h)
    # a 3D rotation is pinned down by a rank-2 covariance; collinear or
    # coincident points leave at most one non-zero singular value
    if s[0] <= 0 or s[1] < RANK_TOL * s[0]:
        raise DegenerateConfiguration("weighted covariance is rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, mu_d - r @ mu_s)


def rotation_error(r_true, r_est) -> float:
    """Geodesic angle in degrees between two rotations."""
    r_true = np.asarray(r_true, dtype=np.float64)
    r_est = np.asarray(r_est, dtype=np.float64)
    c = (np.trace(r_true.T @ r_est) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_true, t_est) -> float:
    return float(np.linalg.norm(np.asarray(t_true, dtype=np.float64) - np.asarray(t_est, dtype=np.float64)))
