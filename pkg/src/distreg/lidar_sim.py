"""Synthetic LiDAR sequences under an inverse-square scan density.

A scene is a set of small planar patches. A sensor at distance ``d`` from a
patch samples ``Poisson(alpha / d**2 * area)`` points on it, so near patches
are dense and far patches sparse, and moving the sensor changes the density
of near patches much more than that of far ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .correspondence import Correspondences
from .errors import CoincidentPoint
from .fileio import POSE_FILE, write_cloud, write_poses
from .geom import PointCloud, Pose, compose, inverse, rot_z


@dataclass(frozen=True)
class DensityModel:
    alpha: float = 8.0e3  # points * m^2 per m^2 of surface
    min_range: float = 2.0
    max_range: float = 100.0
    jitter: float = 0.02  # meters, isotropic Gaussian

    def __post_init__(self):
        if self.alpha <= 0 or not 0 <= self.min_range < self.max_range:
            raise ValueError("invalid density model")

    def density(self, d):
        d = np.asarray(d, dtype=np.float64)
        inside = (d >= self.min_range) & (d <= self.max_range)
        with np.errstate(divide="ignore"):
            return np.where(inside, self.alpha / np.maximum(d, 1e-300) ** 2, 0.0)


@dataclass(frozen=True)
class SceneConfig:
    n_landmarks: int = 1500
    box: tuple = ((-120.0, 380.0), (-70.0, 70.0), (0.0, 9.0))
    size_range: tuple = (0.4, 1.6)  # patch side length, meters
    min_spacing: float = 3.0
    # landmarks are kept at least this far (horizontally) from the keep-out path
    keepout_radius: float = 8.0
    keepout_path: Optional[tuple] = None  # sequence of (x, y) vertices
    seed: int = 0


@dataclass
class Scene:
    centers: np.ndarray
    sizes: np.ndarray
    normals: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    box: tuple
    seed: int

    def __len__(self):
        return len(self.centers)

    @property
    def areas(self):
        return self.sizes ** 2


@dataclass
class Trajectory:
    poses: list
    frame_period: float = 0.1
    speeds: np.ndarray = field(default_factory=lambda: np.zeros(0))  # meters per frame

    def __len__(self):
        return len(self.poses)


def _plane_axes(normals):
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    u = np.cross(normals, helper)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normals, u)
    return u, v


def _path_distance(xy, path):
    """Horizontal distance from points to a polyline."""
    path = np.asarray(path, dtype=np.float64)
    if len(path) == 1:
        return np.linalg.norm(xy - path[0], axis=1)
    a, b = path[:-1], path[1:]
    ab = b - a
    t = np.einsum("nsk,sk->ns", xy[:, None, :] - a[None], ab) / np.maximum(np.einsum("sk,sk->s", ab, ab), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(xy[:, None, :] - proj, axis=2).min(axis=1)


def generate_scene(config: SceneConfig = SceneConfig()) -> Scene:
    """Scatter patches uniformly in the box by dart throwing with a minimum spacing."""
    (x0, x1), (y0, y1), (z0, z1) = config.box
    if not (x1 > x0 and y1 > y0 and z1 >= z0):
        raise ValueError("scene box must have positive extent")
    rng = np.random.default_rng(config.seed)
    n = config.n_landmarks
    cell = max(config.min_spacing, 1e-6)
    grid: dict = {}
    centers = []
    path = None if config.keepout_path is None else np.asarray(config.keepout_path, dtype=np.float64)
    attempts = 0
    max_attempts = 200 * max(n, 1)
    while len(centers) < n:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(f"could not place {n} landmarks with spacing {config.min_spacing}")
        batch = rng.uniform((x0, y0, z0), (x1, y1, z1), size=(256, 3))
        if path is not None:
            batch = batch[_path_distance(batch[:, :2], path) >= config.keepout_radius]
        for c in batch:
            if len(centers) == n:
                break
            key = tuple((c // cell).astype(int))
            ok = True
            if config.min_spacing > 0:
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dz in (-1, 0, 1):
                            for other in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                                if np.sum((other - c) ** 2) < config.min_spacing ** 2:
                                    ok = False
                                    break
                            if not ok:
                                break
                        if not ok:
                            break
                    if not ok:
                        break
            if ok:
                grid.setdefault(key, []).append(c)
                centers.append(c)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    normals = rng.normal(size=(len(centers), 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    u, v = _plane_axes(normals) if len(centers) else (np.zeros((0, 3)), np.zeros((0, 3)))
    sizes = rng.uniform(*config.size_range, size=len(centers))
    return Scene(centers, sizes, normals, u, v, config.box, config.seed)


def expected_counts(scene: Scene, sensor_position, model: DensityModel) -> np.ndarray:
    d = np.linalg.norm(scene.centers - np.asarray(sensor_position, dtype=np.float64), axis=1)
    return model.density(d) * scene.areas


def scan(scene: Scene, sensor_pose: Pose, model: DensityModel = DensityModel(), seed: int = 0,
         frame: int = 0) -> PointCloud:
    """Sample one sweep; points are returned in the sensor frame.

    ``sensor_pose`` maps sensor coordinates to world coordinates. The random
    stream is keyed by ``(seed, frame)``.
    """
    rng = np.random.default_rng([seed, frame])
    lam = expected_counts(scene, sensor_pose.translation, model)
    counts = rng.poisson(lam)
    owner = np.repeat(np.arange(len(scene)), counts)
    m = len(owner)
    uv = rng.uniform(-0.5, 0.5, size=(m, 2)) * scene.sizes[owner, None]
    pts = (scene.centers[owner] + uv[:, :1] * scene.axis_u[owner] + uv[:, 1:] * scene.axis_v[owner]
           + rng.normal(scale=model.jitter, size=(m, 3)))
    rel = pts - sensor_pose.translation
    rng_d = np.linalg.norm(rel, axis=1)
    keep = (rng_d >= model.min_range) & (rng_d <= model.max_range)
    local = rel[keep] @ sensor_pose.rotation
    # stored clouds are float32; round here so a write/read round trip is exact
    return PointCloud(local.astype(np.float32).astype(np.float64), frame)


def delta_density(p, old_center, new_center, alpha: float) -> float:
    """Change of scan density at ``p`` when the sensor moves from ``old_center`` to ``new_center``."""
    p = np.asarray(p, dtype=np.float64)
    d_old = float(np.sum((p - np.asarray(old_center, dtype=np.float64)) ** 2))
    d_new = float(np.sum((p - np.asarray(new_center, dtype=np.float64)) ** 2))
    if d_old == 0.0 or d_new == 0.0:
        raise CoincidentPoint("point coincides with a sensor center")
    return alpha / d_new - alpha / d_old


def generate_trajectory(n_frames: int, speed: float = 1.7, max_yaw_rate_deg: float = 0.8,
                        yaw_noise_deg: float = 0.25, sensor_height: float = 1.73, seed: int = 0,
                        frame_period: float = 0.1, max_step: float = 5.0) -> Trajectory:
    """Planar drive at constant speed with a bounded, randomly wandering yaw rate."""
    if n_frames < 1:
        raise ValueError("trajectory needs at least one frame")
    if speed > max_step:
        raise ValueError(f"speed {speed} m/frame exceeds max_step {max_step}")
    rng = np.random.default_rng(seed)
    pos = np.array([0.0, 0.0, sensor_height])
    heading = 0.0
    rate = 0.0
    lim = math.radians(max_yaw_rate_deg)
    poses = [Pose(rot_z(heading), pos.copy())]
    for _ in range(n_frames - 1):
        if lim > 0:
            rate = float(np.clip(rate + rng.normal(scale=math.radians(yaw_noise_deg)), -lim, lim))
        heading += rate
        pos = pos + speed * np.array([math.cos(heading), math.sin(heading), 0.0])
        poses.append(Pose(rot_z(heading), pos.copy()))
    return Trajectory(poses, frame_period, np.full(n_frames - 1, float(speed)))


def path_of(trajectory: Trajectory) -> tuple:
    return tuple((float(p.translation[0]), float(p.translation[1])) for p in trajectory.poses)


def street_scene(trajectory: Trajectory, landmark_density: float = 0.0214, margin: float = 110.0,
                 seed: int = 0, **overrides) -> Scene:
    """Scene whose box surrounds ``trajectory`` by ``margin`` meters, landmarks kept off the road.

    ``landmark_density`` is landmarks per square meter of ground area;
    ``overrides`` replace other SceneConfig fields.
    """
    xy = np.array(path_of(trajectory))
    lo, hi = xy.min(axis=0) - margin, xy.max(axis=0) + margin
    cfg = SceneConfig(n_landmarks=int(round(landmark_density * float(np.prod(hi - lo)))),
                      box=((lo[0], hi[0]), (lo[1], hi[1]), SceneConfig.box[2]),
                      keepout_path=path_of(trajectory), seed=seed)
    return generate_scene(replace(cfg, **overrides))


def emit_sequence(scene: Scene, trajectory: Trajectory, model: DensityModel, out_dir, seed: int = 0) -> Path:
    """Write ``NNNNNN.bin`` per frame and a pose file (sensor-to-world, 3x4 rows)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create sequence directory {out}: {exc}") from exc
    for i, pose in enumerate(trajectory.poses):
        cloud = scan(scene, pose, model, seed=seed, frame=i)
        write_cloud(out / f"{i:06d}.bin", cloud.points)
    write_poses(out / POSE_FILE, trajectory.poses)
    return out


def relative_pose(world_src: Pose, world_dst: Pose) -> Pose:
    """Pose taking source-frame points into the target frame."""
    return compose(world_src, inverse(world_dst))


def plant_correspondences(scene: Scene, pose_a: Pose, pose_b: Pose, model: DensityModel,
                          rng: np.random.Generator, tolerance: float = 1.0):
    """Build a labelled correspondence set whose errors follow the density model.

    One candidate per patch visible from both sensors. With ``D`` the sensor
    displacement, a candidate is matched correctly with probability
    ``exp(-D**2 * |delta_sigma| / (alpha * tolerance))``; otherwise it is paired
    with a random other patch. Returns ``(cloud_a, cloud_b, corr, is_true)``.
    """
    ca, cb = pose_a.translation, pose_b.translation
    da = np.linalg.norm(scene.centers - ca, axis=1)
    db = np.linalg.norm(scene.centers - cb, axis=1)
    vis = np.flatnonzero((model.density(da) > 0) & (model.density(db) > 0))
    disp2 = float(np.sum((cb - ca) ** 2))
    dsig = np.abs(model.alpha / db[vis] ** 2 - model.alpha / da[vis] ** 2)
    p_true = np.exp(-disp2 * dsig / (model.alpha * tolerance))
    is_true = rng.random(len(vis)) < p_true
    target = np.arange(len(vis))
    n_false = int((~is_true).sum())
    if n_false and len(vis) > 1:
        wrong = rng.integers(0, len(vis) - 1, size=n_false)
        own = target[~is_true]
        wrong = wrong + (wrong >= own)
        target[~is_true] = wrong
    else:
        is_true[:] = True
    world = scene.centers[vis]
    a = PointCloud((world - ca) @ pose_a.rotation)
    b = PointCloud((world - cb) @ pose_b.rotation)
    corr = Correspondences(np.stack([np.arange(len(vis)), target], axis=1))
    return a, b, corr, is_true
