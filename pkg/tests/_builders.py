"""Shared synthetic instances for registration tests."""

import numpy as np

from distreg.geom import apply_pose, random_pose


def planted_instance(rng, n=100, n_inliers=20, extent=50.0, noise=0.0):
    """``n`` correspondences, the first ``n_inliers`` exact under a random pose, the rest uniform outliers."""
    pose = random_pose(rng, translation_scale=extent / 5)
    src = rng.uniform(-extent / 2, extent / 2, size=(n, 3))
    dst = apply_pose(src, pose)
    dst[:n_inliers] += rng.normal(scale=noise, size=(n_inliers, 3)) if noise else 0.0
    dst[n_inliers:] = rng.uniform(-extent / 2, extent / 2, size=(n - n_inliers, 3))
    perm = rng.permutation(n)
    inlier = np.zeros(n, dtype=bool)
    inlier[:n_inliers] = True
    corr = np.stack([np.arange(n), np.arange(n)], axis=1)
    return src[perm], dst[perm], corr, inlier[perm], pose


def street_frames(n_frames, seed=0, frames=None, alpha=None, **scene_overrides):
    """Simulated street scans in memory: returns ``(clouds, trajectory)`` for the requested frame indices."""
    from distreg.lidar_sim import DensityModel, generate_trajectory, scan, street_scene

    traj = generate_trajectory(n_frames, seed=seed)
    scene = street_scene(traj, seed=seed, **scene_overrides)
    model = DensityModel() if alpha is None else DensityModel(alpha=alpha)
    idx = range(n_frames) if frames is None else frames
    return {i: scan(scene, traj.poses[i], model, seed=seed, frame=i).points for i in idx}, traj


# Small patches and a dense sensor: nearest neighbors under the true pose land on the same surface.
CLEAN_SCENE = dict(alpha=2e5, size_range=(0.08, 0.18), min_spacing=2.5, keepout_radius=4.0)
