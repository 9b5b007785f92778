"""Robust pose estimation from putative correspondences.

``register`` follows the second-order spatial compatibility scheme: binary
length-consistency between correspondence pairs, a count of commonly
compatible correspondences on top of it, spectral seeding and weighted SVD
hypotheses. ``ransac_register`` is the classical 3-point baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .correspondence import as_pairs
from .errors import DegenerateConfiguration, RegistrationFailed, TooFewCorrespondences
from .geom import Pose, _as_points, fit_pose_weighted


@dataclass(frozen=True)
class RegistrarConfig:
    comp_thresh: float = 0.6  # meters, length-difference test
    num_seeds: int = 10
    power_iters: int = 20
    inlier_thresh: float = 0.6  # meters, hypothesis scoring
    max_corrs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.comp_thresh, self.inlier_thresh) <= 0 or min(self.num_seeds, self.power_iters, self.max_corrs) < 1:
            raise ValueError("registrar parameters must be positive")


class RegistrationOutput(NamedTuple):
    pose: Pose
    inlier_mask: np.ndarray
    confidence: int


def _endpoints(corr, src, dst):
    pairs = as_pairs(corr)
    return _as_points(src)[pairs[:, 0]], _as_points(dst)[pairs[:, 1]]


def first_order(corr, src, dst, comp_thresh: float = 0.6) -> np.ndarray:
    """Binary compatibility: 1 where the pairwise length difference is below ``comp_thresh``."""
    p, q = _endpoints(corr, src, dst)
    if len(p) < 2:
        raise TooFewCorrespondences(f"need at least 2 correspondences, got {len(p)}")
    diff = np.abs(cdist(p, p) - cdist(q, q))
    m = (diff < comp_thresh).astype(np.float32)
    np.fill_diagonal(m, 0.0)
    return m


def sc2(binary: np.ndarray) -> np.ndarray:
    """Second-order compatibility ``M * (M @ M)``: common compatible neighbors of compatible pairs."""
    m = np.asarray(binary, dtype=np.float32)
    # float32 products of 0/1 matrices stay exact well beyond any |C| used here
    return m * (m @ m)


def leading_eigenvector(matrix: np.ndarray, iters: int = 20, tol: float = 0.0) -> np.ndarray:
    """Power iteration from the all-ones vector; returns a unit vector."""
    a = np.asarray(matrix, dtype=np.float64)
    v = np.ones(a.shape[0]) / np.sqrt(a.shape[0])
    for _ in range(iters):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        w /= norm
        done = np.linalg.norm(w - v) <= tol
        v = w
        if done:
            break
    return v


def _select_seeds(scores: np.ndarray, binary: np.ndarray, num_seeds: int) -> list:
    seeds = []
    for idx in np.argsort(-scores, kind="stable"):
        if len(seeds) == num_seeds:
            break
        if seeds and binary[idx, seeds].any():
            continue
        seeds.append(int(idx))
    return seeds


def _count_inliers(poses, p, q, thresh):
    counts = []
    for pose in poses:
        resid = np.linalg.norm(p @ pose.rotation.T + pose.translation - q, axis=1)
        counts.append(int(np.count_nonzero(resid < thresh)))
    return np.asarray(counts)


def _inlier_mask(pose, p, q, thresh):
    return np.linalg.norm(p @ pose.rotation.T + pose.translation - q, axis=1) < thresh


def register(corr, src, dst, cfg: RegistrarConfig = RegistrarConfig()) -> RegistrationOutput:
    pairs = as_pairs(corr)
    if len(pairs) < 3:
        raise TooFewCorrespondences(f"need at least 3 correspondences, got {len(pairs)}")
    p_all, q_all = _endpoints(pairs, src, dst)

    sel = np.arange(len(pairs))
    if len(pairs) > cfg.max_corrs:
        rng = np.random.default_rng(cfg.seed)
        sel = np.sort(rng.choice(len(pairs), cfg.max_corrs, replace=False))
    p, q = p_all[sel], q_all[sel]

    binary = first_order(pairs[sel], src, dst, cfg.comp_thresh)
    scores2 = sc2(binary)
    lead = leading_eigenvector(scores2, cfg.power_iters)
    seeds = _select_seeds(lead, binary, cfg.num_seeds)

    hypotheses = []
    for s in seeds:
        nbrs = np.flatnonzero(scores2[s] > 0)
        if len(nbrs) < 2:
            continue
        idx = np.concatenate(([s], nbrs))
        w = np.concatenate(([scores2[s].max()], scores2[s, nbrs])).astype(np.float64)
        try:
            hypotheses.append(fit_pose_weighted(p[idx], q[idx], w))
        except DegenerateConfiguration:
            continue
    if not hypotheses:
        raise RegistrationFailed("no seed produced a valid hypothesis")

    counts = _count_inliers(hypotheses, p, q, cfg.inlier_thresh)
    best_i = int(np.argmax(counts))
    best, best_count = hypotheses[best_i], int(counts[best_i])
    if best_count < 3:
        raise RegistrationFailed(f"best hypothesis has {best_count} inliers")

    inl = _inlier_mask(best, p, q, cfg.inlier_thresh)
    try:
        refined = fit_pose_weighted(p[inl], q[inl])
        if _count_inliers([refined], p, q, cfg.inlier_thresh)[0] >= best_count:
            best = refined
    except DegenerateConfiguration:
        pass

    mask = _inlier_mask(best, p_all, q_all, cfg.inlier_thresh)
    return RegistrationOutput(best, mask, int(mask.sum()))


def _batched_kabsch(a: np.ndarray, b: np.ndarray):
    """Unweighted rigid fits for stacks of 3-point samples, shapes (h, 3, 3)."""
    ma = a.mean(axis=1, keepdims=True)
    mb = b.mean(axis=1, keepdims=True)
    h = np.einsum("hni,hnj->hij", a - ma, b - mb)
    u, _, vt = np.linalg.svd(h)
    v = np.transpose(vt, (0, 2, 1))
    ut = np.transpose(u, (0, 2, 1))
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    fix = np.ones((len(a), 3))
    fix[:, 2] = d
    r = v @ (fix[:, :, None] * ut)
    t = mb[:, 0, :] - np.einsum("hij,hj->hi", r, ma[:, 0, :])
    return r, t


def ransac_register(corr, src, dst, iters: int = 10000, inlier_thresh: float = 0.6,
                    rng: np.random.Generator | None = None, chunk: int = 2048) -> RegistrationOutput:
    pairs = as_pairs(corr)
    n = len(pairs)
    if n < 3:
        raise TooFewCorrespondences(f"need at least 3 correspondences, got {n}")
    rng = np.random.default_rng(0) if rng is None else rng
    p, q = _endpoints(pairs, src, dst)

    best_count, best_pose = -1, None
    remaining = iters
    while remaining > 0:
        h = min(chunk, remaining)
        remaining -= h
        idx = rng.integers(0, n, size=(h, 3))
        bad = (idx[:, 0] == idx[:, 1]) | (idx[:, 0] == idx[:, 2]) | (idx[:, 1] == idx[:, 2])
        while bad.any():
            idx[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))
            bad = (idx[:, 0] == idx[:, 1]) | (idx[:, 0] == idx[:, 2]) | (idx[:, 1] == idx[:, 2])
        r, t = _batched_kabsch(p[idx], q[idx])
        pred = np.einsum("hij,nj->hni", r, p) + t[:, None, :]
        counts = np.count_nonzero(np.linalg.norm(pred - q[None], axis=2) < inlier_thresh, axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_pose = int(counts[k]), Pose(r[k], t[k])

    if best_count < 3:
        raise RegistrationFailed(f"best RANSAC hypothesis has {best_count} inliers")
    inl = _inlier_mask(best_pose, p, q, inlier_thresh)
    try:
        refined = fit_pose_weighted(p[inl], q[inl])
        if _inlier_mask(refined, p, q, inlier_thresh).sum() >= best_count:
            best_pose = refined
    except DegenerateConfiguration:
        pass
    mask = _inlier_mask(best_pose, p, q, inlier_thresh)
    return RegistrationOutput(best_pose, mask, int(mask.sum()))
