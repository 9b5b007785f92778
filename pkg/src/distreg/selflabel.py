"""Label generation: labeler/student synchronization, correspondence filtering,
speculative registration and correspondence rediscovery."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .correspondence import Correspondences, as_pairs
from .errors import (AllFiltered, InsufficientData, MalformedFile,
                     RegistrationFailed, ShapeMismatch, SingleCandidate, SkipPair,
                     TooFewCorrespondences)
from .features import DESC_RADIUS, EmbeddingParams, describe, embed, match_features
from .geom import Pose, _as_points, apply_pose
from .scpcr import RegistrarConfig, register


@dataclass(frozen=True)
class EmaConfig:
    decay: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")


def ema_update(labeler: EmbeddingParams, student: EmbeddingParams, cfg: EmaConfig = EmaConfig()) -> EmbeddingParams:
    """New labeler ``decay * labeler + (1 - decay) * student``."""
    if labeler.weight.shape != student.weight.shape or labeler.bias.shape != student.bias.shape:
        raise ShapeMismatch(f"labeler {labeler.weight.shape} vs student {student.weight.shape}")
    lam = cfg.decay
    return EmbeddingParams(lam * labeler.weight + (1.0 - lam) * student.weight,
                           lam * labeler.bias + (1.0 - lam) * student.bias)


def lowe_weights(f_s, f_t, corr, mode: str = "distance", chunk: int = 2048) -> np.ndarray:
    """Distinctiveness of each correspondence.

    ``mode="distance"``: ``1 - d(i, j) / min_{k != j} d(i, k)`` on Euclidean
    feature distances, 0 when both distances vanish.
    ``mode="similarity"``: the same ratio taken on cosine similarities.
    """
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    if len(f_t) < 2:
        raise SingleCandidate("need at least two target features")
    if mode not in ("distance", "similarity"):
        raise ValueError(f"unknown lowe mode {mode!r}")
    pairs = as_pairs(corr)
    out = np.empty(len(pairs))
    for s in range(0, len(pairs), chunk):
        i, j = pairs[s:s + chunk, 0], pairs[s:s + chunk, 1]
        sim = f_s[i] @ f_t.T
        rows = np.arange(len(i))
        if mode == "distance":
            vals = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
            own = vals[rows, j].copy()
            vals[rows, j] = np.inf
            other = vals.min(axis=1)
        else:
            own = sim[rows, j].copy()
            sim[rows, j] = np.inf
            other = sim.min(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = 1.0 - own / other
        w[other == 0] = 0.0
        out[s:s + chunk] = w
    return out


class SimilarityMap:
    """Mean labeler similarity of true correspondences binned by distance to both sensors."""

    def __init__(self, bin_width: float = 2.0, max_range: float = 100.0):
        self.bin_width = float(bin_width)
        self.max_range = float(max_range)
        nb = int(math.ceil(max_range / bin_width))
        self.sums = np.zeros((nb, nb))
        self.counts = np.zeros((nb, nb), dtype=np.int64)

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    def cell(self, d1, d2):
        b1 = np.clip((np.asarray(d1, dtype=np.float64) // self.bin_width).astype(np.int64), 0, self.n_bins - 1)
        b2 = np.clip((np.asarray(d2, dtype=np.float64) // self.bin_width).astype(np.int64), 0, self.n_bins - 1)
        return b1, b2

    def add(self, d1, d2, sims) -> None:
        b1, b2 = self.cell(d1, d2)
        np.add.at(self.sums, (b1, b2), np.asarray(sims, dtype=np.float64))
        np.add.at(self.counts, (b1, b2), 1)

    def filled(self) -> np.ndarray:
        """Per-cell mean where empty cells take the nearest populated cell (Manhattan, lowest index on ties)."""
        pop = np.argwhere(self.counts > 0)
        if len(pop) == 0:
            raise InsufficientData("similarity map has no populated cell")
        mean = self.mean
        g1, g2 = np.indices(self.counts.shape)
        cells = np.stack([g1.ravel(), g2.ravel()], axis=1)
        dist = np.abs(cells[:, None, :] - pop[None, :, :]).sum(axis=2)
        nearest = pop[np.argmin(dist, axis=1)]  # argwhere order is row-major, so ties pick the lowest index
        return mean[nearest[:, 0], nearest[:, 1]].reshape(self.counts.shape)

    def lookup(self, d1, d2) -> np.ndarray:
        b1, b2 = self.cell(d1, d2)
        return self.filled()[b1, b2]

    def to_csv(self, path) -> None:
        mean = self.mean
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["d1_bin", "d2_bin", "mean_sim", "count"])
            for b1, b2 in np.argwhere(self.counts > 0):
                w.writerow([f"{b1 * self.bin_width:g}", f"{b2 * self.bin_width:g}",
                            repr(float(mean[b1, b2])), int(self.counts[b1, b2])])

    @classmethod
    def from_csv(cls, path, bin_width: float = 2.0, max_range: float = 100.0) -> "SimilarityMap":
        m = cls(bin_width, max_range)
        offset = 0
        with open(path, "rb") as fh:
            header = fh.readline()
            if header.decode("ascii", "replace").strip().split(",") != ["d1_bin", "d2_bin", "mean_sim", "count"]:
                raise MalformedFile(path, 0, "bad header")
            offset = len(header)
            for raw in fh:
                line = raw.decode("ascii", "replace").strip()
                if line:
                    try:
                        d1, d2, mean, count = line.split(",")
                        b1, b2 = m.cell(float(d1) + 1e-9, float(d2) + 1e-9)
                        c = int(count)
                        m.counts[b1, b2] = c
                        m.sums[b1, b2] = float(mean) * c
                    except ValueError:
                        raise MalformedFile(path, offset, "bad row") from None
                offset += len(raw)
        return m


@dataclass(frozen=True)
class FilterConfig:
    mode: str = "hard"  # none | hard | adaptive
    d_thresh: float = 40.0
    s_thresh: float = 0.6
    lowe_enabled: bool = False
    lowe_thresh: float = 0.05
    lowe_mode: str = "distance"

    def __post_init__(self):
        if self.mode not in ("none", "hard", "adaptive"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if self.d_thresh < 0 or not 0.0 <= self.s_thresh <= 1.0:
            raise ValueError("need d_thresh >= 0 and s_thresh in [0, 1]")


def spatial_filter(corr, src, dst, cfg: FilterConfig, sim_map: Optional[SimilarityMap] = None):
    """Drop correspondences close to either sensor.

    hard: keep iff ``min(|p|, |q|) >= d_thresh``; adaptive: keep iff the map's
    mean similarity at ``(|p|, |q|)`` exceeds ``s_thresh``. Returns the kept
    correspondences and a diagnostics dict.
    """
    corr = corr if isinstance(corr, Correspondences) else Correspondences(corr)
    if cfg.mode == "adaptive" and sim_map is None:
        raise ValueError("adaptive filtering needs a similarity map")
    d1 = np.linalg.norm(_as_points(src)[corr.src], axis=1)
    d2 = np.linalg.norm(_as_points(dst)[corr.dst], axis=1)
    if cfg.mode == "none":
        keep = np.ones(len(corr), dtype=bool)
    elif cfg.mode == "hard":
        keep = np.minimum(d1, d2) >= cfg.d_thresh
    else:
        keep = sim_map.lookup(d1, d2) > cfg.s_thresh
    out = corr.subset(keep)
    diag = {"kept": int(keep.sum()), "dropped": int(len(keep) - keep.sum())}
    if len(out) == 0:
        raise AllFiltered(f"{cfg.mode} filter removed all {len(corr)} correspondences")
    return out, diag


def _nearest(tree: cKDTree, pts: np.ndarray, ref: np.ndarray):
    """Nearest neighbor with ties broken toward the lowest index."""
    k = min(2, len(ref))
    d, j = tree.query(pts, k=k)
    if k == 1:
        return d, j
    tie = d[:, 1] == d[:, 0]
    best_d, best_j = d[:, 0], j[:, 0].copy()
    if np.any(tie):
        for r in np.flatnonzero(tie):
            cand = tree.query_ball_point(pts[r], best_d[r] * (1 + 1e-12) + 1e-300)
            cand = [c for c in cand if np.linalg.norm(ref[c] - pts[r]) == best_d[r]]
            best_j[r] = min(cand) if cand else best_j[r]
    return best_d, best_j


def rediscover(src, dst, est_pose: Pose, beta_inlier: float = 2.0):
    """Nearest-neighbor correspondences after aligning ``src`` with ``est_pose``.

    ``c_st`` holds ``(i, j)`` with ``j`` the target point nearest to the
    transformed source point ``i``; ``c_ts`` holds ``(j, i)`` built the other
    way. Only pairs closer than ``beta_inlier`` are kept.
    """
    s = apply_pose(_as_points(src), est_pose)
    t = _as_points(dst)
    empty = np.zeros((0, 2), dtype=np.int64)
    if len(s) == 0 or len(t) == 0:
        return empty, empty.copy()
    d, j = _nearest(cKDTree(t), s, t)
    keep = d < beta_inlier
    c_st = np.stack([np.flatnonzero(keep), j[keep]], axis=1).astype(np.int64)
    d, i = _nearest(cKDTree(s), t, s)
    keep = d < beta_inlier
    c_ts = np.stack([np.flatnonzero(keep), i[keep]], axis=1).astype(np.int64)
    return c_st, c_ts


@dataclass
class LabelSet:
    c_st: np.ndarray
    c_ts: np.ndarray
    est_pose: Pose
    diagnostics: dict = field(default_factory=dict)
    filtered: Optional[Correspondences] = None


def generate_labels(src, dst, labeler: EmbeddingParams, interval: int, cfg: FilterConfig = FilterConfig(),
                    sim_map: Optional[SimilarityMap] = None, registrar: Optional[Callable] = None,
                    beta_inlier: float = 2.0, desc_src=None, desc_dst=None, radius: float = DESC_RADIUS) -> LabelSet:
    """Correspondence labels for one pair without any ground truth.

    Interval 1 uses the identity pose directly. Otherwise labeler features are
    matched, optionally Lowe-filtered, spatially filtered, registered, and the
    resulting pose drives rediscovery. Failures surface as SkipPair.
    """
    src_pts, dst_pts = _as_points(src), _as_points(dst)
    diag = {"interval": int(interval)}
    if interval == 1:
        pose = Pose.identity()
        c_st, c_ts = rediscover(src_pts, dst_pts, pose, beta_inlier)
        diag.update(c_st=len(c_st), c_ts=len(c_ts))
        if len(c_st) == 0 and len(c_ts) == 0:
            raise SkipPair("identity rediscovery found no pairs", "rediscover")
        return LabelSet(c_st, c_ts, pose, diag)

    registrar = registrar or partial(register, cfg=RegistrarConfig())
    if desc_src is None:
        desc_src = describe(src_pts, radius)
    if desc_dst is None:
        desc_dst = describe(dst_pts, radius)
    if len(src_pts) == 0 or len(dst_pts) == 0:
        raise SkipPair("empty cloud", "match")
    f_s = embed(desc_src, labeler)
    f_t = embed(desc_dst, labeler)
    corr = match_features(f_s, f_t)
    diag["matched"] = len(corr)
    if cfg.lowe_enabled:
        try:
            w = lowe_weights(f_s, f_t, corr, cfg.lowe_mode)
        except SingleCandidate as exc:
            raise SkipPair(str(exc), "lowe") from exc
        corr = corr.subset(w > cfg.lowe_thresh)
        diag["lowe_kept"] = len(corr)
        if len(corr) == 0:
            raise SkipPair("Lowe filter removed everything", "lowe")
    try:
        corr, fdiag = spatial_filter(corr, src_pts, dst_pts, cfg, sim_map)
    except AllFiltered as exc:
        raise SkipPair(str(exc), "spatial") from exc
    diag["spatial_kept"] = fdiag["kept"]
    try:
        reg = registrar(corr, src_pts, dst_pts)
    except (RegistrationFailed, TooFewCorrespondences) as exc:
        raise SkipPair(str(exc), "register") from exc
    diag["reg_inliers"] = int(reg.confidence)
    c_st, c_ts = rediscover(src_pts, dst_pts, reg.pose, beta_inlier)
    diag.update(c_st=len(c_st), c_ts=len(c_ts))
    if len(c_st) == 0 and len(c_ts) == 0:
        raise SkipPair("rediscovery found no pairs", "rediscover")
    return LabelSet(c_st, c_ts, reg.pose, diag, corr)


def ground_truth_correspondences(src, dst, true_pose: Pose, tolerance: float):
    """``(i, j)`` pairs whose transformed source point has its nearest target within ``tolerance``."""
    c_st, _ = rediscover(src, dst, true_pose, tolerance)
    return c_st


def build_similarity_map(stores: Sequence, labeler: EmbeddingParams, pairs: Sequence, tolerance: float = 0.3,
                         radius: float = DESC_RADIUS, bin_width: float = 2.0, max_range: float = 100.0,
                         descriptor_cache: Optional[dict] = None) -> SimilarityMap:
    """Record labeler cosine similarity of ground-truth correspondences per ``(d1, d2)`` cell.

    ``pairs`` are PairSample objects carrying true poses; ``stores`` are the
    labelled sequences they index into.
    """
    cache = {} if descriptor_cache is None else descriptor_cache
    sim_map = SimilarityMap(bin_width, max_range)

    def feats(k, i):
        key = (k, i)
        if key not in cache:
            cache[key] = describe(stores[k].load(i), radius)
        return embed(cache[key], labeler)

    for pair in pairs:
        if pair.true_pose is None:
            raise ValueError("similarity map needs pairs with ground-truth poses")
        store = stores[pair.sequence]
        src = store.load(pair.src_frame).points
        dst = store.load(pair.dst_frame).points
        c = ground_truth_correspondences(src, dst, pair.true_pose, tolerance)
        if len(c) == 0:
            continue
        f_s = feats(pair.sequence, pair.src_frame)
        f_t = feats(pair.sequence, pair.dst_frame)
        sims = np.sum(f_s[c[:, 0]] * f_t[c[:, 1]], axis=1)
        sim_map.add(np.linalg.norm(src[c[:, 0]], axis=1), np.linalg.norm(dst[c[:, 1]], axis=1), sims)
    if not sim_map.counts.any():
        raise InsufficientData("no ground-truth correspondences recorded")
    return sim_map
