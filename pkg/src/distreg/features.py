"""Per-point features: a handcrafted local descriptor followed by a trainable
linear embedding, cosine matching, and the hardest-contrastive objective."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .correspondence import Correspondences, as_pairs
from .errors import EmptyCorrespondences, MalformedFile, ShapeMismatch
from .geom import _as_points

DESC_DIM = 16
HEIGHT_SCALE = 5.0  # meters
DESC_RADIUS = 4.0  # meters

DESCRIPTOR_NAMES = (
    "log_density", "mean_nbr_dist", "eig1", "eig2", "eig3", "linearity", "planarity",
    "scattering", "verticality", "height", "extent1", "extent2", "centroid_dz",
    "centroid_dxy", "z_range", "z_std",
)


def describe(cloud, radius: float = DESC_RADIUS) -> np.ndarray:
    """One 16-dim descriptor per point from its ``radius`` neighborhood.

    The neighborhood includes the point itself. Everything except the height
    channel is invariant to horizontal translation and yaw. Neighborhoods with
    fewer than three points get the isotropic eigenvalue default.
    """
    pts = _as_points(cloud)
    n = len(pts)
    out = np.zeros((n, DESC_DIM))
    if n == 0:
        return out
    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    ii = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
    jj = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])

    size = np.bincount(ii, minlength=n).astype(np.float64)  # includes self
    nbrs = size - 1.0
    rel = pts[jj] - pts[ii]
    dist = np.linalg.norm(rel, axis=1)
    mean_rel = np.stack([np.bincount(ii, rel[:, k], minlength=n) for k in range(3)], axis=1) / size[:, None]
    second = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(ii, rel[:, a] * rel[:, b], minlength=n) / size
            second[:, a, b] = second[:, b, a] = s
    cov = second - mean_rel[:, :, None] * mean_rel[:, None, :]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)  # descending
    normal = evecs[:, :, 0]

    total = evals.sum(axis=1)
    ok = (size >= 3) & (total > 0)
    safe_total = np.where(ok, total, 1.0)
    l1 = np.where(ok, evals[:, 0], 1.0)
    ratios = np.where(ok[:, None], evals / safe_total[:, None], 1.0 / 3.0)

    out[:, 0] = np.log1p(nbrs)
    sum_d = np.bincount(ii, dist, minlength=n)
    out[:, 1] = np.where(nbrs > 0, sum_d / np.maximum(nbrs, 1.0), 0.0) / radius
    out[:, 2:5] = ratios
    out[:, 5] = np.where(ok, (evals[:, 0] - evals[:, 1]) / l1, 0.0)
    out[:, 6] = np.where(ok, (evals[:, 1] - evals[:, 2]) / l1, 0.0)
    out[:, 7] = np.where(ok, evals[:, 2] / l1, 1.0)
    out[:, 8] = np.where(ok, np.abs(normal[:, 2]), 0.0)
    out[:, 9] = pts[:, 2] / HEIGHT_SCALE
    out[:, 10] = np.where(ok, np.sqrt(evals[:, 0]), 0.0) / radius
    out[:, 11] = np.where(ok, np.sqrt(evals[:, 1]), 0.0) / radius
    out[:, 12] = mean_rel[:, 2] / radius
    out[:, 13] = np.linalg.norm(mean_rel[:, :2], axis=1) / radius
    zmax = np.full(n, -np.inf)
    zmin = np.full(n, np.inf)
    np.maximum.at(zmax, ii, rel[:, 2])
    np.minimum.at(zmin, ii, rel[:, 2])
    out[:, 14] = (zmax - zmin) / radius
    out[:, 15] = np.sqrt(np.clip(cov[:, 2, 2], 0.0, None)) / radius
    return out


@dataclass
class EmbeddingParams:
    weight: np.ndarray  # (k, DESC_DIM)
    bias: np.ndarray  # (k,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[0] != len(self.bias):
            raise ShapeMismatch(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    @property
    def shape(self):
        return self.weight.shape

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(self.weight.copy(), self.bias.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    @classmethod
    def from_flat(cls, vec, k: int, d: int = DESC_DIM) -> "EmbeddingParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[: k * d].reshape(k, d).copy(), vec[k * d:].copy())


def init_params(k: int = 32, rng: Optional[np.random.Generator] = None, scale: float = 1.0) -> EmbeddingParams:
    rng = np.random.default_rng(0) if rng is None else rng
    return EmbeddingParams(rng.normal(scale=scale / np.sqrt(DESC_DIM), size=(k, DESC_DIM)), np.zeros(k))


def _project(descs, params):
    descs = np.asarray(descs, dtype=np.float64)
    if descs.ndim != 2 or descs.shape[1] != params.weight.shape[1]:
        raise ShapeMismatch(f"descriptors {descs.shape} do not fit weight {params.weight.shape}")
    return descs @ params.weight.T + params.bias


def _normalize(u):
    norm = np.linalg.norm(u, axis=1)
    zero = norm == 0
    f = u / np.where(zero, 1.0, norm)[:, None]
    # zero pre-activations fall back to the first basis direction
    f[zero] = 0.0
    f[zero, 0] = 1.0
    return f, norm


def embed(descs, params: EmbeddingParams) -> np.ndarray:
    """Unit-norm feature rows ``normalize(W x + b)``."""
    f, _ = _normalize(_project(descs, params))
    return f


def match_features(f_src, f_dst, chunk: int = 4096) -> Correspondences:
    """Nearest target feature (max cosine similarity) for every source row; ties go to the lowest index."""
    f_src = np.asarray(f_src, dtype=np.float64)
    f_dst = np.asarray(f_dst, dtype=np.float64)
    if len(f_src) == 0 or len(f_dst) == 0:
        raise EmptyCorrespondences("cannot match an empty feature map")
    best = np.empty(len(f_src), dtype=np.int64)
    score = np.empty(len(f_src))
    for s in range(0, len(f_src), chunk):
        sim = f_src[s:s + chunk] @ f_dst.T
        j = np.argmax(sim, axis=1)
        best[s:s + chunk] = j
        score[s:s + chunk] = sim[np.arange(len(j)), j]
    return Correspondences(np.stack([np.arange(len(f_src)), best], axis=1), score)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    pool_size: int = 512
    lr: float = 0.001
    weight_decay: float = 1e-4
    max_positives: int = 1024  # anchors kept per direction; 0 keeps all

    def __post_init__(self):
        if self.margin <= 0 or self.pool_size < 2:
            raise ValueError("margin must be positive and pool_size >= 2")


def _direction(fa, fb, pairs, pool, margin, xyz_b=None, exclude_radius=0.0):
    """One directional sum of hardest-negative hinge terms and its feature gradients.

    Anchors ``fa[pairs[:, 0]]``, positives ``fb[pairs[:, 1]]``, negatives from
    ``fb[pool]`` excluding the positive index (and, when ``xyz_b`` is given,
    any pool point within ``exclude_radius`` of the positive).
    """
    a_idx, p_idx = pairs[:, 0], pairs[:, 1]
    fa_s, fp = fa[a_idx], fb[p_idx]
    fn = fb[pool]
    d_neg = np.maximum(np.sum(fa_s ** 2, axis=1)[:, None] + np.sum(fn ** 2, axis=1)[None, :] - 2.0 * fa_s @ fn.T, 0.0)
    banned = pool[None, :] == p_idx[:, None]
    if xyz_b is not None and exclude_radius > 0:
        gap = np.linalg.norm(xyz_b[p_idx][:, None, :] - xyz_b[pool][None, :, :], axis=2)
        banned |= gap < exclude_radius
    d_neg = np.where(banned, np.inf, d_neg)
    hard = np.argmin(d_neg, axis=1)
    d_hard = d_neg[np.arange(len(hard)), hard]
    valid = np.isfinite(d_hard)
    diff_p = fa_s - fp
    d_pos = np.sum(diff_p ** 2, axis=1)
    terms = np.where(valid, margin + d_pos - np.where(valid, d_hard, 0.0), 0.0)
    active = terms > 0
    fn_h = fn[hard]
    ga = np.zeros_like(fa)
    gb = np.zeros_like(fb)
    w = active.astype(np.float64)[:, None]
    # d/dfa (|fa-fp|^2 - |fa-fn|^2) = 2(fn - fp); d/dfp = -2(fa-fp); d/dfn = 2(fa-fn)
    np.add.at(ga, a_idx, w * 2.0 * (fn_h - fp))
    np.add.at(gb, p_idx, w * -2.0 * diff_p)
    np.add.at(gb, pool[hard], w * 2.0 * (fa_s - fn_h))
    return float(np.sum(np.maximum(terms, 0.0))), ga, gb


def hardest_contrastive_loss(f_s, f_t, c_st, c_ts, cfg: LossConfig = LossConfig(),
                             rng: Optional[np.random.Generator] = None, xyz_s=None, xyz_t=None,
                             exclude_radius: float = 0.0):
    """Bidirectional hardest-contrastive loss on unit features.

    ``c_st`` holds ``(i, j)`` pairs (anchor in S, positive in T); ``c_ts``
    holds ``(j, i)`` pairs (anchor in T, positive in S). Each direction is
    averaged over its pairs. Returns ``(loss, grad_f_s, grad_f_t)``, the
    gradients taken with the hardest negatives held fixed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    c_st, c_ts = as_pairs(c_st), as_pairs(c_ts)
    if len(c_st) == 0 and len(c_ts) == 0:
        raise EmptyCorrespondences("no positive pairs")
    if cfg.max_positives and len(c_st) > cfg.max_positives:
        c_st = c_st[np.sort(rng.choice(len(c_st), cfg.max_positives, replace=False))]
    if cfg.max_positives and len(c_ts) > cfg.max_positives:
        c_ts = c_ts[np.sort(rng.choice(len(c_ts), cfg.max_positives, replace=False))]
    pool_t = np.sort(rng.choice(len(f_t), min(cfg.pool_size, len(f_t)), replace=False))
    pool_s = np.sort(rng.choice(len(f_s), min(cfg.pool_size, len(f_s)), replace=False))

    loss = 0.0
    g_s = np.zeros_like(f_s)
    g_t = np.zeros_like(f_t)
    if len(c_st):
        l, ga, gb = _direction(f_s, f_t, c_st, pool_t, cfg.margin, xyz_t, exclude_radius)
        loss += l / len(c_st)
        g_s += ga / len(c_st)
        g_t += gb / len(c_st)
    if len(c_ts):
        l, ga, gb = _direction(f_t, f_s, c_ts, pool_s, cfg.margin, xyz_s, exclude_radius)
        loss += l / len(c_ts)
        g_t += ga / len(c_ts)
        g_s += gb / len(c_ts)
    return loss, g_s, g_t


def embedding_backward(descs, params: EmbeddingParams, grad_f) -> EmbeddingParams:
    """Chain a gradient on unit features back to ``W`` and ``b``."""
    u = _project(descs, params)
    f, norm = _normalize(u)
    live = norm > 0
    g = np.zeros_like(u)
    gf = np.asarray(grad_f, dtype=np.float64)
    # d f / d u = (I - f f^T) / |u|
    radial = np.sum(gf * f, axis=1, keepdims=True)
    g[live] = (gf[live] - radial[live] * f[live]) / norm[live, None]
    return EmbeddingParams(g.T @ np.asarray(descs, dtype=np.float64), g.sum(axis=0))


def loss_and_grad(params: EmbeddingParams, desc_s, desc_t, c_st, c_ts, cfg: LossConfig = LossConfig(),
                  rng: Optional[np.random.Generator] = None, **kw):
    """Loss of the student on one pair and its gradient with respect to the student parameters."""
    f_s = embed(desc_s, params)
    f_t = embed(desc_t, params)
    loss, g_s, g_t = hardest_contrastive_loss(f_s, f_t, c_st, c_ts, cfg, rng, **kw)
    gs = embedding_backward(desc_s, params, g_s)
    gt = embedding_backward(desc_t, params, g_t)
    return loss, EmbeddingParams(gs.weight + gt.weight, gs.bias + gt.bias)


def sgd_step(params: EmbeddingParams, grad: EmbeddingParams, cfg: LossConfig = LossConfig()) -> EmbeddingParams:
    """``params - lr * (grad + weight_decay * params)``."""
    if params.weight.shape != grad.weight.shape or params.bias.shape != grad.bias.shape:
        raise ShapeMismatch("gradient shape does not match parameters")
    lr, wd = cfg.lr, cfg.weight_decay
    return EmbeddingParams(params.weight - lr * (grad.weight + wd * params.weight),
                           params.bias - lr * (grad.bias + wd * params.bias))


CHECKPOINT_MAGIC = b"EYOC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, student: EmbeddingParams, labeler: EmbeddingParams) -> None:
    """Binary layout: magic, u32 version, u32 k, u32 descriptor width, then
    student weights (row-major) and bias, then labeler weights and bias, all
    little-endian float64."""
    if student.weight.shape != labeler.weight.shape:
        raise ShapeMismatch("student and labeler must share a shape")
    k, d = student.weight.shape
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, k, d))
        for p in (student, labeler):
            fh.write(np.ascontiguousarray(p.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.bias, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(student, labeler)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise MalformedFile(path, 0, "bad magic")
    if len(data) < 16:
        raise MalformedFile(path, len(data), "truncated header")
    version, k, d = struct.unpack("<III", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise MalformedFile(path, 4, f"unsupported version {version}")
    n = k * d + k
    need = 16 + 2 * 8 * n
    if len(data) != need:
        raise MalformedFile(path, min(len(data), need), f"expected {need} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64)
    return EmbeddingParams.from_flat(vals[:n], k, d), EmbeddingParams.from_flat(vals[n:], k, d)
