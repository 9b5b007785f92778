"""End-to-end runs: corpus simulation, self-supervised training, evaluation,
similarity-map construction and parameter sweeps."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset, lidar_sim
from .errors import ConfigError, DistregError, EmptyCorrespondences, NoPairInRange, SkipPair
from .features import (DESC_RADIUS, LossConfig, describe, embed, init_params, load_checkpoint, loss_and_grad,
                       match_features, save_checkpoint, sgd_step)
from .geom import Pose
from .metrics import DEFAULT_BUCKETS, MetricThresholds, build_report, evaluate_pair, inlier_ratio
from .scpcr import RegistrarConfig, ransac_register, register
from .selflabel import (EmaConfig, FilterConfig, SimilarityMap, build_similarity_map, ema_update,
                        generate_labels)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    """Flat run settings; every field is a config-file key and a ``--key`` flag."""

    dataset: str = ""
    out_dir: str = "run"
    seed: int = 0
    # schedule
    epochs: int = 200
    b_start: int = 1
    b_end: int = 30
    step_size: int = 1
    pairs_per_epoch: int = 0  # 0: one pass over the frames of the corpus
    stop_after: int = 0  # run only this many epochs of the schedule; 0 runs all
    # model
    k: int = 32
    descriptor_radius: float = DESC_RADIUS
    init_scale: float = 1.0
    stride: int = 3
    # filtering
    filter: str = "hard"
    d_thresh: float = 40.0
    s_thresh: float = 0.6
    lowe: bool = False
    lowe_thresh: float = 0.05
    lowe_mode: str = "distance"
    map: str = ""
    # loss and optimizer
    margin: float = 1.0
    pool_size: int = 512
    lr: float = 0.5  # plain SGD on the linear embedding needs a larger step than LossConfig.lr
    weight_decay: float = 1e-4
    max_positives: int = 1024
    neg_exclusion: float = 4.0  # meters; negatives this close to the positive are skipped
    ema_decay: float = 0.2
    beta_inlier: float = 2.0
    # registrar
    comp_thresh: float = 0.6
    num_seeds: int = 10
    power_iters: int = 20
    inlier_thresh: float = 0.6
    max_corrs: int = 1000
    checkpoint_every: int = 10
    # evaluation
    checkpoint: str = ""
    estimator: str = "sc2pcr"
    pairs_per_bucket: int = 20
    ransac_iters: int = 10000
    t_inlier: float = 0.3
    # simulation
    n_sequences: int = 1
    n_frames: int = 31
    speed: float = 1.7
    max_yaw_rate_deg: float = 0.8
    alpha: float = lidar_sim.DensityModel.alpha
    landmark_density: float = 0.0214  # landmarks per square meter of ground
    # sweeps
    param: str = ""
    values: str = ""

    def __post_init__(self):
        try:
            dataset.IntervalSchedule(self.b_start, self.b_end, self.epochs, self.step_size)
            self.filter_config()
            self.loss_config()
            EmaConfig(self.ema_decay)
            self.registrar_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.estimator not in ("sc2pcr", "ransac"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.pairs_per_epoch < 0 or self.k < 1 or self.descriptor_radius <= 0:
            raise ConfigError("pairs_per_epoch >= 0, k >= 1 and descriptor_radius > 0 required")

    def schedule(self) -> dataset.IntervalSchedule:
        return dataset.IntervalSchedule(self.b_start, self.b_end, self.epochs, self.step_size)

    def filter_config(self) -> FilterConfig:
        return FilterConfig(self.filter, self.d_thresh, self.s_thresh, self.lowe, self.lowe_thresh, self.lowe_mode)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.margin, self.pool_size, self.lr, self.weight_decay, self.max_positives)

    def registrar_config(self) -> RegistrarConfig:
        return RegistrarConfig(self.comp_thresh, self.num_seeds, self.power_iters, self.inlier_thresh,
                               self.max_corrs, self.seed)


def _parse_value(field_type, raw: str):
    t = field_type if isinstance(field_type, str) else getattr(field_type, "__name__", str(field_type))
    if t == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"expected {t}, got {raw!r}") from None
    return raw.strip().strip('"')


def make_config(values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Build a RunConfig from string values keyed by field name (dashes allowed)."""
    types = {f.name: f.type for f in fields(RunConfig)}
    parsed = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        parsed[name] = raw if not isinstance(raw, str) else _parse_value(types[name], raw)
    try:
        return replace(base, **parsed) if base is not None else RunConfig(**parsed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; ``[section]`` headers are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- simulation

def simulate_corpus(out_dir, n_sequences: int = 1, n_frames: int = 31, seed: int = 0, speed: float = 1.7,
                    max_yaw_rate_deg: float = 0.8, alpha: float = lidar_sim.DensityModel.alpha,
                    landmark_density: float = 0.0214, margin: float = 110.0) -> list:
    """Write ``n_sequences`` sequences, each in its own scene fitted around its trajectory.

    A single sequence is written directly into ``out_dir``; several go to
    ``out_dir/NN``.
    """
    out = Path(out_dir)
    model = lidar_sim.DensityModel(alpha=alpha)
    paths = []
    for s in range(n_sequences):
        sub_seed = seed * 1000 + s
        traj = lidar_sim.generate_trajectory(n_frames, speed=speed, max_yaw_rate_deg=max_yaw_rate_deg,
                                             seed=sub_seed)
        scene = lidar_sim.street_scene(traj, landmark_density, margin, seed=sub_seed)
        target = out if n_sequences == 1 else out / f"{s:02d}"
        paths.append(lidar_sim.emit_sequence(scene, traj, model, target, seed=sub_seed))
    return paths


# ------------------------------------------------------------------ training

class DescriptorCache:
    """Descriptors depend only on the cloud, so each frame is described once."""

    def __init__(self, stores, radius: float):
        self.stores = stores
        self.radius = radius
        self._cache = {}

    def __call__(self, seq: int, frame: int) -> np.ndarray:
        key = (seq, frame)
        if key not in self._cache:
            self._cache[key] = describe(self.stores[seq].load(frame), self.radius)
        return self._cache[key]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(cfg: RunConfig, stores=None, diag_stores=None, epochs: Optional[int] = None,
          on_epoch=None) -> dict:
    """Self-supervised training. Returns the final student/labeler and the report lines.

    Training data is ingested without poses. ``diag_stores`` (same sequences
    with poses) is optional and only feeds the labeler IR diagnostic.
    Reports go to ``out_dir/train_report.jsonl``; wall time to
    ``out_dir/train_timing.jsonl`` so the report stream stays reproducible.
    """
    if stores is None:
        stores = dataset.ingest_corpus(cfg.dataset, cfg.stride, load_poses=False)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = cfg.schedule()
    filt, loss_cfg, ema_cfg = cfg.filter_config(), cfg.loss_config(), EmaConfig(cfg.ema_decay)
    registrar = partial(register, cfg=cfg.registrar_config())
    sim_map = SimilarityMap.from_csv(cfg.map) if filt.mode == "adaptive" else None
    pairs_per_epoch = cfg.pairs_per_epoch or sum(len(s) for s in stores)
    descs = DescriptorCache(stores, cfg.descriptor_radius)

    student = init_params(cfg.k, np.random.default_rng([cfg.seed, 1 << 20]), cfg.init_scale)
    labeler = student.copy()
    report_path, timing_path = out / "train_report.jsonl", out / "train_timing.jsonl"
    report_path.write_text("")
    timing_path.write_text("")
    lines = []
    epochs = epochs if epochs is not None else (cfg.stop_after or None)
    n_epochs = schedule.total_epochs if epochs is None else min(epochs, schedule.total_epochs)
    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        labeler = ema_update(labeler, student, ema_cfg)
        bound = dataset.bound_at(schedule, epoch)
        rng = _epoch_rng(cfg.seed, epoch)
        losses, irs, skips = [], [], {}
        for _ in range(pairs_per_epoch):
            pair = dataset.sample_progressive_corpus(stores, bound, rng)
            store = stores[pair.sequence]
            src = store.load(pair.src_frame).points
            dst = store.load(pair.dst_frame).points
            d_s, d_t = descs(pair.sequence, pair.src_frame), descs(pair.sequence, pair.dst_frame)
            try:
                labels = generate_labels(src, dst, labeler, pair.interval, filt, sim_map, registrar,
                                         cfg.beta_inlier, d_s, d_t)
                loss, grad = loss_and_grad(student, d_s, d_t, labels.c_st, labels.c_ts, loss_cfg, rng,
                                           xyz_s=src, xyz_t=dst, exclude_radius=cfg.neg_exclusion)
            except SkipPair as exc:
                skips[exc.stage] = skips.get(exc.stage, 0) + 1
                continue
            except EmptyCorrespondences:
                skips["loss"] = skips.get("loss", 0) + 1
                continue
            student = sgd_step(student, grad, loss_cfg)
            losses.append(loss)
            if diag_stores is not None and labels.filtered is not None:
                true = diag_stores[pair.sequence].relative_pose(pair.src_frame, pair.dst_frame)
                irs.append(inlier_ratio(src, dst, true, labels.filtered, cfg.t_inlier))
        line = {
            "epoch": epoch, "B": bound, "attempted": pairs_per_epoch,
            "skipped": sum(skips.values()), "skip_stages": dict(sorted(skips.items())),
            "loss_mean": round(float(np.mean(losses)), 12) if losses else None,
            "labeler_ir": round(float(np.mean(irs)), 12) if irs else None,
        }
        lines.append(line)
        with open(report_path, "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        with open(timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_s": round(time.perf_counter() - t0, 3)}) + "\n")
        if (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{epoch + 1:04d}.bin", student, labeler)
        if on_epoch is not None:
            on_epoch(line)
    save_checkpoint(out / "checkpoint_final.bin", student, labeler)
    return {"student": student, "labeler": labeler, "reports": lines}


# ---------------------------------------------------------------- evaluation

def evaluation_pairs(stores, buckets=DEFAULT_BUCKETS, per_bucket: int = 20, seed: int = 0) -> list:
    """Fixed pair list per distance bucket (empty list for a bucket with no candidates)."""
    out = []
    for k, (lo, hi) in enumerate(buckets):
        try:
            out.append(dataset.sample_traditional_set(stores, lo, hi, per_bucket, np.random.default_rng([seed, k])))
        except NoPairInRange:
            out.append([])
    return out


def evaluate(params, stores, cfg: RunConfig, buckets=DEFAULT_BUCKETS, pairs=None, descs=None) -> dict:
    """Register every evaluation pair with ``params`` features and report RR/RRE/RTE/IR per bucket."""
    pairs = evaluation_pairs(stores, buckets, cfg.pairs_per_bucket, cfg.seed) if pairs is None else pairs
    descs = descs or DescriptorCache(stores, cfg.descriptor_radius)
    reg_cfg = cfg.registrar_config()
    thresholds = MetricThresholds(t_inlier=cfg.t_inlier)
    results, irs = [], []
    for b, bucket_pairs in enumerate(pairs):
        res_b, ir_b = [], []
        for n, pair in enumerate(bucket_pairs):
            store = stores[pair.sequence]
            src = store.load(pair.src_frame).points
            dst = store.load(pair.dst_frame).points
            f_s = embed(descs(pair.sequence, pair.src_frame), params)
            f_t = embed(descs(pair.sequence, pair.dst_frame), params)
            corr = match_features(f_s, f_t)
            ir_b.append(inlier_ratio(src, dst, pair.true_pose, corr, cfg.t_inlier))
            pid = (pair.sequence, pair.src_frame, pair.dst_frame)
            try:
                if cfg.estimator == "ransac":
                    est = ransac_register(corr, src, dst, cfg.ransac_iters, cfg.inlier_thresh,
                                          np.random.default_rng([cfg.seed, b, n])).pose
                else:
                    est = register(corr, src, dst, reg_cfg).pose
                res_b.append(evaluate_pair(pair.true_pose, est, thresholds, pid))
            except DistregError:  # a failed registration counts as a miss
                res_b.append(evaluate_pair(pair.true_pose, _FAILED, thresholds, pid))
        results.append(res_b)
        irs.append(ir_b)
    return build_report(results, irs, buckets)


_FAILED = Pose(np.eye(3), np.full(3, 1e6))


def evaluate_checkpoint(cfg: RunConfig, buckets=DEFAULT_BUCKETS, which: str = "student") -> dict:
    student, labeler = load_checkpoint(cfg.checkpoint)
    stores = dataset.ingest_corpus(cfg.dataset, cfg.stride)
    return evaluate(student if which == "student" else labeler, stores, cfg, buckets)


# -------------------------------------------------------------- filter maps

def filter_map(cfg: RunConfig, n_pairs: int = 0) -> SimilarityMap:
    """Similarity map of the checkpoint's labeler on ground-truth pairs drawn with
    the progressive sampler at the schedule's final bound."""
    _, labeler = load_checkpoint(cfg.checkpoint)
    stores = dataset.ingest_corpus(cfg.dataset, cfg.stride)
    rng = np.random.default_rng([cfg.seed, 7])
    n_pairs = n_pairs or cfg.pairs_per_epoch or sum(len(s) for s in stores)
    pairs = []
    for _ in range(n_pairs):
        p = dataset.sample_progressive_corpus(stores, cfg.b_end, rng)
        pairs.append(dataset.PairSample(p.src_frame, p.dst_frame, p.interval,
                                        stores[p.sequence].relative_pose(p.src_frame, p.dst_frame), p.sequence))
    return build_similarity_map(stores, labeler, pairs, cfg.t_inlier, cfg.descriptor_radius)


# ------------------------------------------------------------------ sweeps

SWEEPABLE = ("ema_decay", "d_thresh", "s_thresh", "step_size", "lowe", "filter", "b_end")


def ablate(cfg: RunConfig, eval_dataset: str, buckets=DEFAULT_BUCKETS) -> list:
    """Train and evaluate once per value of ``cfg.param``; one summary dict per value."""
    if cfg.param.replace("-", "_") not in SWEEPABLE:
        raise ConfigError(f"param must be one of {', '.join(SWEEPABLE)}")
    values = [v for v in cfg.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("values must list at least one setting")
    eval_stores = dataset.ingest_corpus(eval_dataset, cfg.stride)
    # poses, when present, only feed the labeler IR diagnostic
    diag = dataset.ingest_corpus(cfg.dataset, cfg.stride)
    diag = diag if all(s.poses is not None for s in diag) else None
    rows = []
    for v in values:
        run = make_config({cfg.param: v, "out_dir": str(Path(cfg.out_dir) / f"{cfg.param}={v.strip()}")}, cfg)
        result = train(run, diag_stores=diag)
        report = evaluate(result["student"], eval_stores, run, buckets)
        first_ext = next((r["labeler_ir"] for r in result["reports"] if r["B"] > 1), None)
        rows.append({"param": cfg.param, "value": v.strip(), "mrr": report["mrr"], "rr": report["rr"],
                     "first_extended_labeler_ir": first_ext,
                     "final_labeler_ir": result["reports"][-1]["labeler_ir"]})
    return rows


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
