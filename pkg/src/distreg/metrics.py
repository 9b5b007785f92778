"""Registration metrics: per-pair errors, recall, bucketed mean recall and inlier ratio."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Hashable, NamedTuple, Optional, Sequence

import numpy as np

from .correspondence import as_pairs
from .errors import ArityMismatch, EmptyCorrespondences, EmptyInput
from .geom import Pose, _as_points, rotation_error, translation_error

logger = logging.getLogger(__name__)

DEFAULT_BUCKETS = ((5.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0), (40.0, 50.0))


@dataclass(frozen=True)
class MetricThresholds:
    t_rot: float = 5.0  # degrees
    t_trans: float = 2.0  # meters
    t_inlier: float = 0.3  # meters

    def __post_init__(self):
        if min(self.t_rot, self.t_trans, self.t_inlier) <= 0:
            raise ValueError("metric thresholds must be positive")


@dataclass(frozen=True)
class RegistrationResult:
    pair_id: Hashable
    re_deg: float
    te_m: float
    success: bool


class Aggregate(NamedTuple):
    rr: float
    rre: Optional[float]  # degrees, None when no pair succeeded
    rte: Optional[float]  # meters, None when no pair succeeded


def check_buckets(buckets):
    prev_hi = -math.inf
    for lo, hi in buckets:
        if not lo < hi or lo < prev_hi:
            raise ValueError(f"buckets must be ascending and non-overlapping: {buckets}")
        prev_hi = hi
    return tuple((float(lo), float(hi)) for lo, hi in buckets)


def bucket_index(distance: float, buckets=DEFAULT_BUCKETS) -> Optional[int]:
    """Index of the closed interval containing ``distance``; the lower bucket wins on shared edges."""
    for k, (lo, hi) in enumerate(buckets):
        if lo <= distance <= hi:
            return k
    return None


def evaluate_pair(true_pose: Pose, est_pose: Pose, thresholds: MetricThresholds = MetricThresholds(),
                  pair_id: Hashable = None) -> RegistrationResult:
    re = rotation_error(true_pose.rotation, est_pose.rotation)
    te = translation_error(true_pose.translation, est_pose.translation)
    return RegistrationResult(pair_id, re, te, bool(re < thresholds.t_rot and te < thresholds.t_trans))


def aggregate(results: Sequence[RegistrationResult]) -> Aggregate:
    """Recall over all pairs; rotation/translation errors averaged over successes only."""
    if len(results) == 0:
        raise EmptyInput("aggregate needs at least one result")
    ok = [r for r in results if r.success]
    rr = len(ok) / len(results)
    if not ok:
        return Aggregate(rr, None, None)
    return Aggregate(rr, math.fsum(r.re_deg for r in ok) / len(ok), math.fsum(r.te_m for r in ok) / len(ok))


def mean_rr(bucketed_rr: Sequence[Optional[float]], buckets=DEFAULT_BUCKETS) -> float:
    """Mean of per-bucket recalls.

    A ``None`` entry marks an empty bucket; it is left out and the mean is
    taken over the populated buckets, with a warning.
    """
    if len(bucketed_rr) != len(buckets):
        raise ArityMismatch(f"expected {len(buckets)} bucket recalls, got {len(bucketed_rr)}")
    present = [v for v in bucketed_rr if v is not None]
    if len(present) < len(bucketed_rr):
        logger.warning("mRR over %d of %d buckets (empty buckets skipped)", len(present), len(bucketed_rr))
    if not present:
        raise EmptyInput("every bucket is empty")
    return math.fsum(present) / len(present)


def inlier_ratio(src, dst, true_pose: Pose, corr, t_inlier: float = 0.3) -> float:
    pairs = as_pairs(corr)
    if len(pairs) == 0:
        raise EmptyCorrespondences("inlier ratio of an empty correspondence set")
    p = _as_points(src)[pairs[:, 0]]
    q = _as_points(dst)[pairs[:, 1]]
    resid = np.linalg.norm(p @ true_pose.rotation.T + true_pose.translation - q, axis=1)
    return float(np.count_nonzero(resid <= t_inlier)) / len(pairs)


def mean_inlier_ratio(ratios: Sequence[float]) -> Optional[float]:
    """Dataset inlier ratio: the per-pair ratios averaged over pairs."""
    if len(ratios) == 0:
        return None
    return math.fsum(ratios) / len(ratios)


def _rounded(x, nd=9):
    return None if x is None else round(float(x), nd)


def build_report(results_by_bucket, ir_by_bucket=None, buckets=DEFAULT_BUCKETS) -> dict:
    """Assemble the metrics report.

    ``results_by_bucket`` holds one list of RegistrationResult per bucket.
    Translation errors are reported in centimeters; undefined averages are None.
    """
    if len(results_by_bucket) != len(buckets):
        raise ArityMismatch("one result list per bucket required")
    ir_by_bucket = ir_by_bucket or [[] for _ in buckets]
    rows = []
    rrs = []
    for (lo, hi), res, irs in zip(buckets, results_by_bucket, ir_by_bucket):
        if res:
            agg = aggregate(res)
            rrs.append(agg.rr)
            rte_cm = None if agg.rte is None else agg.rte * 100.0
            rows.append(dict(d_min=lo, d_max=hi, n_pairs=len(res), rr=_rounded(agg.rr),
                             rre_deg=_rounded(agg.rre), rte_cm=_rounded(rte_cm),
                             ir=_rounded(mean_inlier_ratio(irs))))
        else:
            rrs.append(None)
            rows.append(dict(d_min=lo, d_max=hi, n_pairs=0, rr=None, rre_deg=None, rte_cm=None, ir=None))
    flat = [r for res in results_by_bucket for r in res]
    all_ir = [x for irs in ir_by_bucket for x in irs]
    overall = aggregate(flat) if flat else Aggregate(0.0, None, None)
    return {
        "rr": _rounded(overall.rr) if flat else None,
        "rre_deg": _rounded(overall.rre),
        "rte_cm": _rounded(None if overall.rte is None else overall.rte * 100.0),
        "mrr": _rounded(mean_rr(rrs, buckets)) if any(v is not None for v in rrs) else None,
        "ir": _rounded(mean_inlier_ratio(all_ir)),
        "buckets": rows,
    }


REPORT_CSV_FIELDS = ("d_min", "d_max", "n_pairs", "rr", "rre_deg", "rte_cm", "ir")


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in report["buckets"]:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in REPORT_CSV_FIELDS})
    return buf.getvalue()
