import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distreg.correspondence import Correspondences
from distreg.errors import ArityMismatch, EmptyCorrespondences, EmptyInput
from distreg.geom import Pose, apply_pose, random_pose, rotation_about
from distreg.metrics import (MetricThresholds, RegistrationResult, aggregate, build_report, evaluate_pair,
                             inlier_ratio, mean_rr, report_to_csv, report_to_json)


def _est(true_pose, re_deg, te_m):
    rot = true_pose.rotation @ rotation_about([0.0, 0.0, 1.0], math.radians(re_deg))
    return Pose(rot, true_pose.translation + np.array([te_m, 0.0, 0.0]))


def test_success_thresholds_are_strict():
    t = random_pose(np.random.default_rng(0))
    assert evaluate_pair(t, _est(t, 4.0, 1.5)).success
    assert not evaluate_pair(t, _est(t, 6.0, 0.1)).success
    assert not evaluate_pair(t, _est(t, 0.0, 2.0)).success
    # exactly 5 degrees by construction of the error itself
    assert not RegistrationResult(None, 5.0, 0.0, 5.0 < 5.0).success


def test_evaluate_pair_values():
    t = random_pose(np.random.default_rng(1))
    r = evaluate_pair(t, _est(t, 3.0, 1.0), pair_id="p")
    assert r.pair_id == "p"
    assert r.re_deg == pytest.approx(3.0, abs=1e-9)
    assert r.te_m == pytest.approx(1.0, abs=1e-12)


def test_aggregate_cases():
    ok = [RegistrationResult(i, 1.0, 0.5, True) for i in range(4)]
    agg = aggregate(ok)
    assert agg.rr == 1.0 and agg.rre == 1.0 and agg.rte == 0.5
    agg = aggregate([RegistrationResult(0, 90.0, 9.0, False)])
    assert agg.rr == 0.0 and agg.rre is None and agg.rte is None
    mixed = [RegistrationResult(0, 1.0, 0.1, True), RegistrationResult(1, 3.0, 0.3, True),
             RegistrationResult(2, 90.0, 30.0, False)]
    agg = aggregate(mixed)
    assert agg.rr == pytest.approx(2 / 3, abs=1e-12)
    assert agg.rre == pytest.approx(2.0, abs=1e-12)
    assert agg.rte == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(EmptyInput):
        aggregate([])


def test_failures_do_not_move_rre():
    base = [RegistrationResult(0, 1.0, 0.1, True), RegistrationResult(1, 2.0, 0.2, True)]
    with_fail = base + [RegistrationResult(2, 90.0, 50.0, False)]
    assert aggregate(base).rre == aggregate(with_fail).rre


def test_mean_rr_cases():
    assert mean_rr([1, 1, 1, 1, 1]) == 1.0
    assert mean_rr([0, 0, 0, 0, 0]) == 0.0
    assert mean_rr([0.980, 0.925, 0.850, 0.526, 0.307]) == pytest.approx(0.7176, abs=1e-12)
    with pytest.raises(ArityMismatch):
        mean_rr([1.0, 1.0])


def test_mean_rr_skips_empty_bucket(caplog):
    assert mean_rr([1.0, None, 0.5, None, 0.0]) == pytest.approx(0.5)
    assert "skipped" in caplog.text


def test_inlier_ratio_cases():
    rng = np.random.default_rng(2)
    pose = random_pose(rng, 10.0)
    src = rng.uniform(-50, 50, size=(200, 3))
    dst = apply_pose(src, pose)
    ident = Correspondences(np.stack([np.arange(200), np.arange(200)], axis=1))
    assert inlier_ratio(src, dst, pose, ident) == 1.0
    rand = Correspondences(np.stack([np.arange(200), rng.permutation(200)], axis=1))
    assert inlier_ratio(src, dst, pose, rand) < 0.05
    with pytest.raises(EmptyCorrespondences):
        inlier_ratio(src, dst, pose, np.zeros((0, 2), dtype=int))


def test_inlier_ratio_seven_of_ten():
    src = np.zeros((10, 3))
    offsets = np.array([0.0, 0.1, 0.2, 0.29, 0.3, 0.05, 0.15, 0.31, 1.0, 5.0])
    dst = np.stack([offsets, np.zeros(10), np.zeros(10)], axis=1)
    corr = np.stack([np.arange(10), np.arange(10)], axis=1)
    # 0.3 counts as inlier (non-strict)
    assert inlier_ratio(src, dst, Pose.identity(), corr, 0.3) == 0.7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 2.0), st.floats(0.0, 2.0))
def test_inlier_ratio_monotone_in_threshold(seed, t, dt):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(50, 3))
    dst = src + rng.normal(scale=0.5, size=src.shape)
    corr = np.stack([np.arange(50), np.arange(50)], axis=1)
    assert inlier_ratio(src, dst, Pose.identity(), corr, t) <= inlier_ratio(src, dst, Pose.identity(), corr, t + dt)


def test_thresholds_validate():
    with pytest.raises(ValueError):
        MetricThresholds(t_rot=0.0)


def test_report_json_and_csv():
    buckets = ((5.0, 10.0), (10.0, 20.0))
    res = [[RegistrationResult(0, 1.0, 0.5, True), RegistrationResult(1, 50.0, 9.0, False)], []]
    rep = build_report(res, [[0.5, 0.25], []], buckets)
    assert rep["rr"] == 0.5 and rep["mrr"] == 0.5
    assert rep["rte_cm"] == 50.0 and rep["rre_deg"] == 1.0
    assert rep["ir"] == 0.375
    assert rep["buckets"][1]["rr"] is None
    text = report_to_json(rep)
    assert '"rre_deg": null' in text
    csv_text = report_to_csv(rep).splitlines()
    assert csv_text[0] == "d_min,d_max,n_pairs,rr,rre_deg,rte_cm,ir"
    assert csv_text[1] == "5.0,10.0,2,0.5,1.0,50.0,0.375"
    assert csv_text[2] == "10.0,20.0,0,,,,"
