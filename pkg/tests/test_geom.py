import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from distreg.errors import DegenerateConfiguration
from distreg.geom import (Pose, PointCloud, apply_pose, compose, fit_pose_weighted, inverse, random_pose,
                          rotation_about, rotation_error, rot_z, translation_error)


def _close_pose(a, b, tol=1e-9):
    return np.allclose(a.rotation, b.rotation, atol=tol) and np.allclose(a.translation, b.translation, atol=tol)


def test_identity_leaves_cloud_unchanged():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    out = apply_pose(PointCloud(pts, 3), Pose.identity())
    assert isinstance(out, PointCloud) and out.frame_id == 3
    np.testing.assert_array_equal(out.points, pts)


def test_quarter_turn_about_z():
    out = apply_pose(np.array([[1.0, 0.0, 0.0]]), Pose(rot_z(math.pi / 2), np.zeros(3)))
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_compose_matches_sequential_application():
    rng = np.random.default_rng(1)
    a, b = random_pose(rng), random_pose(rng)
    pts = rng.normal(size=(50, 3)) * 10
    seq = apply_pose(apply_pose(pts, a), b)
    np.testing.assert_allclose(apply_pose(pts, compose(a, b)), seq, atol=1e-9)
    # independent oracle: 4x4 homogeneous product
    m = b.matrix() @ a.matrix()
    np.testing.assert_allclose(compose(a, b).matrix(), m, atol=1e-12)


def test_compose_with_identity_and_inverse():
    p = random_pose(np.random.default_rng(2))
    assert _close_pose(compose(Pose.identity(), p), p)
    assert _close_pose(compose(p, inverse(p)), Pose.identity())


def test_inverse_cases():
    assert _close_pose(inverse(Pose.identity()), Pose.identity())
    t = Pose(np.eye(3), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_allclose(inverse(t).translation, [-1.0, 2.0, -3.0])
    p = random_pose(np.random.default_rng(3))
    np.testing.assert_allclose(inverse(p).matrix(), np.linalg.inv(p.matrix()), atol=1e-12)


def test_pose_validation():
    assert random_pose(np.random.default_rng(0)).is_valid()
    assert not Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()
    assert not Pose(np.eye(3), np.array([np.nan, 0.0, 0.0])).is_valid()
    assert not Pose(np.eye(3) * 1.01, np.zeros(3)).is_valid()


def test_fit_exact_on_noise_free_pairs():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pose = random_pose(rng, 30.0)
        src = rng.normal(size=(40, 3)) * 20
        est = fit_pose_weighted(src, apply_pose(src, pose))
        assert _close_pose(est, pose)


def test_fit_exact_on_three_points():
    rng = np.random.default_rng(5)
    pose = random_pose(rng)
    src = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    assert _close_pose(fit_pose_weighted(src, apply_pose(src, pose)), pose)


def test_fit_rejects_collinear_and_short_input():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    with pytest.raises(DegenerateConfiguration):
        fit_pose_weighted(src, src)
    with pytest.raises(DegenerateConfiguration):
        fit_pose_weighted(src[:2], src[:2])
    with pytest.raises(DegenerateConfiguration):
        fit_pose_weighted(src, src, np.zeros(3))


def test_fit_weighted_matches_iterative_minimizer():
    rng = np.random.default_rng(6)
    pose = random_pose(rng, 5.0)
    src = rng.normal(size=(30, 3)) * 5
    dst = apply_pose(src, pose) + rng.normal(scale=0.2, size=src.shape)
    w = rng.uniform(0.1, 3.0, size=30)

    def objective(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix()
        res = src @ r.T + x[3:] - dst
        return float(np.sum(w * np.sum(res ** 2, axis=1)))

    x0 = np.concatenate([Rotation.from_matrix(pose.rotation).as_rotvec(), pose.translation])
    best = minimize(objective, x0, method="BFGS", options={"gtol": 1e-12}).fun
    est = fit_pose_weighted(src, dst, w)
    ours = objective(np.concatenate([Rotation.from_matrix(est.rotation).as_rotvec(), est.translation]))
    assert ours <= best + 1e-6


def test_rotation_error_cases():
    r = Rotation.random(random_state=7).as_matrix()
    assert rotation_error(r, r) == pytest.approx(0.0, abs=1e-6)
    extra = rotation_about([1.0, 2.0, -0.5], math.radians(30))
    assert rotation_error(r, r @ extra) == pytest.approx(30.0, abs=1e-9)


def test_rotation_error_matches_quaternion_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a = Rotation.random(random_state=rng)
        b = Rotation.random(random_state=rng)
        dot = abs(float(np.dot(a.as_quat(), b.as_quat())))
        oracle = math.degrees(2 * math.acos(min(1.0, dot)))
        assert rotation_error(a.as_matrix(), b.as_matrix()) == pytest.approx(oracle, abs=1e-6)


def test_translation_error():
    assert translation_error([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert translation_error([0.0, 0.0, 0.0], [3.0, 4.0, 0.0]) == 5.0
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert translation_error(a, b) == pytest.approx(math.sqrt(sum((a - b) ** 2)), rel=1e-12)


seeds = st.integers(0, 2 ** 32 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_apply_pose_is_rigid(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(15, 3)) * 50
    out = apply_pose(pts, random_pose(rng, 100.0))
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=2)
    np.testing.assert_allclose(d1, d0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_rotation_error_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = Rotation.random(random_state=rng).as_matrix(), Rotation.random(random_state=rng).as_matrix()
    assert rotation_error(a, b) == pytest.approx(rotation_error(b, a), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(0.5, 179.5))
def test_rotation_error_recovers_angle(seed, theta):
    rng = np.random.default_rng(seed)
    a = Rotation.random(random_state=rng).as_matrix()
    extra = rotation_about(rng.normal(size=3), math.radians(theta))
    assert rotation_error(a, a @ extra) == pytest.approx(theta, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_fit_exact_for_any_pose(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, 50.0)
    src = rng.normal(size=(6, 3)) * 10
    assert _close_pose(fit_pose_weighted(src, apply_pose(src, pose)), pose, 1e-8)
