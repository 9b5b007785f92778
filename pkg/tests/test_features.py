import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from distreg.errors import EmptyCorrespondences, MalformedFile, ShapeMismatch
from distreg.features import (DESC_DIM, DESCRIPTOR_NAMES, EmbeddingParams, LossConfig, describe, embed,
                              hardest_contrastive_loss, init_params, load_checkpoint, loss_and_grad, match_features,
                              save_checkpoint, sgd_step)

NAME = {n: i for i, n in enumerate(DESCRIPTOR_NAMES)}


def test_isolated_point_defaults():
    d = describe(np.array([[0.0, 0.0, 1.0], [50.0, 0.0, 0.0]]), radius=2.0)
    assert d[0, NAME["log_density"]] == 0.0
    np.testing.assert_allclose(d[0, NAME["eig1"]:NAME["eig3"] + 1], 1 / 3)


def test_planar_patch_eigenvalues():
    rng = np.random.default_rng(0)
    xy = rng.uniform(-1, 1, size=(400, 2))
    pts = np.column_stack([xy, np.zeros(400)])
    d = describe(pts, radius=10.0)
    assert np.all(d[:, NAME["eig3"]] < 1e-12)
    cov = np.cov(pts.T, bias=True)
    ev = np.sort(np.linalg.eigvalsh(cov))[::-1]
    np.testing.assert_allclose(d[0, NAME["eig1"]:NAME["eig3"] + 1], ev / ev.sum(), atol=1e-9)
    assert np.all(d[:, NAME["verticality"]] > 0.999)


def test_descriptor_depends_on_position_only_through_height():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(300, 3)) * 2
    base = describe(pts)
    moved = describe(pts + np.array([12.0, -7.0, 0.0]))
    np.testing.assert_allclose(moved, base, atol=1e-9)
    lifted = describe(pts + np.array([0.0, 0.0, 1.0]))
    changed = np.flatnonzero(np.any(np.abs(lifted - base) > 1e-9, axis=0))
    assert changed.tolist() == [NAME["height"]]


def test_describe_is_deterministic_and_sized():
    pts = np.random.default_rng(2).normal(size=(100, 3))
    a, b = describe(pts), describe(pts)
    assert a.shape == (100, DESC_DIM)
    np.testing.assert_array_equal(a, b)
    assert describe(np.zeros((0, 3))).shape == (0, DESC_DIM)


def test_embed_guards_and_basis():
    z = EmbeddingParams(np.zeros((4, DESC_DIM)), np.zeros(4))
    f = embed(np.ones((3, DESC_DIM)), z)
    np.testing.assert_array_equal(f, np.tile([1.0, 0, 0, 0], (3, 1)))
    w = np.eye(DESC_DIM)
    one_hot = np.eye(DESC_DIM)[[3, 7]]
    np.testing.assert_allclose(embed(one_hot, EmbeddingParams(w, np.zeros(DESC_DIM))), one_hot)
    with pytest.raises(ShapeMismatch):
        embed(np.ones((2, 5)), z)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_embed_rows_unit_norm(seed):
    rng = np.random.default_rng(seed)
    p = init_params(8, rng, scale=rng.uniform(0.01, 10))
    f = embed(rng.normal(size=(50, DESC_DIM)) * 5, p)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-6)


def test_match_self_and_ties():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(30, 8))
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    c = match_features(f, f)
    np.testing.assert_array_equal(c.dst, np.arange(30))
    np.testing.assert_allclose(c.scores, 1.0)
    a = np.eye(4)[:2]
    b = np.eye(4)[2:]
    c = match_features(a, b)
    np.testing.assert_array_equal(c.dst, [0, 0])
    np.testing.assert_allclose(c.scores, 0.0)
    with pytest.raises(EmptyCorrespondences):
        match_features(np.zeros((0, 4)), b)


def test_match_equals_brute_force():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(100, 16)), rng.normal(size=(100, 16))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    c = match_features(a, b, chunk=7)
    oracle = [max(range(100), key=lambda j: (float(np.dot(a[i], b[j])), -j)) for i in range(100)]
    np.testing.assert_array_equal(c.dst, oracle)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_match_invariant_to_common_rotation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(50, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    r = Rotation.random(random_state=rng).as_matrix()
    np.testing.assert_array_equal(match_features(a, b).dst, match_features(a @ r.T, b @ r.T).dst)


def test_loss_inactive_hinge():
    # positives coincide, every negative sits at squared distance 4 >= m
    f_s = np.array([[1.0, 0.0], [-1.0, 0.0]])
    f_t = f_s.copy()
    cfg = LossConfig(margin=1.0, pool_size=2)
    loss, g_s, g_t = hardest_contrastive_loss(f_s, f_t, [[0, 0], [1, 1]], [[0, 0], [1, 1]], cfg)
    assert loss == 0.0
    assert not g_s.any() and not g_t.any()


def test_loss_scalar_toy():
    # k = 1: anchor 0, positive at 0.5 (P = 0.25), only negative at -sqrt(0.5) (P = 0.5)
    f_s = np.array([[0.0]])
    f_t = np.array([[0.5], [-np.sqrt(0.5)]])
    cfg = LossConfig(margin=1.0, pool_size=2, max_positives=0)
    loss, _, _ = hardest_contrastive_loss(f_s, f_t, [[0, 0]], np.zeros((0, 2), dtype=int), cfg)
    assert loss == pytest.approx(0.75, abs=1e-12)


def test_loss_needs_pairs():
    with pytest.raises(EmptyCorrespondences):
        hardest_contrastive_loss(np.eye(3), np.eye(3), np.zeros((0, 2), int), np.zeros((0, 2), int))


def _instance(seed):
    rng = np.random.default_rng(seed)
    params = init_params(6, rng, scale=2.0)
    params.bias[:] = rng.normal(size=6)
    ds, dt = rng.normal(size=(25, DESC_DIM)), rng.normal(size=(30, DESC_DIM))
    c_st = np.stack([rng.choice(25, 12, replace=False), rng.integers(0, 30, 12)], axis=1)
    c_ts = np.stack([rng.choice(30, 10, replace=False), rng.integers(0, 25, 10)], axis=1)
    return params, ds, dt, c_st, c_ts


def test_gradient_matches_finite_differences():
    cfg = LossConfig(margin=1.0, pool_size=10)
    worst = 0.0
    for seed in range(20):
        params, ds, dt, c_st, c_ts = _instance(seed)

        def f(vec):
            p = EmbeddingParams.from_flat(vec, 6)
            return loss_and_grad(p, ds, dt, c_st, c_ts, cfg, np.random.default_rng(99))[0]

        _, g = loss_and_grad(params, ds, dt, c_st, c_ts, cfg, np.random.default_rng(99))
        x = params.flat()
        h = 1e-6
        num = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])
        rel = np.linalg.norm(num - g.flat()) / max(np.linalg.norm(num), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_loss_non_negative_and_zero_iff_inactive(seed):
    params, ds, dt, c_st, c_ts = _instance(seed)
    loss, g = loss_and_grad(params, ds, dt, c_st, c_ts, LossConfig(pool_size=8), np.random.default_rng(seed))
    assert loss >= 0.0
    if loss == 0.0:
        assert not g.flat().any()


def test_sgd_step_cases():
    p = init_params(4, np.random.default_rng(5))
    zero = EmbeddingParams(np.zeros_like(p.weight), np.zeros_like(p.bias))
    same = sgd_step(p, zero, LossConfig(weight_decay=0.0))
    np.testing.assert_array_equal(same.flat(), p.flat())
    cfg = LossConfig(lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(sgd_step(p, zero, cfg).flat(), p.flat() * (1 - 0.05))


def test_sgd_step_descends_quadratic():
    p = init_params(4, np.random.default_rng(6))
    target = np.random.default_rng(7).normal(size=p.flat().shape)
    obj = lambda q: 0.5 * np.sum((q.flat() - target) ** 2)
    grad = EmbeddingParams.from_flat(p.flat() - target, 4)
    assert obj(sgd_step(p, grad, LossConfig(lr=0.1, weight_decay=0.0))) < obj(p)


def test_checkpoint_round_trip_and_errors(tmp_path):
    s, l = init_params(5, np.random.default_rng(8)), init_params(5, np.random.default_rng(9))
    path = tmp_path / "ck.bin"
    save_checkpoint(path, s, l)
    raw = path.read_bytes()
    assert raw[:4] == b"EYOC" and len(raw) == 16 + 2 * 8 * (5 * 16 + 5)
    s2, l2 = load_checkpoint(path)
    np.testing.assert_array_equal(s2.flat(), s.flat())
    np.testing.assert_array_equal(l2.flat(), l.flat())
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(MalformedFile):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-3])
    with pytest.raises(MalformedFile):
        load_checkpoint(tmp_path / "short.bin")
