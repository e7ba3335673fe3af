import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bilevel import problems as P
from bilevel.checks import KINDS, random_problem, rel_err
from bilevel.core import Dataset, DimensionError
from bilevel.hypergrad import fd_hypergrad
from bilevel.problems import (DiagTikhonovRidge, FeatureMapRidge, SharedOffsetLinear,
                              SoftmaxRegression, ValidationLoss, outer_grads)


def test_feature_map_loss_by_hand():
    obj = FeatureMapRidge(Dataset(np.eye(2), np.zeros(2)), rho=1.0)
    assert obj.loss(np.array([1.0, 0.0]), np.eye(2).ravel()) == 2.0
    assert P.loss(obj, np.array([1.0, 0.0]), np.eye(2).ravel()) == 2.0


def test_feature_map_grad_by_hand():
    obj = FeatureMapRidge(Dataset(np.eye(1), np.zeros(1)), rho=1.0)
    assert np.array_equal(obj.grad_w(np.array([1.0]), np.array([1.0])), [4.0])


def test_tikhonov_zero_weights(rng):
    d = Dataset(rng.standard_normal((6, 3)), rng.standard_normal(6))
    obj = DiagTikhonovRidge(d)
    assert obj.loss(np.zeros(3), rng.standard_normal(3)) == pytest.approx(np.sum(d.y ** 2),
                                                                          rel=1e-15)


def test_softmax_equal_logits(rng):
    n = 7
    d = Dataset(rng.standard_normal((n, 3)), rng.integers(0, 2, n), n_classes=2)
    obj = SoftmaxRegression(d, k=3)
    lam = rng.standard_normal(9)
    assert obj.loss(np.zeros(6), lam) == pytest.approx(n * np.log(2), rel=1e-14)


def test_grad_vanishes_at_minimizer(rng):
    obj = FeatureMapRidge(Dataset(rng.standard_normal((10, 4)), rng.standard_normal(10)), 0.5)
    lam = rng.standard_normal(16)
    assert np.linalg.norm(obj.grad_w(obj.minimizer(lam), lam)) <= 1e-8


def test_grad_random_5x3_vs_fd(rng):
    obj = FeatureMapRidge(Dataset(rng.standard_normal((5, 3)), rng.standard_normal(5)), 1.0)
    lam, w = rng.standard_normal(9), rng.standard_normal(3)
    fd = fd_hypergrad(lambda x: obj.loss(x, lam), w, h=1e-6)
    assert rel_err(obj.grad_w(w, lam), fd) <= 1e-6


def test_hvp_zero_design():
    rho = 0.7
    obj = FeatureMapRidge(Dataset(np.zeros((4, 3)), np.ones(4)), rho)
    v = np.array([1.0, -2.0, 3.0])
    assert np.allclose(obj.hvp_w(np.ones(3), np.eye(3).ravel(), v), 2 * rho * v, atol=0)
    assert not np.any(obj.hvp_w(np.ones(3), np.eye(3).ravel(), np.zeros(3)))


def test_tikhonov_cross_jvp_formula(rng):
    obj = DiagTikhonovRidge(Dataset(rng.standard_normal((6, 4)), rng.standard_normal(6)))
    lam, w, v = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
    assert np.allclose(obj.cross_jvp(w, lam, v), 2 * np.exp(lam) * w * v, rtol=1e-14)
    assert not np.any(obj.cross_jvp(np.zeros(4), lam, v))
    assert not np.any(obj.cross_jvp(w, lam, np.zeros(4)))


def test_outer_partial_zero_for_plain_ho(rng):
    obj = DiagTikhonovRidge(Dataset(rng.standard_normal((6, 4)), rng.standard_normal(6)))
    E = ValidationLoss(obj, Dataset(rng.standard_normal((5, 4)), rng.standard_normal(5)))
    _, gl = outer_grads(E, rng.standard_normal(4), rng.standard_normal(4))
    assert not np.any(gl)


def test_outer_partial_feature_map_vs_fd(rng):
    obj = FeatureMapRidge(Dataset(rng.standard_normal((6, 3)), rng.standard_normal(6)), 1.0)
    E = ValidationLoss(obj, Dataset(rng.standard_normal((5, 3)), rng.standard_normal(5)))
    w, lam = rng.standard_normal(3), rng.standard_normal(9)
    _, gl = outer_grads(E, w, lam)
    assert np.linalg.norm(gl) > 0
    assert rel_err(gl, fd_hypergrad(lambda l: E.loss(w, l), lam)) <= 1e-6


def test_outer_grad_zero_at_perfect_fit(rng):
    X = rng.standard_normal((5, 3))
    w = rng.standard_normal(3)
    obj = DiagTikhonovRidge(Dataset(X, X @ w))
    E = ValidationLoss(obj, Dataset(X, X @ w))
    assert np.linalg.norm(E.grad_w(w, np.zeros(3))) <= 1e-12


def test_dimension_mismatch_raises(rng):
    obj = DiagTikhonovRidge(Dataset(rng.standard_normal((6, 4)), rng.standard_normal(6)))
    with pytest.raises(DimensionError):
        obj.loss(np.zeros(3), np.zeros(4))
    with pytest.raises(DimensionError):
        obj.hvp_w(np.zeros(4), np.zeros(4), np.zeros(5))


def test_hessian_matches_dense(rng):
    obj = FeatureMapRidge(Dataset(rng.standard_normal((6, 3)), rng.standard_normal(6)), 0.3)
    lam = rng.standard_normal(9)
    H = lam.reshape(3, 3)
    Z = obj.data.X @ H
    assert np.allclose(obj.hessian(lam), 2 * (Z.T @ Z + 0.3 * np.eye(3)), rtol=1e-13)


def test_tied_tikhonov_scalar(rng):
    d = Dataset(rng.standard_normal((6, 4)), rng.standard_normal(6))
    tied, free = DiagTikhonovRidge(d, tied=True), DiagTikhonovRidge(d)
    w = rng.standard_normal(4)
    assert tied.m == 1
    assert tied.loss(w, [0.3]) == pytest.approx(free.loss(w, np.full(4, 0.3)), rel=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_oracles_vs_fd_100_instances(kind):
    rng = np.random.default_rng(100 + KINDS.index(kind))
    worst = 0.0
    for _ in range(100):
        problem, lam = random_problem(kind, rng)
        obj = problem.inner
        w, v = rng.standard_normal(obj.d), rng.standard_normal(obj.d)
        g_err = rel_err(obj.grad_w(w, lam), fd_hypergrad(lambda x: obj.loss(x, lam), w))
        h_err = rel_err(obj.hvp_w(w, lam, v),
                        fd_hypergrad(lambda x: v @ obj.grad_w(x, lam), w))
        c_err = rel_err(obj.cross_jvp(w, lam, v),
                        fd_hypergrad(lambda l: v @ obj.grad_w(w, l), lam))
        assert g_err <= 1e-6
        worst = max(worst, h_err, c_err)
    assert worst <= 1e-5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(KINDS))
def test_hessian_symmetry(seed, kind):
    rng = np.random.default_rng(seed)
    problem, lam = random_problem(kind, rng)
    obj = problem.inner
    w, u, v = (rng.standard_normal(obj.d) for _ in range(3))
    a, b = u @ obj.hvp_w(w, lam, v), v @ obj.hvp_w(w, lam, u)
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rho=st.floats(0.01, 10.0))
def test_feature_map_strong_convexity(seed, rho):
    rng = np.random.default_rng(seed)
    obj = FeatureMapRidge(Dataset(rng.standard_normal((6, 3)), rng.standard_normal(6)), rho)
    lam = rng.standard_normal(9)
    w1, w2 = rng.standard_normal(3), rng.standard_normal(3)
    lhs = (obj.grad_w(w1, lam) - obj.grad_w(w2, lam)) @ (w1 - w2)
    assert lhs >= 2 * rho * np.sum((w1 - w2) ** 2) - 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(1e-3, 1.0))
def test_softmax_strong_convexity(seed, c):
    rng = np.random.default_rng(seed)
    d = Dataset(rng.standard_normal((8, 3)), rng.integers(0, 3, 8), n_classes=3)
    obj = SoftmaxRegression(d, k=2, l2=c)
    lam = rng.standard_normal(6)
    w1, w2 = rng.standard_normal(6) * 3, rng.standard_normal(6) * 3
    lhs = (obj.grad_w(w1, lam) - obj.grad_w(w2, lam)) @ (w1 - w2)
    assert lhs >= 2 * c * np.sum((w1 - w2) ** 2) - 1e-9


def test_softmax_stable_for_large_logits(rng):
    d = Dataset(rng.standard_normal((5, 2)) * 1e3, rng.integers(0, 2, 5), n_classes=2)
    obj = SoftmaxRegression(d, identity=True)
    w = rng.standard_normal(4) * 1e3
    assert np.isfinite(obj.loss(w, np.zeros(0)))
    assert np.all(np.isfinite(obj.grad_w(w, np.zeros(0))))


def test_shared_offset_minimizer(rng):
    obj = SharedOffsetLinear(Dataset(rng.standard_normal((9, 4)), rng.standard_normal(9)), 0.5)
    lam = rng.standard_normal(4)
    assert np.linalg.norm(obj.grad_w(obj.minimizer(lam), lam)) <= 1e-10
