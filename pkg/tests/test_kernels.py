import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, rel_err
from mmdfw import kernels
from mmdfw.kernels import (IMQ, RBF, RFF, DegenerateParticlesError, GramSolveError, IMQScore, InvLog,
                           gram_solve, median_bandwidth, rff_eval, solve_gram)
from mmdfw.targets import Gaussian, GaussianMixture

finite = st.floats(-3, 3, allow_nan=False)


def _variants(dim):
    gmm = GaussianMixture([0.4, 0.6], [np.zeros(dim), np.ones(dim)], [np.eye(dim), 0.5 * np.eye(dim)])
    return [RBF(0.7), IMQ(1.3, -0.5), IMQ(0.5, -1.2), InvLog(1.5), IMQScore(gmm, 1.0, -0.5), RFF(0.8, 64, dim, seed=3)]


# values written out by hand from the kernel formulas
def test_rbf_point_values():
    assert kernels.eval(RBF(1.0), [0.0, 0.0], [0.0, 0.0]) == 1.0
    assert kernels.eval(RBF(1.0), [0.0], [2.0]) == pytest.approx(0.1353352832366127, rel=1e-14)


def test_imq_point_value():
    assert kernels.eval(IMQ(1.0, -0.5), [0.0], [0.0]) == 1.0


def test_grad_examples():
    assert np.array_equal(kernels.grad_x(RBF(0.4), [1.0, -2.0], [1.0, -2.0]), [0.0, 0.0])
    assert kernels.grad_x(RBF(1.0), [1.0], [0.0])[0] == pytest.approx(-0.6065306597126334, rel=1e-6)
    assert kernels.grad_x(IMQ(1.0, -0.5), [1.0], [0.0])[0] == pytest.approx(-0.3535533905932738, rel=1e-12)


def test_rbf_grad_closed_form(rng):
    k = RBF(0.9)
    for _ in range(20):
        x, y = rng.normal(size=3), rng.normal(size=3)
        expected = -(x - y) / 0.81 * math.exp(-np.sum((x - y) ** 2) / (2 * 0.81))
        assert np.allclose(k.grad_x(x, y), expected, rtol=1e-13, atol=0)


@pytest.mark.parametrize("dim", [1, 3])
def test_gradients_match_finite_differences(dim, rng):
    for k in _variants(dim):
        for _ in range(100):
            x, y = rng.normal(size=dim), rng.normal(size=dim)
            fd_x = central_diff(lambda v: k.eval(v, y), x)
            fd_y = central_diff(lambda v: k.eval(x, v), y)
            assert rel_err(k.grad_x(x, y), fd_x) < 1e-5, k
            assert rel_err(k.grad_y(x, y), fd_y) < 1e-5, k


@pytest.mark.parametrize("dim", [1, 2])
def test_trace_term_matches_finite_differences(dim, rng):
    for k in _variants(dim):
        for _ in range(20):
            x, y = rng.normal(size=dim), rng.normal(size=dim)
            fd = 0.0
            for i in range(dim):
                e = np.zeros(dim)
                e[i] = 1e-5
                fd += (k.grad_x(x, y + e)[i] - k.grad_x(x, y - e)[i]) / 2e-5
            got = k.matrix_trace_xy(x[None], y[None])[0, 0]
            assert abs(got - fd) < 1e-5 * max(1.0, abs(fd)), k


@given(arrays(float, 2, elements=finite), arrays(float, 2, elements=finite))
def test_symmetry(x, y):
    for k in _variants(2):
        assert k.eval(x, y) == pytest.approx(k.eval(y, x), abs=1e-15)


@given(arrays(float, (4, 2), elements=finite), arrays(float, (3, 2), elements=finite))
def test_batched_matches_scalar(X, Y):
    k = RBF(0.6)
    K = k.matrix(X, Y)
    G = k.matrix_grad_x(X, Y)
    for i in range(4):
        for j in range(3):
            assert K[i, j] == pytest.approx(k.eval(X[i], Y[j]), abs=1e-15)
            assert np.allclose(G[i, j], k.grad_x(X[i], Y[j]), atol=1e-15)


def test_dimension_mismatch_and_nonfinite():
    with pytest.raises(ValueError):
        kernels.eval(RBF(1.0), [0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        kernels.eval(RBF(1.0), [np.nan], [0.0])
    with pytest.raises(ValueError):
        RFF(1.0, 8, 2).eval([0.0], [0.0])


def test_parameter_validation():
    with pytest.raises(ValueError):
        RBF(0.0)
    with pytest.raises(ValueError):
        IMQ(-1.0)
    with pytest.raises(ValueError):
        RFF(1.0, 0, 2)
    with pytest.warns(UserWarning):
        IMQ(1.0, 0.5)


def test_imqscore_uses_scores():
    g = Gaussian(np.zeros(2), np.diag([1.0, 4.0]))
    k = IMQScore(g, 1.0, -0.5)
    x, y = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
    sx, sy = -x / [1.0, 4.0], -y / [1.0, 4.0]
    assert k.eval(x, y) == pytest.approx((1.0 + np.sum((sx - sy) ** 2)) ** -0.5, rel=1e-14)


def test_gram_solve_examples():
    assert gram_solve(RBF(1.0), [[0.0]], [2.0]).solution == pytest.approx([2.0], rel=1e-8)
    sol = gram_solve(RBF(1.0), [[0.0], [1.0]], [1.0, 1.0])
    assert np.allclose(sol.solution, 1 / (1 + math.exp(-0.5)), rtol=1e-8)
    assert sol.solution[0] == pytest.approx(0.6224593312018546, rel=1e-8)
    sym = gram_solve(RBF(0.8), [[-1.0, 0.5], [1.0, -0.5]], [0.3, 0.3]).solution
    assert sym[0] == pytest.approx(sym[1], rel=1e-12)


def test_gram_solve_jitter_escalates_for_duplicates():
    pts = np.array([[0.0], [0.0], [1.0]])
    sol = gram_solve(RBF(1.0), pts, [1.0, 1.0, 1.0])
    assert sol.jitter > 0
    K = RBF(1.0).matrix(pts, pts) + sol.jitter * np.eye(3)
    assert np.max(np.abs(K @ sol.solution - 1.0)) < 1e-8


def test_gram_solve_failure():
    with pytest.raises(GramSolveError):
        solve_gram(-np.eye(2), np.ones(2))


def test_gram_solve_residual_random(rng):
    k = RBF(0.5)
    for _ in range(20):
        P = rng.normal(size=(8, 2))
        rhs = rng.normal(size=8)
        sol = gram_solve(k, P, rhs)
        K = k.matrix(P, P) + sol.jitter * np.eye(8)
        assert np.linalg.eigvalsh(K).min() > 0
        assert np.max(np.abs(K @ sol.solution - rhs)) < 1e-8


def test_median_bandwidth_examples():
    assert median_bandwidth([[0.0], [1.0], [3.0]]) == 2.0
    assert median_bandwidth([[0.0], [2.5]]) == 2.5
    assert median_bandwidth([[0.0, 0.0], [3.0, 4.0]]) == 5.0
    assert median_bandwidth([[0.0], [1.0], [3.0]], log_scaling=True) == pytest.approx(2.0 / math.sqrt(2 * math.log(4)))
    with pytest.raises(DegenerateParticlesError):
        median_bandwidth([[1.0], [1.0]])


@given(arrays(float, (6, 2), elements=st.floats(-5, 5, allow_nan=False), unique=True))
def test_median_bandwidth_is_the_median_distance(P):
    d = [np.linalg.norm(P[i] - P[j]) for i in range(6) for j in range(i + 1, 6)]
    if np.median(d) > 0:
        assert median_bandwidth(P) == pytest.approx(float(np.median(d)), rel=1e-12)


def test_rff_self_value_and_determinism(rng):
    k = RFF(1.0, 2048, 2, seed=7)
    X = rng.uniform(-2, 2, size=(50, 2))
    assert np.max(np.abs(k.diag(X) - 1.0)) <= 0.05
    x, y = X[0], X[1]
    assert rff_eval(k, x, y) == rff_eval(k, x, y)
    assert rff_eval(RFF(1.0, 2048, 2, seed=7), x, y) == rff_eval(k, x, y)


@pytest.mark.parametrize("sampler", ["qmc", "mc"])
def test_rff_approximates_rbf(sampler):
    rng = np.random.default_rng(0)
    X, Y = rng.uniform(-2, 2, size=(100, 2)), rng.uniform(-2, 2, size=(100, 2))
    exact = np.array([RBF(1.0).eval(x, y) for x, y in zip(X, Y)])
    approx = np.array([rff_eval(RFF(1.0, 2048, 2, seed=1, sampler=sampler), x, y) for x, y in zip(X, Y)])
    assert np.max(np.abs(approx - exact)) <= 0.05


def test_rff_matches_feature_dot_product(rng):
    k = RFF(0.7, 32, 3, seed=2)
    X, Y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    Z = lambda A: np.sqrt(2 / 32) * np.cos(A @ k.W.T + k.b)
    assert np.allclose(k.matrix(X, Y), Z(X) @ Z(Y).T, atol=1e-14)
    assert k.mean_cross(X, Y) == pytest.approx(k.matrix(X, Y).mean(axis=1))
    assert k.mean_self(Y) == pytest.approx(k.matrix(Y, Y).mean())
    with pytest.raises(ValueError):
        k.W[0, 0] = 1.0


def test_chunked_means_match_dense(rng):
    k = RBF(0.5)
    X, Y = rng.normal(size=(30, 2)), rng.normal(size=(400, 2))
    assert np.allclose(k.mean_cross(X, Y), k.matrix(X, Y).mean(axis=1), atol=1e-14)
    assert k.mean_self(Y) == pytest.approx(k.matrix(Y, Y).mean(), abs=1e-14)
