import numpy as np
import pytest

from ipmo.core import AllocationPath, CovariancePath, ForecastPath, ProblemParams
from ipmo.errors import InvalidParameterError, PreconditionError, ShapeError
from ipmo.objective import (cross_stage_block, decision_loss, full_hessian, hessian_vp, inner_objective,
                            smooth_abs, smooth_abs_grad, stage_grads, stage_hessian)

from conftest import random_instance


def test_smooth_abs_examples():
    assert smooth_abs(0.0, 1e-4) == pytest.approx(0.01, abs=1e-15)
    assert smooth_abs(0.3, 1e-14) == pytest.approx(0.3, abs=1e-12)
    assert smooth_abs(3.0, 16.0) == 5.0
    assert smooth_abs_grad(0.0, 1e-4) == 0.0
    assert smooth_abs_grad(3.0, 16.0) == pytest.approx(0.6, abs=1e-15)
    assert smooth_abs_grad(1e8, 1e-4) == pytest.approx(1.0, abs=1e-12)
    for f in (smooth_abs, smooth_abs_grad):
        with pytest.raises(InvalidParameterError):
            f(1.0, 0.0)


def test_smooth_abs_gap(rng):
    x = rng.standard_normal(1000) * 10 ** rng.uniform(-6, 2, 1000)
    for kappa in (1e-8, 1e-4, 1.0):
        gap = smooth_abs(x, kappa) - np.abs(x)
        assert np.all(gap > 0) and np.all(gap <= np.sqrt(kappa) * (1 + 1e-12))
        g = smooth_abs_grad(x, kappa)
        assert np.all(np.abs(g) < 1)
        assert np.allclose(smooth_abs_grad(-x, kappa), -g)


def test_objective_examples():
    params = ProblemParams(delta=1.0, lam=0.0, horizon=1, n_assets=2)
    path = AllocationPath.uniform(2, 1)
    ev = inner_objective(path, params, ForecastPath(np.zeros((1, 2))), CovariancePath(np.eye(2)[None]))
    assert ev.value == pytest.approx(0.25, abs=1e-15)

    h, n, lam, kappa = 3, 4, 0.7, 1e-4
    p = ProblemParams(delta=1.0, lam=lam, kappa=kappa, horizon=h, n_assets=n)
    z0 = np.array([0.1, 0.2, 0.3, 0.4])
    v = np.broadcast_to(np.eye(n), (h, n, n))
    ev = inner_objective(AllocationPath.hold(z0, h), p, ForecastPath(np.zeros((h, n))), CovariancePath(v))
    quad = 0.5 * h * z0 @ z0
    assert ev.value == pytest.approx(quad + lam * h * n * np.sqrt(kappa), abs=1e-14)

    p = ProblemParams(delta=1.0, lam=1.0, kappa=1e-4, horizon=2, n_assets=2)
    path = AllocationPath(np.array([1.0, 0.0]), np.full((2, 2), 0.5))
    ev = inner_objective(path, p, ForecastPath(np.zeros((2, 2))), CovariancePath(np.broadcast_to(np.eye(2), (2, 2, 2))))
    expect = 0.25 + 0.25 + 2 * np.sqrt(0.25 + 1e-4) + 2 * np.sqrt(1e-4)
    assert ev.value == pytest.approx(expect, abs=1e-14)


def test_shape_errors():
    p = ProblemParams(horizon=2, n_assets=3)
    with pytest.raises(ShapeError):
        inner_objective(AllocationPath.uniform(3, 2), p, ForecastPath(np.zeros((2, 2))),
                        CovariancePath(np.broadcast_to(np.eye(3), (2, 3, 3))))
    with pytest.raises(ShapeError):
        decision_loss(np.ones((2, 3)) / 3, np.zeros((2, 2)), np.broadcast_to(np.eye(3), (2, 3, 3)), 1.0)


def _fd_grad(f, z, eps=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        e = np.zeros_like(z)
        e[idx] = eps
        g[idx] = (f(z + e) - f(z - e)) / (2 * eps)
    return g


def test_stage_grads_match_finite_differences(rng):
    worst = 0.0
    for _ in range(50):
        n, h = rng.integers(2, 6), rng.integers(1, 5)
        params, fc, cov, z0 = random_instance(rng, n, h, lam=rng.choice([0.0, 0.01, 0.3]), kappa=1e-2)
        z = rng.dirichlet(np.ones(n), size=h)
        f = lambda s: inner_objective(AllocationPath(z0, s), params, fc, cov).value
        g = inner_objective(AllocationPath(z0, z), params, fc, cov).stage_grads
        fd = _fd_grad(f, z)
        worst = max(worst, np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))))
    assert worst <= 1e-5


def test_convexity(rng):
    for _ in range(100):
        n, h = rng.integers(2, 6), rng.integers(1, 4)
        params, fc, cov, z0 = random_instance(rng, n, h, lam=0.05)
        a = AllocationPath(z0, rng.dirichlet(np.ones(n), size=h))
        b = AllocationPath(z0, rng.dirichlet(np.ones(n), size=h))
        t = rng.uniform()
        mid = AllocationPath(z0, t * a.stages + (1 - t) * b.stages)
        fa, fb, fm = (inner_objective(p, params, fc, cov).value for p in (a, b, mid))
        assert fm <= t * fa + (1 - t) * fb + 1e-12


def test_lambda_zero_decomposes(rng):
    params, fc, cov, z0 = random_instance(rng, 4, 3)
    z = rng.dirichlet(np.ones(4), size=3)
    total = inner_objective(AllocationPath(z0, z), params, fc, cov).value
    parts = sum(inner_objective(AllocationPath(z0, z[s:s + 1]), params.with_(horizon=1),
                                ForecastPath(fc.y_hat[s:s + 1]), CovariancePath(cov.v_hat[s:s + 1])).value
                for s in range(3))
    assert total == pytest.approx(parts, abs=1e-14)


def test_stage_hessian_examples(rng):
    params, fc, cov, z0 = random_instance(rng, 3, 2)
    path = AllocationPath(z0, rng.dirichlet(np.ones(3), size=2))
    assert np.array_equal(stage_hessian(path, 1, params, cov), cov.v_hat[0])
    p = params.with_(lam=1.0)
    hold = AllocationPath.hold(z0, 2)
    hs = stage_hessian(hold, 2, p, cov)
    assert np.allclose(hs, cov.v_hat[1] + np.eye(3) / np.sqrt(p.kappa), rtol=0, atol=1e-12)
    with pytest.raises(PreconditionError):
        stage_hessian(path, 0, params, cov)
    with pytest.raises(PreconditionError):
        stage_hessian(path, 3, params, cov)
    with pytest.raises(PreconditionError):
        cross_stage_block(path, 2, params)


def test_hessian_matches_fd_of_gradient(rng):
    for _ in range(20):
        n, h = rng.integers(2, 5), rng.integers(1, 4)
        params, fc, cov, z0 = random_instance(rng, n, h, lam=0.2, kappa=1e-2)
        z = rng.dirichlet(np.ones(n), size=h)
        path = AllocationPath(z0, z)
        full = full_hessian(path, params, cov)
        m = h * n
        fd = np.zeros((m, m))
        eps = 1e-6
        for k in range(m):
            e = np.zeros(m)
            e[k] = eps
            gp = stage_grads(z + e.reshape(h, n), z0, fc.y_hat, cov.v_hat, params.delta, params.lam, params.kappa)
            gm = stage_grads(z - e.reshape(h, n), z0, fc.y_hat, cov.v_hat, params.delta, params.lam, params.kappa)
            fd[:, k] = ((gp - gm) / (2 * eps)).ravel()
        assert np.max(np.abs(full - fd) / np.maximum(1.0, np.abs(fd))) <= 1e-5
        w = rng.standard_normal((h, n))
        hv = hessian_vp(w, z, z0, cov.v_hat, params.delta, params.lam, params.kappa)
        assert np.allclose(hv.ravel(), full @ w.ravel(), atol=1e-12)
        blk = hessian_vp(w, z, z0, cov.v_hat, params.delta, params.lam, params.kappa, coupled=False)
        assert np.allclose(blk.ravel(), full_hessian(path, params, cov, coupled=False) @ w.ravel(), atol=1e-12)


def test_decision_loss_examples(rng):
    loss, grad = decision_loss(np.full((1, 2), 0.5), np.array([[0.02, 0.02]]), np.eye(2)[None], 1.0)
    assert loss == pytest.approx(0.23, abs=1e-15)
    loss, _ = decision_loss(rng.dirichlet(np.ones(3), size=2), np.zeros((2, 3)), np.broadcast_to(np.eye(3), (2, 3, 3)),
                            1e-300)
    assert abs(loss) < 1e-299
    z = rng.dirichlet(np.ones(4), size=3)
    y = rng.standard_normal((3, 4))
    _, _, cov, _ = random_instance(rng, 4, 3)
    f = lambda s: decision_loss(s, y, cov.v_hat, 2.0)[0]
    assert np.allclose(decision_loss(z, y, cov.v_hat, 2.0)[1], _fd_grad(f, z), atol=1e-6)
