import logging
import math

import numpy as np
import pytest

from ipmo.backtest import (BacktestConfig, _ModelPolicy, baseline_weights, compute_metrics, mv_weights,
                           run_backtest, total_variation)
from ipmo.core import RealizedPanel
from ipmo.errors import InsufficientDataError, InvalidParameterError, ShapeError
from ipmo.forecast import EwmaConfig, TrainHyper
from ipmo.io import business_days
from ipmo.solver import SolverConfig


def _panel(seed=0, days=160, n=3, vol=0.01):
    rng = np.random.default_rng(seed)
    r = vol * rng.standard_normal((days, n)) + 0.001 * np.linspace(1, -1, n)
    return RealizedPanel(business_days(np.datetime64("2010-01-04").astype(object), days), r)


def _small(strategy, **kw):
    base = dict(strategy=strategy, lookback_train=20, retrain_every=15, input_len=10, horizon=2, delta=100.0,
                lam=0.01, kappa=0.01, mv_window=20, ewma=EwmaConfig(window=10),
                hyper=TrainHyper(lr=1e-4, epochs=2))
    base.update(kw)
    return BacktestConfig(**base)


# metrics

def test_mdd_hand_fixture():
    m = compute_metrics([1.0, 1.2, 0.9, 1.1], np.full((4, 2), 0.5))
    assert m.mdd == 0.25
    assert m.calmar == pytest.approx(m.ann_return / 0.25)


def test_monotone_nav_has_no_drawdown():
    m = compute_metrics([1.0, 1.01, 1.02, 1.05], np.full((4, 2), 0.5))
    assert m.mdd == 0.0
    assert math.isnan(m.calmar) and math.isnan(m.ret_over_avg_dd)


def test_flat_nav_sharpe_undefined():
    m = compute_metrics([1.0, 1.0, 1.0], np.full((3, 2), 0.5))
    assert m.ann_vol == 0.0 and math.isnan(m.sharpe)
    assert m.as_json()["sharpe"] is None


def test_metric_formulas():
    nav = np.array([1.0, 1.01, 0.99, 1.02, 1.03])
    m = compute_metrics(nav, np.full((5, 2), 0.5))
    rets = nav[1:] / nav[:-1] - 1
    assert m.ann_return == pytest.approx(1.03 ** (252 / 4) - 1)
    assert m.ann_vol == pytest.approx(rets.std(ddof=1) * math.sqrt(252))
    assert m.sharpe == pytest.approx(m.ann_return / m.ann_vol)
    with pytest.raises(InsufficientDataError):
        compute_metrics([1.0], np.ones((1, 2)))


def test_single_switch_turnover_is_one():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert compute_metrics([1.0, 1.0], w).turnover == 1.0


def test_total_variation_fixtures():
    w = np.tile([1.0, 0.0], (21, 1))
    w[10:] = [0.0, 1.0]
    np.testing.assert_array_equal(total_variation(w), [2.0])
    np.testing.assert_array_equal(total_variation(np.full((41, 3), 1 / 3)), [0.0, 0.0])
    # three changes by hand: 0.2 + 0.6 + 1.0
    w = np.full((21, 2), 0.5)
    w[3:] = [0.6, 0.4]
    w[7:] = [0.3, 0.7]
    w[15:] = [0.8, 0.2]
    np.testing.assert_allclose(total_variation(w), [0.2 + 0.6 + 1.0], atol=1e-15)
    with pytest.raises(InsufficientDataError):
        total_variation(np.ones((20, 2)) / 2)


# baselines

def test_mv_two_asset_example():
    np.testing.assert_allclose(mv_weights([0.1, 0.0], np.eye(2), 1.0, SolverConfig(tol=1e-12)), [0.55, 0.45],
                               atol=1e-8)


def test_mv_symmetric_is_uniform():
    v = 0.5 * np.eye(4) + 0.1
    np.testing.assert_allclose(mv_weights(np.full(4, 0.01), v, 2.0), 0.25, atol=1e-12)


def test_baseline_ew_and_history_check():
    panel = _panel(n=7)
    cfg = _small("ew")
    np.testing.assert_array_equal(baseline_weights("ew", panel, 50, cfg), np.full(7, 1 / 7))
    with pytest.raises(InsufficientDataError):
        baseline_weights("mv", panel, 5, _small("mv"))


# run_backtest

def test_ew_backtest_no_turnover():
    panel = _panel(n=7)
    rep = run_backtest(panel, _small("ew"), 0)
    np.testing.assert_array_equal(rep.weights, 1 / 7)
    assert rep.metrics_net.turnover == 0.0
    assert np.array_equal(rep.nav_gross, rep.nav_net)


def test_zero_cost_nav_identical():
    panel = _panel()
    for strategy in ("mv", "two-stage"):
        rep = run_backtest(panel, _small(strategy, cost_bps=0.0), 0)
        assert np.array_equal(rep.nav_gross, rep.nav_net)
        assert rep.metrics_gross == rep.metrics_net


def test_costs_reduce_net_after_first_trade():
    rep = run_backtest(_panel(), _small("mv"), 0)
    steps = np.abs(np.diff(rep.weights, axis=0)).sum(axis=1)
    first = int(np.flatnonzero(steps > 0)[0])
    assert np.all(rep.nav_net[:first + 1] == rep.nav_gross[:first + 1])
    assert np.all(rep.nav_net[first + 1:] < rep.nav_gross[first + 1:])


def test_accounting_identity():
    panel = _panel()
    cfg = _small("mv", cost_bps=0.002)
    rep = run_backtest(panel, cfg, 0)
    start = cfg.earliest_start()
    r = panel.returns[start + 1:start + len(rep.weights)]
    gross = np.cumprod(1 + (rep.weights[1:] * r).sum(axis=1))
    cost = 0.002 * np.abs(np.diff(rep.weights, axis=0)).sum(axis=1)
    net = np.cumprod(1 + (rep.weights[1:] * r).sum(axis=1) - cost)
    np.testing.assert_allclose(rep.nav_gross[1:], gross, rtol=1e-13)
    np.testing.assert_allclose(rep.nav_net[1:], net, rtol=1e-13)
    assert np.allclose(rep.weights.sum(axis=1), 1, atol=1e-9) and rep.weights.min() >= 0


def test_determinism():
    panel = _panel()
    for strategy in ("two-stage", "ipmo"):
        cfg = _small(strategy, stop=90)
        a, b = run_backtest(panel, cfg, 3), run_backtest(panel, cfg, 3)
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.nav_net, b.nav_net)


def test_no_look_ahead():
    panel = _panel()
    for strategy in ("mv", "two-stage", "ipmo"):
        cfg = _small(strategy, stop=100)
        base = run_backtest(panel, cfg, 0)
        cut = 80
        r = panel.returns.copy()
        r[cut + 1:] += np.random.default_rng(9).normal(0, 0.05, r[cut + 1:].shape)
        moved = run_backtest(RealizedPanel(panel.dates, r, panel.tickers), cfg, 0)
        k = cut - cfg.earliest_start() + 2  # rows decided on data dated <= cut
        assert np.array_equal(base.weights[:k], moved.weights[:k])
        assert not np.array_equal(base.weights, moved.weights)


def test_single_asset_rejected():
    panel = RealizedPanel(business_days(np.datetime64("2010-01-04").astype(object), 50), np.zeros((50, 1)))
    with pytest.raises(ShapeError):
        run_backtest(panel, _small("ew"), 0)


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        BacktestConfig(cost_bps=-1)
    with pytest.raises(InvalidParameterError):
        BacktestConfig(strategy="momentum")
    with pytest.raises(InvalidParameterError):
        BacktestConfig(retrain_every=0)
    with pytest.raises(InsufficientDataError):
        run_backtest(_panel(days=30), _small("two-stage"), 0)


def test_solver_failure_holds_weights(caplog):
    cfg = _small("mv", solver=SolverConfig(tol=1e-14, max_iters=1))
    with caplog.at_level(logging.WARNING):
        rep = run_backtest(_panel(), cfg, 0)
    np.testing.assert_array_equal(rep.weights, 1 / 3)
    assert len(rep.warnings) == len(rep.weights) - 1
    assert rep.warnings[0]["category"] == "error" and "converge" in rep.warnings[0]["message"]


def test_single_stage_model_matches_mv():
    # H = 1, no turnover, forecasts equal to the trailing sample mean: the model policy is the MV baseline
    panel = _panel(n=4)
    solver = SolverConfig(tol=1e-13, max_iters=500_000)
    cfg = _small("two-stage", horizon=1, lam=0.0, input_len=20, mv_window=20, solver=solver, delta=200.0)
    pol = _ModelPolicy(cfg, panel, 0)
    pol.model.weights[:] = 1.0 / pol.model.weights.shape[-1]
    pol.model.bias[:] = 0.0
    for t in (60, 90, 120):
        np.testing.assert_allclose(pol.decide(t, np.full(4, 0.25)), baseline_weights("mv", panel, t, cfg), atol=1e-7)
