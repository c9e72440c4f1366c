"""Walk-forward MPC backtest, the two benchmark portfolios, and performance metrics.

Timing convention: on decision index ``t`` the strategy sees returns up to and
including row ``t``, chooses weights, and earns row ``t+1``. Weights are not
drifted between days: the pre-trade portfolio for the next decision is the
one just executed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import AllocationPath, CovariancePath, ForecastPath, ProblemParams, RealizedPanel, lift_start
from .errors import InsufficientDataError, InvalidParameterError, IPMOError, ShapeError
from .forecast import (EwmaConfig, IPMOState, LinearPredictor, TrainHyper, build_window, covariance_at,
                       train_ipmo, train_two_stage)
from .mdfp import NeumannConfig
from .solver import SolverConfig, solve_fixed_point

log = logging.getLogger(__name__)

STRATEGIES = ("ipmo", "two-stage", "ew", "mv")
PERIODS_PER_YEAR = 252
TURNOVER_DEFINITION = "mean over days of 0.5 * ||z_t - z_(t-1)||_1"


@dataclass(frozen=True)
class BacktestConfig:
    strategy: str = "ipmo"
    lookback_train: int = 250
    retrain_every: int = 20
    input_len: int = 120
    horizon: int = 5
    cost_bps: float = 0.0020  # one-way proportional rate on ||dz||_1 (0.0020 = 20 bps)
    delta: float = 1.0
    lam: float = 1e-3
    kappa: float = 1e-4
    ewma: EwmaConfig = field(default_factory=EwmaConfig)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-8))
    train_solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-7))
    neumann: NeumannConfig = field(default_factory=NeumannConfig)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    retrain_epochs: int | None = None  # epochs for warm-started retrains; None: same as hyper.epochs
    mv_window: int = 120
    block_average: bool = True
    init_scale: float = 0.0
    start: int | None = None  # first decision index; None: earliest with full history
    stop: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidParameterError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("lookback_train", "retrain_every", "input_len", "horizon", "mv_window"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.cost_bps < 0:
            raise InvalidParameterError("cost_bps must be >= 0")

    def problem(self, n_assets: int, horizon: int | None = None) -> ProblemParams:
        return ProblemParams(delta=self.delta, lam=self.lam, kappa=self.kappa, horizon=horizon or self.horizon,
                             n_assets=n_assets, cov_jitter=self.ewma.jitter)

    def earliest_start(self) -> int:
        if self.strategy in ("ipmo", "two-stage"):
            return self.lookback_train + self.horizon + max(self.input_len, self.ewma.window) - 2
        return max(self.mv_window, self.ewma.window) - 1

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricSet:
    ann_return: float
    ann_vol: float
    sharpe: float
    mdd: float
    calmar: float
    ret_over_avg_dd: float
    turnover: float

    def as_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


@dataclass
class BacktestReport:
    strategy: str
    dates: list
    tickers: tuple
    nav_gross: np.ndarray
    nav_net: np.ndarray
    weights: np.ndarray  # row k: holdings over the day ending dates[k]; row 0 is the starting portfolio
    metrics_gross: MetricSet
    metrics_net: MetricSet
    tv_series: np.ndarray
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


def compute_metrics(nav, weights, periods_per_year: int = PERIODS_PER_YEAR) -> MetricSet:
    """Table-style statistics of one NAV path; undefined ratios are NaN."""
    nav = np.asarray(nav, dtype=float)
    if nav.ndim != 1 or nav.size < 2:
        raise InsufficientDataError("need at least 2 NAV points")
    if np.any(nav <= 0):
        raise InvalidParameterError("NAV must stay positive")
    days = nav.size - 1
    rets = nav[1:] / nav[:-1] - 1.0
    ann_return = (nav[-1] / nav[0]) ** (periods_per_year / days) - 1.0
    ann_vol = float(np.std(rets, ddof=1 if rets.size > 1 else 0) * math.sqrt(periods_per_year))
    drawdown = 1.0 - nav / np.maximum.accumulate(nav)
    mdd = float(drawdown.max())
    avg_dd = float(drawdown.mean())
    w = np.asarray(weights, dtype=float)
    turnover = float(0.5 * np.abs(np.diff(w, axis=0)).sum(axis=1).mean()) if len(w) > 1 else 0.0
    return MetricSet(
        ann_return=float(ann_return),
        ann_vol=ann_vol,
        sharpe=float(ann_return / ann_vol) if ann_vol > 0 else math.nan,
        mdd=mdd,
        calmar=float(ann_return / mdd) if mdd > 0 else math.nan,
        ret_over_avg_dd=float(ann_return / avg_dd) if avg_dd > 0 else math.nan,
        turnover=turnover,
    )


def total_variation(weights, window: int = 20) -> np.ndarray:
    """Sum of daily L1 weight changes over consecutive non-overlapping blocks of ``window`` changes.

    A trailing partial block is dropped.
    """
    w = np.asarray(weights, dtype=float)
    if len(w) < window + 1:
        raise InsufficientDataError(f"need at least {window + 1} weight rows, got {len(w)}")
    step = np.abs(np.diff(w, axis=0)).sum(axis=1)
    k = len(step) // window
    return step[:k * window].reshape(k, window).sum(axis=1)


def mv_weights(mean, cov, delta: float, solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Single-period long-only mean-variance allocation."""
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    params = ProblemParams(delta=delta, lam=0.0, horizon=1, n_assets=n)
    res = solve_fixed_point(AllocationPath.uniform(n, 1), params, ForecastPath(mean[None]),
                            CovariancePath(np.asarray(cov, dtype=float)[None]), solver)
    if not res.converged:
        raise IPMOError("mean-variance solve did not converge")
    return res.path.stages[0]


def baseline_weights(kind: str, panel: RealizedPanel, t: int, cfg: BacktestConfig) -> np.ndarray:
    """Equal weight, or mean-variance on the trailing sample mean and the EWMA covariance at ``t``."""
    n = panel.n_assets
    if kind == "ew":
        return np.full(n, 1.0 / n)
    if kind != "mv":
        raise InvalidParameterError(f"unknown baseline {kind!r}")
    if t - cfg.mv_window + 1 < 0 or t >= panel.n_days:
        raise InsufficientDataError(f"index {t} lacks {cfg.mv_window} days of history")
    mean = panel.returns[t - cfg.mv_window + 1:t + 1].mean(axis=0)
    return mv_weights(mean, covariance_at(panel.returns, t, cfg.ewma), cfg.delta, cfg.solver)


class _ModelPolicy:
    """Forecast-then-solve policy with periodic retraining."""

    def __init__(self, cfg: BacktestConfig, panel: RealizedPanel, seed: int):
        self.cfg = cfg
        self.r = panel.returns
        n = panel.n_assets
        self.params = cfg.problem(n)
        self.model = LinearPredictor.init(n, cfg.horizon, cfg.input_len, cfg.block_average, cfg.init_scale, seed)
        self.seed = seed
        self.state = IPMOState()
        self.trained = 0
        self.last_train = None
        self.plan = None

    def retrain(self, t: int):
        cfg = self.cfg
        window = build_window(self.r, t, cfg.lookback_train, cfg.input_len, cfg.horizon, cfg.ewma)
        epochs = cfg.hyper.epochs if self.trained == 0 or cfg.retrain_epochs is None else cfg.retrain_epochs
        hyper = replace(cfg.hyper, epochs=epochs)
        seed = self.seed + self.trained
        if cfg.strategy == "two-stage":
            self.model = train_two_stage(window, self.model, hyper, seed=seed)
        else:
            if self.state.plans is not None and self.last_train is not None:
                shift = t - self.last_train
                old = self.state.plans
                fresh = np.full_like(old[:min(shift, len(old))], 1.0 / old.shape[-1])
                self.state.plans = np.concatenate([old[shift:], fresh])[-len(old):]
            self.model = train_ipmo(window, self.model, self.params, cfg.train_solver, cfg.neumann, hyper,
                                    seed=seed, state=self.state)
        self.trained += 1
        self.last_train = t

    def decide(self, t: int, z_prev: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        x = self.r[t - cfg.input_len + 1:t + 1]
        y_hat = self.model.predict_array(x)
        cov = CovariancePath.constant(covariance_at(self.r, t, cfg.ewma), cfg.horizon)
        res = solve_fixed_point(AllocationPath(z_prev, lift_start(np.broadcast_to(z_prev, (cfg.horizon, z_prev.size)))), self.params, ForecastPath(y_hat), cov,
                                cfg.solver)
        if not res.converged:
            raise IPMOError(f"solver did not converge (residual {res.residual:.2e} after {res.iters} iterations)")
        return res.path.stages[0]


def run_backtest(panel: RealizedPanel, cfg: BacktestConfig, seed: int = 0) -> BacktestReport:
    """Daily re-solve, first-step execution, proportional costs; failures hold the previous weights."""
    n = panel.n_assets
    if n < 2:
        raise ShapeError("backtests need at least 2 assets")
    start = cfg.earliest_start() if cfg.start is None else cfg.start
    if start < cfg.earliest_start():
        raise InsufficientDataError(f"start index {start} is before the earliest usable index {cfg.earliest_start()}")
    stop = panel.n_days - 1 if cfg.stop is None else min(cfg.stop, panel.n_days - 1)
    if stop - start < 1:
        raise InsufficientDataError(f"panel of {panel.n_days} days is too short for start index {start}")
    r = panel.returns
    policy = _ModelPolicy(cfg, panel, seed) if cfg.strategy in ("ipmo", "two-stage") else None
    z = np.full(n, 1.0 / n)
    weights = [z]
    gross, net = [1.0], [1.0]
    warnings = []
    for t in range(start, stop):
        try:
            if policy is not None:
                if (t - start) % cfg.retrain_every == 0:
                    policy.retrain(t)
                z_new = policy.decide(t, z)
            else:
                z_new = baseline_weights(cfg.strategy, panel, t, cfg)
        except IPMOError as exc:
            warnings.append({"index": t, "date": str(panel.dates[t]), "category": exc.category, "message": str(exc)})
            log.warning("%s on %s: %s; holding previous weights", exc.category, panel.dates[t], exc)
            z_new = z
        ret = float(z_new @ r[t + 1])
        cost = cfg.cost_bps * float(np.abs(z_new - z).sum())
        gross.append(gross[-1] * (1.0 + ret))
        net.append(net[-1] * (1.0 + ret - cost))
        weights.append(z_new)
        z = z_new
    weights = np.array(weights)
    nav_gross, nav_net = np.array(gross), np.array(net)
    tv_window = 20
    tv = total_variation(weights, tv_window) if len(weights) > tv_window else np.zeros(0)
    return BacktestReport(
        strategy=cfg.strategy,
        dates=list(panel.dates[start:stop + 1]),
        tickers=panel.tickers,
        nav_gross=nav_gross,
        nav_net=nav_net,
        weights=weights,
        metrics_gross=compute_metrics(nav_gross, weights),
        metrics_net=compute_metrics(nav_net, weights),
        tv_series=tv,
        warnings=warnings,
        config=cfg.as_dict(),
    )
