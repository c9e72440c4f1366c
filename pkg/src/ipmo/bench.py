"""Wall-clock cost of a training epoch as the planning horizon grows: Neumann pullback vs dense KKT."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

from .core import ProblemParams
from .errors import InvalidParameterError
from .forecast import EwmaConfig, IPMOState, LinearPredictor, TrainHyper, build_window, train_ipmo
from .io import generate_synthetic, two_regime_spec
from .mdfp import NeumannConfig
from .solver import SolverConfig

METHODS = ("mdfp", "kkt")


@dataclass(frozen=True)
class BenchConfig:
    n_assets: int = 7
    samples: int = 16
    input_len: int = 20
    delta: float = 100.0
    lam: float = 0.01
    kappa: float = 0.01
    lr: float = 1e-4
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-7))
    neumann: NeumannConfig = field(default_factory=NeumannConfig)
    ewma: EwmaConfig = field(default_factory=lambda: EwmaConfig(window=20))
    seed: int = 0


@dataclass
class BenchResult:
    horizons: tuple
    seconds: dict  # method -> per-horizon medians
    raw: dict = field(default_factory=dict)  # method -> per-horizon lists of epoch times

    def __post_init__(self):
        for method, ts in self.seconds.items():
            if len(ts) != len(self.horizons) or any(not t > 0 for t in ts):
                raise InvalidParameterError(f"{method}: need one positive time per horizon")

    def ratio(self, method: str) -> float:
        """Median epoch time at the largest horizon over that at the smallest."""
        ts = self.seconds[method]
        return ts[-1] / ts[0]

    def rows(self) -> list:
        return [{"method": m, "horizon": h, "median_seconds": t}
                for m, ts in self.seconds.items() for h, t in zip(self.horizons, ts)]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "horizon", "median_seconds"], lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({**row, "median_seconds": f"{row['median_seconds']:.6f}"})


def _epoch_times(window, model, params, cfg: BenchConfig, method: str, repetitions: int) -> list:
    hyper = TrainHyper(lr=cfg.lr, epochs=1)
    state = IPMOState()
    # the untimed first epoch fills the warm-start cache, as in steady-state training
    model = train_ipmo(window, model, params, cfg.solver, cfg.neumann, hyper, state=state, backward=method)
    out = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model = train_ipmo(window, model, params, cfg.solver, cfg.neumann, hyper, state=state, backward=method)
        out.append(time.perf_counter() - t0)
    return out


def bench_runtime(horizons, base: BenchConfig = BenchConfig(), repetitions: int = 3,
                  methods=METHODS) -> BenchResult:
    """Median wall time of one full training epoch (forward solves, pullback, parameter step) per horizon.

    Both methods train the same initial model on the same window; only the
    gradient of the decision loss w.r.t. the forecasts differs.
    """
    horizons = tuple(int(h) for h in horizons)
    if not horizons or any(b <= a for a, b in zip(horizons, horizons[1:])) or horizons[0] < 1:
        raise InvalidParameterError(f"horizons must be positive and strictly ascending, got {horizons}")
    if repetitions < 1:
        raise InvalidParameterError("repetitions must be >= 1")
    for m in methods:
        if m not in METHODS:
            raise InvalidParameterError(f"unknown method {m!r}")
    need = base.samples + base.input_len + horizons[-1] + base.ewma.window
    panel = generate_synthetic(two_regime_spec(n_assets=base.n_assets, n_days=need + 5, seed=base.seed))
    seconds = {m: [] for m in methods}
    raw = {m: [] for m in methods}
    for h in horizons:
        # the same sample dates at every horizon; only the target length changes
        t = base.samples + h + max(base.input_len, base.ewma.window) - 2
        window = build_window(panel.returns, t, base.samples, base.input_len, h, base.ewma)
        params = ProblemParams(delta=base.delta, lam=base.lam, kappa=base.kappa, horizon=h, n_assets=base.n_assets,
                               cov_jitter=base.ewma.jitter)
        model0 = LinearPredictor.init(base.n_assets, h, base.input_len, scale=0.1, seed=base.seed)
        for m in methods:
            ts = _epoch_times(window, model0.copy(), params, base, m, repetitions)
            raw[m].append(ts)
            seconds[m].append(median(ts))
    return BenchResult(horizons, seconds, raw)

