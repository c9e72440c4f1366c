"""Experiment configuration: one INI file per run, every key optional.

Example::

    [run]
    seed = 7
    out = runs/demo
    strategy = ipmo

    [data]
    synthetic = two-regime
    n_days = 2000

    [problem]
    delta = 100
    lam = 0.001
    horizon = 5

    [grid]
    lr = 1e-4, 3e-4
    lam = 0.001, 0.01
    horizon = 5
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backtest import STRATEGIES, BacktestConfig
from .bench import BenchConfig
from .core import ProblemParams, RealizedPanel
from .errors import InvalidParameterError
from .forecast import EwmaConfig, TrainHyper
from .io import generate_synthetic, load_returns_csv, two_regime_spec
from .mdfp import NeumannConfig
from .selection import Grid
from .solver import SolverConfig

_SYNTH_KEYS = {"n_assets": int, "n_days": int, "segment": int, "vol": float, "corr": float, "drift": float}


@dataclass(frozen=True)
class DataSource:
    csv: Path | None = None
    synthetic: dict = field(default_factory=dict)  # two_regime_spec keyword arguments

    def load(self, seed: int) -> RealizedPanel:
        if self.csv is not None:
            return load_returns_csv(self.csv)
        return generate_synthetic(two_regime_spec(seed=seed, **self.synthetic))


@dataclass(frozen=True)
class GradcheckConfig:
    interior: int = 20
    boundary: int = 10
    n_max: int = 4
    h_max: int = 3


@dataclass(frozen=True)
class RunConfig:
    data: DataSource = field(default_factory=DataSource)
    backtest: BacktestConfig = field(default_factory=BacktestConfig)
    grid: Grid = field(default_factory=Grid)
    bench: BenchConfig = field(default_factory=BenchConfig)
    bench_horizons: tuple = (10, 50, 100)
    bench_repetitions: int = 3
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    split: int = 600  # in-sample trading days of a selection run
    workers: int = 1
    seed: int = 0
    out: Path = Path("runs/default")

    def problem(self, n_assets: int) -> ProblemParams:
        return self.backtest.problem(n_assets)

    @property
    def solver(self) -> SolverConfig:
        return self.backtest.solver

    @property
    def neumann(self) -> NeumannConfig:
        return self.backtest.neumann


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(";", ",").split(",") if x.strip())


_OPTIONAL = {"eta": float, "start": int, "stop": int, "retrain_epochs": int}


def _coerce(proto, section):
    """Override fields of the dataclass instance ``proto`` from an INI section, typed by the current values."""
    known = {f.name for f in fields(proto)}
    kw = {}
    for key, raw in section.items():
        if key not in known:
            raise InvalidParameterError(f"[{section.name}] unknown key {key!r}")
        cur = getattr(proto, key)
        text = raw.strip()
        if cur is None or key in _OPTIONAL:
            kw[key] = None if text.lower() in ("", "none") else _OPTIONAL[key](text)
        elif isinstance(cur, bool):
            kw[key] = section.getboolean(key)
        elif isinstance(cur, int):
            kw[key] = int(text)
        elif isinstance(cur, float):
            kw[key] = float(text)
        else:
            raise InvalidParameterError(f"[{section.name}] {key!r} cannot be set from a config file")
    return replace(proto, **kw) if kw else proto


class _Section(dict):
    """Minimal stand-in for a configparser section built from a plain mapping."""

    def __init__(self, name, items):
        super().__init__(items)
        self.name = name

    def getboolean(self, key):
        return configparser.ConfigParser.BOOLEAN_STATES[self[key].strip().lower()]


def _section(cp, name):
    return cp[name] if cp.has_section(name) else {}


def load_config(path) -> RunConfig:
    """Parse an INI run file. Unknown sections or keys are errors so typos do not pass silently."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise InvalidParameterError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise InvalidParameterError(f"config file {path}: {exc}") from None
    allowed = {"run", "data", "problem", "solver", "train_solver", "neumann", "train", "ewma", "backtest", "grid",
               "bench", "gradcheck"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise InvalidParameterError(f"unknown config section(s): {sorted(extra)}")
    try:
        return _build(cp, path.parent)
    except ValueError as exc:
        if isinstance(exc, InvalidParameterError):
            raise
        raise InvalidParameterError(f"config file {path}: {exc}") from None


def _build(cp, base_dir: Path) -> RunConfig:
    run = _section(cp, "run")
    data = _section(cp, "data")
    csv_path = None
    synth = {}
    for key, raw in data.items():
        if key == "csv":
            csv_path = Path(raw.strip())
            if not csv_path.is_absolute():
                csv_path = base_dir / csv_path
            if not csv_path.exists():
                raise InvalidParameterError(f"data file {csv_path} does not exist")
        elif key == "synthetic":
            if raw.strip() != "two-regime":
                raise InvalidParameterError(f"unknown synthetic generator {raw.strip()!r}")
        elif key in _SYNTH_KEYS:
            synth[key] = _SYNTH_KEYS[key](raw)
        else:
            raise InvalidParameterError(f"[data] unknown key {key!r}")
    if csv_path is not None and synth:
        raise InvalidParameterError("[data] give either csv or synthetic settings, not both")

    bt_kw = {}
    problem = _section(cp, "problem")
    for key, raw in problem.items():
        if key not in ("delta", "lam", "kappa", "horizon"):
            raise InvalidParameterError(f"[problem] unknown key {key!r}")
        bt_kw[key] = int(raw) if key == "horizon" else float(raw)
    default = BacktestConfig()
    for name, attr in (("solver", "solver"), ("train_solver", "train_solver"), ("neumann", "neumann"),
                       ("train", "hyper"), ("ewma", "ewma")):
        if cp.has_section(name):
            bt_kw[attr] = _coerce(getattr(default, attr), cp[name])
    if cp.has_section("backtest"):
        sec = _Section("backtest", {k: v for k, v in cp["backtest"].items() if k not in ("split", "workers")})
        parsed = _coerce(default, sec)
        bt_kw.update({k: getattr(parsed, k) for k in sec})
    if "strategy" in run:
        strategy = run["strategy"].strip()
        if strategy not in STRATEGIES:
            raise InvalidParameterError(f"[run] strategy must be one of {STRATEGIES}")
        bt_kw["strategy"] = strategy
    backtest = BacktestConfig(**bt_kw)

    grid_kw = {}
    for key, raw in _section(cp, "grid").items():
        if key not in ("lr", "lam", "horizon"):
            raise InvalidParameterError(f"[grid] unknown key {key!r}")
        grid_kw[key] = _ints(raw) if key == "horizon" else _floats(raw)
    grid = Grid(lr=grid_kw.get("lr", (backtest.hyper.lr,)), lam=grid_kw.get("lam", (backtest.lam,)),
                horizon=grid_kw.get("horizon", (backtest.horizon,)))

    bench_kw = {}
    horizons = RunConfig().bench_horizons
    reps = RunConfig().bench_repetitions
    for key, raw in _section(cp, "bench").items():
        if key == "horizons":
            horizons = _ints(raw)
        elif key == "repetitions":
            reps = int(raw)
        elif key in ("n_assets", "samples", "input_len", "seed"):
            bench_kw[key] = int(raw)
        elif key in ("delta", "lam", "kappa", "lr"):
            bench_kw[key] = float(raw)
        else:
            raise InvalidParameterError(f"[bench] unknown key {key!r}")
    gradcheck = _coerce(GradcheckConfig(), cp["gradcheck"]) if cp.has_section("gradcheck") else GradcheckConfig()

    for key in run:
        if key not in ("seed", "out", "strategy", "workers"):
            raise InvalidParameterError(f"[run] unknown key {key!r}")
    split = RunConfig().split
    workers = int(run.get("workers", 1))
    if cp.has_section("backtest"):
        split = cp["backtest"].getint("split", split)
        workers = cp["backtest"].getint("workers", workers)
    if workers < 1:
        raise InvalidParameterError("workers must be >= 1")
    return RunConfig(
        data=DataSource(csv_path, synth),
        backtest=backtest,
        grid=grid,
        bench=BenchConfig(**bench_kw),
        bench_horizons=horizons,
        bench_repetitions=reps,
        gradcheck=gradcheck,
        split=split,
        workers=workers,
        seed=int(run.get("seed", 0)),
        out=Path(run.get("out", str(RunConfig().out))),
    )
