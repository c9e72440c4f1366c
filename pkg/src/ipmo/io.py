"""Return-panel CSV ingestion/export and the seeded synthetic regime generator."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RealizedPanel
from .errors import InvalidParameterError, LoadError, ShapeError

SYNTH_START = dt.date(2000, 1, 3)


def load_returns_csv(path) -> RealizedPanel:
    """Parse a wide ``date,T1,...,TN`` file of decimal daily returns.

    Row numbers in errors are 1-based file lines (the header is line 1).
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "date":
            raise LoadError("header must start with 'date'", row=1, column=header[0] if header else None)
        tickers = [h.strip() for h in header[1:]]
        if not tickers:
            raise LoadError("no asset columns in header", row=1)
        if any(not t for t in tickers):
            raise LoadError("empty ticker name in header", row=1)
        if len(set(tickers)) != len(tickers):
            raise LoadError("duplicate ticker in header", row=1)
        dates, rows = [], []
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise LoadError(f"expected {len(header)} fields, found {len(rec)}", row=line_no)
            try:
                d = dt.date.fromisoformat(rec[0].strip())
            except ValueError:
                raise LoadError(f"unparseable date {rec[0]!r}", row=line_no, column="date") from None
            if dates and d == dates[-1]:
                raise LoadError(f"duplicate date {d}", row=line_no, column="date")
            if dates and d < dates[-1]:
                raise LoadError(f"date {d} is before {dates[-1]} (rows must be ascending)", row=line_no,
                                column="date")
            vals = []
            for tick, cell in zip(tickers, rec[1:]):
                cell = cell.strip()
                if not cell:
                    raise LoadError("missing value", row=line_no, column=tick)
                try:
                    x = float(cell)
                except ValueError:
                    raise LoadError(f"unparseable number {cell!r}", row=line_no, column=tick) from None
                if not math.isfinite(x):
                    raise LoadError(f"non-finite value {cell!r}", row=line_no, column=tick)
                vals.append(x)
            dates.append(d)
            rows.append(vals)
    if not rows:
        raise LoadError("no data rows")
    return RealizedPanel(dates, np.array(rows), tuple(tickers))


def save_returns_csv(panel: RealizedPanel, path) -> None:
    """Inverse of :func:`load_returns_csv`; ``repr`` floats make the round trip exact."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.tickers])
        for d, row in zip(panel.dates, panel.returns):
            w.writerow([d.isoformat(), *(repr(float(x)) for x in row)])


@dataclass(frozen=True)
class Regime:
    mean: tuple
    cov: tuple
    length: int


@dataclass(frozen=True)
class SyntheticSpec:
    regimes: tuple
    seed: int = 0
    tickers: tuple = ()


def business_days(start: dt.date, n: int) -> list:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise InvalidParameterError("regime covariance is not symmetric")
    w, u = np.linalg.eigh(cov)
    if w.min() < -1e-12 * max(1.0, w.max()):
        raise InvalidParameterError(f"regime covariance is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return u * np.sqrt(np.clip(w, 0.0, None))


def generate_synthetic(spec: SyntheticSpec) -> RealizedPanel:
    """Concatenate Gaussian return segments, one per regime, from a single seeded stream.

    A zero covariance is accepted and yields constant returns; indefinite ones are rejected.
    """
    if not spec.regimes:
        raise InvalidParameterError("at least one regime is required")
    n = len(spec.regimes[0].mean)
    if n < 2:
        raise ShapeError("synthetic panels need at least 2 assets")
    rng = np.random.default_rng(spec.seed)
    parts = []
    for k, reg in enumerate(spec.regimes):
        mean = np.asarray(reg.mean, dtype=float)
        cov = np.asarray(reg.cov, dtype=float)
        if mean.shape != (n,) or cov.shape != (n, n):
            raise ShapeError(f"regime {k}: mean {mean.shape} / covariance {cov.shape} do not match N={n}")
        if reg.length < 1:
            raise InvalidParameterError(f"regime {k}: length must be >= 1")
        fac = _psd_factor(cov)
        parts.append(mean + rng.standard_normal((reg.length, n)) @ fac.T)
    returns = np.concatenate(parts)
    tickers = tuple(spec.tickers) or tuple(f"A{i + 1}" for i in range(n))
    return RealizedPanel(business_days(SYNTH_START, len(returns)), returns, tickers)


def two_regime_spec(n_assets: int = 7, n_days: int = 2000, segment: int = 250, seed: int = 0,
                    vol: float = 0.01, corr: float = 0.3, drift: float = 1e-3) -> SyntheticSpec:
    """Alternating bull/bear segments: in one regime the first half of the assets drift up and the
    rest down, and the roles swap in the other. Used by the directional backtest experiment."""
    half = n_assets // 2
    up = np.array([drift if i < half else -drift / 2 for i in range(n_assets)])
    down = np.array([-drift / 2 if i < half else drift for i in range(n_assets)])
    vols = vol * np.linspace(0.8, 1.2, n_assets)
    c = np.full((n_assets, n_assets), corr)
    np.fill_diagonal(c, 1.0)
    cov = (vols[:, None] * vols[None, :] * c)
    regimes, left, k = [], n_days, 0
    while left > 0:
        m = min(segment, left)
        regimes.append(Regime(tuple((up if k % 2 == 0 else down).tolist()), tuple(map(tuple, cov.tolist())), m))
        left -= m
        k += 1
    return SyntheticSpec(tuple(regimes), seed)
