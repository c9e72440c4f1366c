"""Shared domain types and simplex utilities.

Arrays are row-major: a plan over ``H`` stages for ``N`` assets is an
``(H, N)`` array whose row ``s`` holds the weights for stage ``s + 1``.
Every container accepts optional leading batch dimensions, so a batch of
``B`` plans is simply ``(B, H, N)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidParameterError, ShapeError

SIMPLEX_TOL = 1e-12
WARM_MIX = 0.01
DEFAULT_FLOOR = 1e-8


@dataclass(frozen=True)
class ProblemParams:
    """Parameters of the smoothed multi-period mean-variance program."""

    delta: float = 1.0
    lam: float = 0.0
    kappa: float = 1e-4
    horizon: int = 1
    n_assets: int = 2
    cov_jitter: float = 1e-6

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidParameterError(f"delta must be > 0, got {self.delta}")
        if not self.kappa > 0:
            raise InvalidParameterError(f"kappa must be > 0, got {self.kappa}")
        if not self.lam >= 0:
            raise InvalidParameterError(f"lambda must be >= 0, got {self.lam}")
        if int(self.horizon) < 1:
            raise InvalidParameterError(f"horizon must be >= 1, got {self.horizon}")
        if int(self.n_assets) < 2:
            raise InvalidParameterError(f"n_assets must be >= 2, got {self.n_assets}")
        if not self.cov_jitter >= 0:
            raise InvalidParameterError(f"cov_jitter must be >= 0, got {self.cov_jitter}")

    def with_(self, **changes) -> "ProblemParams":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return ProblemParams(**values)


@dataclass(frozen=True)
class AllocationPath:
    """Pre-trade weights ``z_init`` (..., N) and planned stages (..., H, N)."""

    z_init: np.ndarray
    stages: np.ndarray

    def __post_init__(self):
        z0 = np.asarray(self.z_init, dtype=float)
        zs = np.asarray(self.stages, dtype=float)
        if zs.ndim < 2:
            raise ShapeError(f"stages must be at least 2-d (H, N), got shape {zs.shape}")
        if z0.shape[-1] != zs.shape[-1] or z0.shape[:-1] != zs.shape[:-2]:
            raise ShapeError(f"z_init shape {z0.shape} incompatible with stages shape {zs.shape}")
        object.__setattr__(self, "z_init", z0)
        object.__setattr__(self, "stages", zs)

    @property
    def horizon(self) -> int:
        return self.stages.shape[-2]

    @property
    def n_assets(self) -> int:
        return self.stages.shape[-1]

    @classmethod
    def hold(cls, z_init, horizon: int) -> "AllocationPath":
        """Plan that keeps ``z_init`` at every stage."""
        z0 = np.asarray(z_init, dtype=float)
        stages = np.repeat(z0[..., None, :], horizon, axis=-2)
        return cls(z0, stages)

    @classmethod
    def uniform(cls, n_assets: int, horizon: int) -> "AllocationPath":
        return cls.hold(np.full(n_assets, 1.0 / n_assets), horizon)

    def replace_stages(self, stages) -> "AllocationPath":
        return AllocationPath(self.z_init, stages)

    def is_feasible(self, tol: float = SIMPLEX_TOL) -> bool:
        return simplex_residual(self) <= tol


@dataclass(frozen=True)
class ForecastPath:
    """Predicted per-stage simple returns, shape (..., H, N)."""

    y_hat: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_hat, dtype=float)
        if y.ndim < 2:
            raise ShapeError(f"y_hat must be (H, N), got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise InvalidParameterError("forecast contains non-finite entries")
        object.__setattr__(self, "y_hat", y)


@dataclass(frozen=True)
class CovariancePath:
    """Per-stage covariance matrices, shape (..., H, N, N)."""

    v_hat: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v_hat, dtype=float)
        if v.ndim < 3 or v.shape[-1] != v.shape[-2]:
            raise ShapeError(f"v_hat must be (H, N, N), got shape {v.shape}")
        object.__setattr__(self, "v_hat", v)

    @classmethod
    def constant(cls, cov, horizon: int) -> "CovariancePath":
        cov = np.asarray(cov, dtype=float)
        return cls(np.repeat(cov[..., None, :, :], horizon, axis=-3))

    def check(self, jitter: float = 0.0) -> None:
        """Raise unless every matrix is symmetric and ``V - jitter*I`` factorizes."""
        v = self.v_hat
        if np.max(np.abs(v - np.swapaxes(v, -1, -2)), initial=0.0) > SIMPLEX_TOL * max(1.0, np.abs(v).max()):
            raise InvalidParameterError("covariance matrices are not symmetric")
        shifted = v - jitter * (1 - 1e-12) * np.eye(v.shape[-1])
        try:
            np.linalg.cholesky(shifted)
        except np.linalg.LinAlgError as exc:
            raise InvalidParameterError("covariance matrix is not positive definite") from exc


@dataclass(frozen=True)
class RealizedPanel:
    """Realized daily simple returns indexed by strictly increasing dates."""

    dates: Sequence
    returns: np.ndarray
    tickers: tuple = field(default=())

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        if r.ndim != 2:
            raise ShapeError(f"returns must be (T, N), got shape {r.shape}")
        dates = list(self.dates)
        if len(dates) != r.shape[0]:
            raise ShapeError(f"{len(dates)} dates for {r.shape[0]} return rows")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise InvalidParameterError("dates must be strictly increasing")
        if not np.all(np.isfinite(r)):
            raise InvalidParameterError("returns contain missing or non-finite entries")
        tickers = tuple(self.tickers) or tuple(f"A{i}" for i in range(r.shape[1]))
        if len(tickers) != r.shape[1]:
            raise ShapeError(f"{len(tickers)} tickers for {r.shape[1]} columns")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "tickers", tickers)

    @property
    def n_days(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def slice(self, start: int, stop: int) -> "RealizedPanel":
        return RealizedPanel(self.dates[start:stop], self.returns[start:stop], self.tickers)


def clamp_rows(z: np.ndarray, floor: float) -> np.ndarray:
    """Array form of :func:`clamp_floor` acting on the last axis."""
    z = np.asarray(z, dtype=float)
    n = z.shape[-1]
    if not 0 < floor < 1.0 / n:
        raise InvalidParameterError(f"floor must lie in (0, 1/N) = (0, {1.0 / n:.6g}), got {floor}")
    low = z < floor
    row_sum = z.sum(axis=-1)
    needs = low.any(axis=-1) | (np.abs(row_sum - 1.0) > SIMPLEX_TOL)
    if not needs.any():
        return z
    out = z.copy()
    rows = out[needs]
    pinned = rows < floor
    # pinning a coordinate shrinks the rest, which can push more coordinates below the floor
    for _ in range(n):
        free_mass = 1.0 - floor * pinned.sum(axis=-1)
        free_sum = np.where(pinned, 0.0, rows).sum(axis=-1)
        scaled = np.where(pinned, floor, rows * (free_mass / free_sum)[..., None])
        newly = (~pinned) & (scaled < floor)
        if not newly.any():
            break
        pinned |= newly
    out[needs] = scaled
    return out


def clamp_floor(path: AllocationPath, floor: float = DEFAULT_FLOOR) -> AllocationPath:
    """Raise every stage coordinate to at least ``floor`` and rescale the rest onto the simplex.

    Rows that are already feasible with all coordinates at or above the floor are
    returned untouched, which makes the operation exactly idempotent.
    """
    return path.replace_stages(clamp_rows(path.stages, floor))


def lift_start(stages, mix: float = WARM_MIX) -> np.ndarray:
    """Blend a warm start with the uniform portfolio so no coordinate sits near zero.

    Vertices are fixed points of the multiplicative update: a weight parked at the
    floor moves by less than any practical tolerance per step, so a solve warm-started
    there can stop at the wrong point.
    """
    stages = np.asarray(stages, dtype=float)
    return (1.0 - mix) * stages + mix / stages.shape[-1]


def simplex_residual(path) -> float:
    """Largest row-sum violation plus the magnitude of the most negative entry."""
    stages = path.stages if isinstance(path, AllocationPath) else np.asarray(path, dtype=float)
    sum_err = np.abs(stages.sum(axis=-1) - 1.0).max(initial=0.0)
    neg = max(0.0, -float(stages.min(initial=0.0)))
    return float(sum_err + neg)
