"""Entropic mirror-descent forward solver on a product of simplices."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .core import (DEFAULT_FLOOR, SIMPLEX_TOL, AllocationPath, CovariancePath, ForecastPath, ProblemParams,
                   clamp_rows)
from .errors import InvalidParameterError, NumericError
from .objective import stage_grads, turnover_curvature

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    eta: Optional[float] = None  # None: eta_fraction of the step-size bound at the initial point, capped for coupling
    tol: float = 1e-10
    max_iters: int = 50_000
    floor: float = DEFAULT_FLOOR
    eta_fraction: float = 0.5

    def __post_init__(self):
        if self.eta is not None and not self.eta > 0:
            raise InvalidParameterError(f"eta must be > 0, got {self.eta}")
        if not self.tol > 0:
            raise InvalidParameterError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise InvalidParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0 < self.eta_fraction < 1:
            raise InvalidParameterError("eta_fraction must lie in (0, 1)")


@dataclass
class SolveResult:
    path: AllocationPath
    residual: np.ndarray
    iters: np.ndarray
    converged: np.ndarray
    eta: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def _md_map(stages, z_init, y_hat, v_hat, eta, delta, lam, kappa):
    g = stage_grads(stages, z_init, y_hat, v_hat, delta, lam, kappa)
    with np.errstate(over="ignore", invalid="ignore"):
        a = -eta * g
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite gradient in mirror-descent step")
    a -= a.max(axis=-1, keepdims=True)
    r = stages * np.exp(a)
    return r / r.sum(axis=-1, keepdims=True)


def _as_eta(eta, batch_shape):
    eta = np.asarray(eta, dtype=float)
    return np.broadcast_to(eta, batch_shape)[..., None, None] if batch_shape else eta


def md_step(path: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath, eta) -> AllocationPath:
    """One simultaneous (all stages at once) entropic mirror-descent step."""
    if np.any(np.asarray(eta) <= 0):
        raise InvalidParameterError(f"eta must be > 0, got {eta}")
    batch = path.stages.shape[:-2]
    new = _md_map(path.stages, path.z_init, fc.y_hat, cov.v_hat, _as_eta(eta, batch),
                  params.delta, params.lam, params.kappa)
    return path.replace_stages(new)


def _bound_arrays(stages, z_init, v_hat, delta, lam, kappa):
    n = stages.shape[-1]
    q = delta * v_hat
    if lam:
        c = turnover_curvature(stages, z_init, kappa)
        diag = c.copy()
        diag[..., :-1, :] += c[..., 1:, :]
        idx = np.arange(n)
        q = q.copy()
        q[..., idx, idx] += lam * diag
    q_norm = np.linalg.eigvalsh(q)[..., -1]
    tau = q_norm * stages.max(axis=-1)
    return np.min(2.0 / tau, axis=-1)


def _coupled_bound_arrays(stages, z_init, v_hat, delta, lam, kappa):
    # Gershgorin bound on the full tri-diagonal Hessian, times the largest weight anywhere
    q_norm = delta * np.linalg.eigvalsh(v_hat)[..., -1]
    if lam:
        c = turnover_curvature(stages, z_init, kappa)
        pair = c.copy()
        pair[..., :-1, :] += c[..., 1:, :]
        q_norm = q_norm + 2.0 * lam * pair.max(axis=-1)
    tau = q_norm.max(axis=-1) * stages.max(axis=(-2, -1))
    return 2.0 / tau


def coupled_step_bound(path: AllocationPath, params: ProblemParams, cov: CovariancePath):
    """Step bound that also covers the cross-stage turnover coupling of the simultaneous map.

    Never larger than :func:`step_size_bound`; below it the full Jacobian, not
    just its diagonal blocks, has spectral radius under one.
    """
    b = _coupled_bound_arrays(path.stages, path.z_init, cov.v_hat, params.delta, params.lam, params.kappa)
    return float(b) if np.ndim(b) == 0 else b


def step_size_bound(path: AllocationPath, params: ProblemParams, cov: CovariancePath):
    """Largest step keeping every stage Jacobian's spectral radius below one.

    Equals min_s 2 / (||Q_s||_2 * max_i z_{s,i}), with Q_s the diagonal Hessian block.
    """
    b = _bound_arrays(path.stages, path.z_init, cov.v_hat, params.delta, params.lam, params.kappa)
    return float(b) if np.ndim(b) == 0 else b


COUPLED_SAFETY = _kernels.COUPLED_SAFETY


def _auto_eta(stages, z_init, v_hat, params, fraction):
    args = (stages, z_init, v_hat, params.delta, params.lam, params.kappa)
    block = _bound_arrays(*args)
    coupled = _coupled_bound_arrays(*args)
    return np.minimum(fraction * block, COUPLED_SAFETY * coupled), block, coupled


def _solve_arrays(stages, z_init, y_hat, v_hat, eta, params, config, fixed_eta):
    batch = stages.shape[:-2]
    flat = int(np.prod(batch)) if batch else 1
    h, n = stages.shape[-2:]
    z = np.ascontiguousarray(stages.reshape(flat, h, n), dtype=float).copy()
    z0 = np.ascontiguousarray(np.broadcast_to(z_init, batch + (n,)).reshape(flat, n), dtype=float)
    y = np.ascontiguousarray(np.broadcast_to(y_hat, batch + (h, n)).reshape(flat, h, n), dtype=float)
    v = np.ascontiguousarray(np.broadcast_to(v_hat, batch + (h, n, n)).reshape(flat, h, n, n), dtype=float)
    vmax = np.linalg.eigvalsh(v)[..., -1]
    eta = np.broadcast_to(np.asarray(eta, dtype=float), batch).reshape(flat).copy()
    residual = np.full(flat, np.inf)
    iters = np.zeros(flat, dtype=np.int64)
    converged = np.zeros(flat, dtype=bool)
    ok = _kernels.solve_batch(z, z0, y, v, vmax, eta, fixed_eta, config.eta_fraction, float(params.delta),
                              float(params.lam), float(params.kappa), config.tol, config.max_iters, config.floor,
                              SIMPLEX_TOL, residual, iters, converged)
    if not ok:
        raise NumericError("non-finite gradient in mirror-descent step")
    out_shape = batch if batch else ()
    return (z.reshape(batch + (h, n)), residual.reshape(out_shape), iters.reshape(out_shape),
            converged.reshape(out_shape), eta.reshape(out_shape))


def solve_fixed_point(init: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
                      config: SolverConfig = SolverConfig()) -> SolveResult:
    """Iterate the floor-clamped mirror-descent map until its fixed-point residual drops below ``tol``.

    The residual is the sup-norm change of one clamped step. Non-convergence is
    reported through ``converged`` rather than raised.
    """
    stages = clamp_rows(init.stages, config.floor)
    batch = stages.shape[:-2]
    if config.eta is None:
        eta, _, _ = _auto_eta(stages, init.z_init, cov.v_hat, params, config.eta_fraction)
        fixed = False
    else:
        eta = np.broadcast_to(config.eta, batch)
        fixed = True
    z, res, it, conv, eta = _solve_arrays(stages, init.z_init, fc.y_hat, cov.v_hat, eta, params, config, fixed)
    if not batch:
        res, it, conv, eta = float(res), int(it), bool(conv), float(eta)
    return SolveResult(AllocationPath(init.z_init, z), res, it, conv, eta)


def fixed_point_residual(path: AllocationPath, params, fc, cov, eta, floor=DEFAULT_FLOOR):
    """Sup-norm change of one clamped mirror-descent step from ``path``."""
    new = clamp_rows(md_step(path, params, fc, cov, eta).stages, floor)
    r = np.abs(new - path.stages).max(axis=(-2, -1))
    return float(r) if np.ndim(r) == 0 else r
