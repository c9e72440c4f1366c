"""Smoothed multi-period mean-variance objective and the outer decision loss.

The inner program is

    F(z) = sum_s (delta/2) z_s' V_s z_s - y_s' z_s + lam * sum_i sqrt((z_s - z_{s-1})_i^2 + kappa)

with ``z_0`` the fixed pre-trade allocation. All kernels accept leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AllocationPath, CovariancePath, ForecastPath, ProblemParams
from .errors import InvalidParameterError, PreconditionError, ShapeError


def smooth_abs(x, kappa: float):
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be > 0, got {kappa}")
    return np.sqrt(np.square(x) + kappa)


def smooth_abs_grad(x, kappa: float):
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be > 0, got {kappa}")
    return x / np.sqrt(np.square(x) + kappa)


def smooth_abs_curv(x, kappa: float):
    """Second derivative kappa / (x^2 + kappa)^(3/2)."""
    return kappa / (np.square(x) + kappa) ** 1.5


@dataclass(frozen=True)
class ObjectiveEval:
    value: np.ndarray
    stage_grads: np.ndarray


def trades(stages: np.ndarray, z_init: np.ndarray) -> np.ndarray:
    """Per-stage rebalancing vectors z_s - z_{s-1}."""
    prev = np.concatenate([z_init[..., None, :], stages[..., :-1, :]], axis=-2)
    return stages - prev


def _matvec(v_hat, stages):
    return np.einsum("...ij,...j->...i", v_hat, stages)


def _check_shapes(stages, z_init, y_hat, v_hat):
    h, n = stages.shape[-2:]
    if z_init.shape[-1] != n:
        raise ShapeError(f"z_init has {z_init.shape[-1]} assets, stages have {n}")
    if y_hat.shape[-2:] != (h, n):
        raise ShapeError(f"forecast shape {y_hat.shape} does not match plan shape {stages.shape}")
    if v_hat.shape[-3:] != (h, n, n):
        raise ShapeError(f"covariance shape {v_hat.shape} does not match plan shape {stages.shape}")


def value_and_grad(stages, z_init, y_hat, v_hat, delta, lam, kappa, check=True):
    """Objective value (batch-shaped) and its (..., H, N) gradient."""
    if check:
        _check_shapes(stages, z_init, y_hat, v_hat)
    vz = _matvec(v_hat, stages)
    d = trades(stages, z_init)
    rho = np.sqrt(d * d + kappa)
    value = (0.5 * delta * np.sum(stages * vz, axis=(-2, -1))
             - np.sum(y_hat * stages, axis=(-2, -1))
             + lam * np.sum(rho, axis=(-2, -1)))
    grad = delta * vz - y_hat
    if lam:
        dr = d / rho
        grad = grad + lam * dr
        grad[..., :-1, :] -= lam * dr[..., 1:, :]
    return value, grad


def stage_grads(stages, z_init, y_hat, v_hat, delta, lam, kappa):
    """Gradient of the objective only; skips the value computation."""
    grad = delta * _matvec(v_hat, stages) - y_hat
    if lam:
        d = trades(stages, z_init)
        dr = d / np.sqrt(d * d + kappa)
        grad = grad + lam * dr
        grad[..., :-1, :] -= lam * dr[..., 1:, :]
    return grad


def turnover_curvature(stages, z_init, kappa):
    """rho''(z_s - z_{s-1}) for every stage, shape (..., H, N)."""
    return smooth_abs_curv(trades(stages, z_init), kappa)


def hessian_vp(w, stages, z_init, v_hat, delta, lam, kappa, coupled=True, curv=None):
    """Hessian-vector product of the objective in direction ``w`` (..., H, N).

    ``coupled=False`` keeps only the per-stage diagonal blocks, dropping the
    cross-stage turnover terms.
    """
    out = delta * _matvec(v_hat, w)
    if not lam:
        return out
    c = turnover_curvature(stages, z_init, kappa) if curv is None else curv
    if coupled:
        dw = trades(w, np.zeros_like(w[..., 0, :]))
        flow = lam * c * dw
        out = out + flow
        out[..., :-1, :] -= flow[..., 1:, :]
    else:
        diag = c.copy()
        diag[..., :-1, :] += c[..., 1:, :]
        out = out + lam * diag * w
    return out


def evaluate(path: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath) -> ObjectiveEval:
    """Value and stage gradients of the smoothed multi-period objective."""
    value, grad = value_and_grad(path.stages, path.z_init, fc.y_hat, cov.v_hat,
                                 params.delta, params.lam, params.kappa)
    return ObjectiveEval(value=value if np.ndim(value) else float(value), stage_grads=grad)


inner_objective = evaluate


def stage_hessian(path: AllocationPath, s: int, params: ProblemParams, cov: CovariancePath) -> np.ndarray:
    """Diagonal Hessian block for stage ``s`` (1-based)."""
    h = path.horizon
    if not 1 <= s <= h:
        raise PreconditionError(f"stage index {s} outside 1..{h}")
    c = turnover_curvature(path.stages, path.z_init, params.kappa)
    diag = c[..., s - 1, :].copy()
    if s < h:
        diag += c[..., s, :]
    out = params.delta * cov.v_hat[..., s - 1, :, :].copy()
    idx = np.arange(path.n_assets)
    out[..., idx, idx] += params.lam * diag
    return out


def cross_stage_block(path: AllocationPath, s: int, params: ProblemParams) -> np.ndarray:
    """Off-diagonal Hessian block d^2 F / dz_s dz_{s+1} = -lam diag(rho''(z_{s+1} - z_s))."""
    h = path.horizon
    if not 1 <= s < h:
        raise PreconditionError(f"cross block needs 1 <= s < H, got s={s}, H={h}")
    c = turnover_curvature(path.stages, path.z_init, params.kappa)[..., s, :]
    return -params.lam * c[..., :, None] * np.eye(path.n_assets)


def full_hessian(path: AllocationPath, params: ProblemParams, cov: CovariancePath, coupled=True) -> np.ndarray:
    """Dense (H*N, H*N) Hessian of a single (unbatched) instance."""
    h, n = path.horizon, path.n_assets
    out = np.zeros((h * n, h * n))
    for s in range(1, h + 1):
        out[(s - 1) * n:s * n, (s - 1) * n:s * n] = stage_hessian(path, s, params, cov)
        if coupled and s < h:
            blk = cross_stage_block(path, s, params)
            out[(s - 1) * n:s * n, s * n:(s + 1) * n] = blk
            out[s * n:(s + 1) * n, (s - 1) * n:s * n] = blk
    return out


def decision_loss(stages, realized, v_hat, delta):
    """Realized mean-variance loss averaged over stages, and its gradient.

    Returns ``(loss, grad)`` where ``grad = (-y_k + delta V_k z_k) / H``.
    """
    stages = stages.stages if isinstance(stages, AllocationPath) else np.asarray(stages, dtype=float)
    realized = np.asarray(realized, dtype=float)
    v_hat = v_hat.v_hat if isinstance(v_hat, CovariancePath) else np.asarray(v_hat, dtype=float)
    if realized.shape != stages.shape or v_hat.shape[-3:] != stages.shape[-2:] + (stages.shape[-1],):
        raise ShapeError(f"decision loss shapes disagree: z {stages.shape}, y {realized.shape}, V {v_hat.shape}")
    h = stages.shape[-2]
    vz = _matvec(v_hat, stages)
    loss = np.sum(-stages * realized + 0.5 * delta * stages * vz, axis=(-2, -1)) / h
    grad = (-realized + delta * vz) / h
    return loss, grad
