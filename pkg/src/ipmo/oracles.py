"""Independent reference computations used to check the solver and the implicit gradients.

None of these go through the mirror-descent geometry: the forward oracle is
Euclidean projected gradient, sensitivities come from central differences of
that oracle or from the KKT conditions solved densely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AllocationPath, CovariancePath, ForecastPath, ProblemParams
from .errors import DegenerateInstanceError, NumericError, OracleError
from .mdfp import NeumannConfig, _Linearization, active_mask, implicit_vjp
from .objective import full_hessian, stage_grads, value_and_grad


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row (last axis) onto the unit simplex, by sorting."""
    v = np.asarray(v, dtype=float)
    n = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def lipschitz_bound(params: ProblemParams, cov: CovariancePath) -> np.ndarray:
    """Global gradient Lipschitz bound: delta*max ||V_s|| + 4*lam/sqrt(kappa)."""
    vmax = np.linalg.eigvalsh(cov.v_hat)[..., -1].max(axis=-1)
    return params.delta * vmax + 4.0 * params.lam / np.sqrt(params.kappa)


def projected_gradient_solve(params: ProblemParams, fc: ForecastPath, cov: CovariancePath, z_init,
                             tol: float = 1e-12, max_iters: int = 500_000, init=None) -> AllocationPath:
    """Projected gradient descent with step 1/L until the gradient-mapping sup-norm is <= tol.

    Batched over leading axes of the forecast; raises :class:`OracleError` on hitting the cap.
    """
    y = fc.y_hat
    v = cov.v_hat
    z0 = np.asarray(z_init, dtype=float)
    h, n = y.shape[-2:]
    batch = np.broadcast_shapes(y.shape[:-2], v.shape[:-3], z0.shape[:-1])
    y = np.broadcast_to(y, batch + (h, n))
    v = np.broadcast_to(v, batch + (h, n, n))
    z0 = np.broadcast_to(z0, batch + (n,))
    step = 1.0 / np.broadcast_to(lipschitz_bound(params, CovariancePath(v)), batch)[..., None, None]
    z = np.broadcast_to(z0[..., None, :], batch + (h, n)).copy() if init is None else np.array(init, dtype=float)
    d, lam, kappa = params.delta, params.lam, params.kappa
    for _ in range(max_iters):
        g = stage_grads(z, z0, y, v, d, lam, kappa)
        new = project_simplex(z - step * g)
        gm = np.abs(new - z).max(axis=(-2, -1)) / step[..., 0, 0]
        z = new
        if np.all(gm <= tol):
            return AllocationPath(z0, z)
    raise OracleError(f"projected gradient did not reach tol {tol:g} in {max_iters} iterations "
                      f"(gradient mapping {np.max(gm):.3e})")


def fd_sensitivity(params: ProblemParams, fc: ForecastPath, cov: CovariancePath, z_init,
                   eps: float = 1e-5, tol: float = 1e-12) -> np.ndarray:
    """Central-difference Jacobian d vec(z*) / d vec(y_hat), shape (H*N, H*N)."""
    if not 1e-7 <= eps <= 1e-4:
        raise OracleError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    h, n = fc.y_hat.shape
    m = h * n
    if m > 30:
        raise OracleError(f"instance too large for finite differences (H*N = {m} > 30)")
    basis = np.eye(m).reshape(m, h, n)
    ys = np.concatenate([fc.y_hat + eps * basis, fc.y_hat - eps * basis])
    sol = projected_gradient_solve(params, ForecastPath(ys), cov, z_init, tol=tol).stages
    diff = (sol[:m] - sol[m:]).reshape(m, m) / (2 * eps)
    return diff.T


@dataclass(frozen=True)
class SensitivitySystem:
    """Bordered KKT sensitivity system restricted to the free coordinates."""

    free_sets: list
    hessian: np.ndarray          # (H*N, H*N), coupled or stagewise
    forecast_cross: np.ndarray   # d grad / d y_hat, here -I
    multipliers: np.ndarray      # (H,) common gradient value on each free set
    gaps: np.ndarray             # (H, N) gradient minus multiplier; meaningful on active coordinates


def sensitivity_system(zstar: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
                       coupled: bool = True, active_tol: float = 1e-6, gap_tol: float = 1e-6) -> SensitivitySystem:
    z = zstar.stages
    h, n = z.shape
    b = stage_grads(z, zstar.z_init, fc.y_hat, cov.v_hat, params.delta, params.lam, params.kappa)
    free = z > active_tol
    if not free.any(axis=-1).all():
        raise DegenerateInstanceError("a stage has no free coordinate")
    mu = np.array([b[s, free[s]].mean() for s in range(h)])
    gaps = b - mu[:, None]
    active_gaps = gaps[~free]
    if active_gaps.size and active_gaps.min() < gap_tol:
        raise DegenerateInstanceError(
            f"strict complementarity violated: smallest active gap {active_gaps.min():.3e} < {gap_tol:g}")
    hess = full_hessian(zstar, params, cov, coupled=coupled)
    return SensitivitySystem([np.flatnonzero(free[s]) for s in range(h)], hess, -np.eye(h * n), mu, gaps)


def kkt_sensitivity(zstar: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
                    coupled: bool = True, active_tol: float = 1e-6, gap_tol: float = 1e-6) -> np.ndarray:
    """Jacobian d vec(z*) / d vec(y_hat) from the differentiated KKT conditions.

    Solves ``[Q_FF E; E' 0] [dz; dxi] = [-K_F; 0]`` on the free coordinates, with
    one equality row per stage; active rows stay zero.
    """
    sys_ = sensitivity_system(zstar, params, fc, cov, coupled, active_tol, gap_tol)
    h, n = zstar.stages.shape
    m = h * n
    free_idx = np.concatenate([s * n + f for s, f in enumerate(sys_.free_sets)])
    k = free_idx.size
    stage_of = free_idx // n
    e = np.zeros((k, h))
    e[np.arange(k), stage_of] = 1.0
    lhs = np.zeros((k + h, k + h))
    lhs[:k, :k] = sys_.hessian[np.ix_(free_idx, free_idx)]
    lhs[:k, k:] = e
    lhs[k:, :k] = e.T
    rhs = np.zeros((k + h, m))
    rhs[:k] = -sys_.forecast_cross[free_idx]
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular bordered KKT system") from exc
    jac = np.zeros((m, m))
    jac[free_idx] = sol[:k]
    return jac


def dense_fixed_point_jacobian(zstar: AllocationPath, params: ProblemParams, fc: ForecastPath,
                               cov: CovariancePath, eta, coupled: bool = True,
                               active_tol: float = 1e-6) -> np.ndarray:
    """Solve ``(I - dPhi/dz) dz = dPhi/dy`` densely on the free coordinates."""
    h, n = zstar.stages.shape
    m = h * n
    lin = _Linearization(zstar, params, fc, cov, eta, coupled)
    basis = np.eye(m).reshape(m, h, n)
    jz = lin.jvp(basis).reshape(m, m).T
    jy = lin.vjp_forecast(basis).reshape(m, m)  # row k: e_k' dPhi/dy
    free = active_mask(zstar, active_tol).reshape(m) > 0
    idx = np.flatnonzero(free)
    jac = np.zeros((m, m))
    a = np.eye(idx.size) - jz[np.ix_(idx, idx)]
    jac[np.ix_(idx, idx)] = np.linalg.solve(a, jy[np.ix_(idx, idx)])
    return jac


def assembled_mdfp_jacobian(zstar: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
                            eta, ncfg: NeumannConfig = NeumannConfig(), coupled: bool = True):
    """Rows of d vec(z*) / d vec(y_hat) from implicit VJPs of the unit cotangents.

    Returns ``(jacobian, max_residual)``.
    """
    h, n = zstar.stages.shape
    m = h * n
    basis = np.eye(m).reshape(m, h, n)
    out = implicit_vjp(zstar, basis, params, fc, cov, eta, ncfg, coupled=coupled, fp_tol=None)
    return out.grad.reshape(m, m), float(np.max(out.residual))


def objective_gap(a: AllocationPath, b: AllocationPath, params, fc, cov) -> float:
    va, _ = value_and_grad(a.stages, a.z_init, fc.y_hat, cov.v_hat, params.delta, params.lam, params.kappa)
    vb, _ = value_and_grad(b.stages, b.z_init, fc.y_hat, cov.v_hat, params.delta, params.lam, params.kappa)
    return float(np.max(np.abs(va - vb)))
