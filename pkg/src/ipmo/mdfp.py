"""Implicit differentiation through the mirror-descent fixed point.

At a fixed point ``z* = Phi(z*, y)`` the forecast sensitivity solves
``(I - dPhi/dz) dz* = dPhi/dy dy``. Cotangents are pulled back with the
truncated series ``w = sum_b (dPhi/dz^T)^b g`` followed by one
forecast-VJP, so only Jacobian-vector products are ever formed.

Coordinates pinned at the floor are treated as active: their sensitivity is
zero and they are masked out of the series, which then reduces exactly to the
fixed-point system on the free coordinates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_FLOOR, AllocationPath, CovariancePath, ForecastPath, ProblemParams
from .errors import DivergenceError, InvalidParameterError, PreconditionError
from .objective import hessian_vp, stage_grads, turnover_curvature
from .solver import fixed_point_residual

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MirrorMapEvaluation:
    """Intermediates of one mirror-descent map evaluation.

    ``exp_weights`` and ``normalizers`` share a per-stage rescaling by
    ``exp(-max_i a_i)`` for overflow safety; their ratio is the map itself.
    """

    exp_weights: np.ndarray
    normalizers: np.ndarray
    scaled_grads: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return self.exp_weights / self.normalizers[..., None]


@dataclass(frozen=True)
class NeumannConfig:
    max_order: int = 200
    term_tol: float = 1e-6
    active_tol: float = 1e-6

    def __post_init__(self):
        if self.max_order < 0:
            raise InvalidParameterError("max_order must be >= 0")
        if not self.term_tol > 0:
            raise InvalidParameterError("term_tol must be > 0")


@dataclass
class ImplicitGrad:
    grad: np.ndarray
    residual: np.ndarray
    n_terms: np.ndarray
    converged: np.ndarray


def mirror_map(zstar: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
               eta) -> MirrorMapEvaluation:
    a = -_eta(eta, zstar) * stage_grads(zstar.stages, zstar.z_init, fc.y_hat, cov.v_hat,
                                        params.delta, params.lam, params.kappa)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    r = zstar.stages * e
    return MirrorMapEvaluation(r, r.sum(axis=-1), a)


def _eta(eta, path):
    eta = np.asarray(eta, dtype=float)
    return eta[..., None, None] if eta.ndim else eta


class _Linearization:
    """Cached quantities for repeated JVPs/VJPs of the map at one point."""

    def __init__(self, zstar, params, fc, cov, eta, coupled):
        self.z = zstar.stages
        self.z0 = zstar.z_init
        self.v = cov.v_hat
        self.params = params
        self.eta = _eta(eta, zstar)
        self.coupled = coupled
        a = -self.eta * stage_grads(self.z, self.z0, fc.y_hat, self.v, params.delta, params.lam, params.kappa)
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        m = np.sum(self.z * e, axis=-1, keepdims=True)
        self.u = e / m
        self.phi = self.z * self.u
        self.curv = turnover_curvature(self.z, self.z0, params.kappa) if params.lam else None

    def hvp(self, w):
        p = self.params
        return hessian_vp(w, self.z, self.z0, self.v, p.delta, p.lam, p.kappa, coupled=self.coupled, curv=self.curv)

    def jvp(self, dz):
        t = self.u * dz - self.eta * self.phi * self.hvp(dz)
        return t - self.phi * t.sum(axis=-1, keepdims=True)

    def vjp(self, c):
        ct = c - np.sum(self.phi * c, axis=-1, keepdims=True)
        return self.u * ct + self.hvp(-self.eta * self.phi * ct)

    def vjp_forecast(self, c):
        ct = c - np.sum(self.phi * c, axis=-1, keepdims=True)
        return self.eta * self.phi * ct


def _check_fixed_point(zstar, params, fc, cov, eta, fp_tol, floor):
    if fp_tol is None:
        return
    res = np.max(fixed_point_residual(zstar, params, fc, cov, eta, floor))
    if res > 10 * fp_tol:
        raise PreconditionError(f"input is not a fixed point: residual {res:.3e} > 10 * {fp_tol:.1e}")


def phi_jvp_z(zstar: AllocationPath, v, params: ProblemParams, fc: ForecastPath, cov: CovariancePath, eta,
              coupled: bool = True, fp_tol=1e-10, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Jacobian of the mirror-descent map w.r.t. the plan, applied to ``v``.

    ``coupled=False`` drops the cross-stage turnover curvature (stagewise block-diagonal Jacobian).
    Pass ``fp_tol=None`` to skip the fixed-point precondition.
    """
    _check_fixed_point(zstar, params, fc, cov, eta, fp_tol, floor)
    return _Linearization(zstar, params, fc, cov, eta, coupled).jvp(np.asarray(v, dtype=float))


def phi_vjp_z(zstar, c, params, fc, cov, eta, coupled=True, fp_tol=1e-10, floor=DEFAULT_FLOOR) -> np.ndarray:
    _check_fixed_point(zstar, params, fc, cov, eta, fp_tol, floor)
    return _Linearization(zstar, params, fc, cov, eta, coupled).vjp(np.asarray(c, dtype=float))


def phi_vjp_forecast(zstar: AllocationPath, u, params: ProblemParams, fc: ForecastPath, cov: CovariancePath, eta,
                     fp_tol=1e-10, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Cotangent ``u`` pulled back through the map's dependence on the forecast."""
    _check_fixed_point(zstar, params, fc, cov, eta, fp_tol, floor)
    return _Linearization(zstar, params, fc, cov, eta, True).vjp_forecast(np.asarray(u, dtype=float))


def active_mask(zstar: AllocationPath, active_tol: float) -> np.ndarray:
    """1.0 on free coordinates, 0.0 on coordinates pinned near zero."""
    return (zstar.stages > active_tol).astype(float)


def implicit_vjp(zstar: AllocationPath, loss_grad, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
                 eta, ncfg: NeumannConfig = NeumannConfig(), coupled: bool = True, fp_tol=1e-10,
                 floor: float = DEFAULT_FLOOR, strict: bool = True) -> ImplicitGrad:
    """Gradient of a loss on ``z*`` with respect to the forecast path.

    Sums Neumann terms of the transposed map Jacobian until both the last
    term's sup-norm and the geometric estimate of the remainder,
    ``term * r / (1 - r)`` with ``r`` the largest of the last three term
    ratios, are at most ``term_tol`` (or ``max_order`` terms), then applies the
    forecast VJP. A series whose last term is not below the first term at the
    cap raises :class:`DivergenceError`; a slowly decaying one is returned
    truncated with ``converged=False``. ``strict=False`` downgrades the
    non-decaying case to a truncated result as well (training uses this so one
    near-degenerate sample cannot abort a batch).
    """
    _check_fixed_point(zstar, params, fc, cov, eta, fp_tol, floor)
    lin = _Linearization(zstar, params, fc, cov, eta, coupled)
    mask = active_mask(zstar, ncfg.active_tol)
    g = np.asarray(loss_grad, dtype=float)
    if g.shape[-2:] != zstar.stages.shape[-2:]:
        raise PreconditionError(f"loss gradient shape {g.shape} != plan shape {zstar.stages.shape}")
    term = mask * g
    w = term.copy()
    batch = g.shape[:-2]
    first = np.abs(term).max(axis=(-2, -1))
    res = first.copy()
    n_terms = np.zeros(batch, dtype=int)
    live = res > ncfg.term_tol
    ratios = np.ones((3,) + batch)
    for b in range(1, ncfg.max_order + 1):
        if not np.any(live):
            break
        # every row keeps accumulating until the whole batch passes: a shared truncation order keeps
        # the batch linear in its cotangents (and can only shrink each row's remainder)
        term = mask * lin.vjp(term)
        w += term
        norm = np.abs(term).max(axis=(-2, -1))
        if not np.all(np.isfinite(norm)):
            raise DivergenceError("Neumann series produced non-finite terms; step size too large")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios[b % 3] = np.where(res > 0, norm / res, 0.0)
            r = ratios.max(axis=0)
            tail = np.where(norm == 0, 0.0, np.where(r < 1, norm * r / (1 - r), np.inf))
        res = norm
        n_terms = np.full(batch, b)
        live = (norm > ncfg.term_tol) | (tail > ncfg.term_tol)
    converged = ~live
    if strict and np.any(live & (res >= first)):
        raise DivergenceError(
            f"Neumann series not decaying after {ncfg.max_order} terms "
            f"(last term {np.max(res):.3e} vs first {np.max(first):.3e}); reduce eta")
    if np.any(live):
        log.debug("Neumann series truncated at %d terms with residual %.3e", ncfg.max_order, float(np.max(res)))
    grad = mask * lin.vjp_forecast(w)
    if not batch:
        res, n_terms, converged = float(res), int(n_terms), bool(converged)
    return ImplicitGrad(grad, res, n_terms, converged)


def spectral_radius_estimate(zstar: AllocationPath, params: ProblemParams, fc: ForecastPath, cov: CovariancePath,
                             eta, coupled: bool = True, max_iters: int = 200, rtol: float = 1e-10,
                             seed: int = 0, fp_tol=None) -> float:
    """Power-iteration estimate of the spectral radius of the map Jacobian (single instance)."""
    _check_fixed_point(zstar, params, fc, cov, eta, fp_tol, DEFAULT_FLOOR)
    lin = _Linearization(zstar, params, fc, cov, eta, coupled)
    v = np.random.default_rng(seed).standard_normal(zstar.stages.shape)
    v /= np.linalg.norm(v)
    prev = np.inf
    est = 0.0
    for _ in range(max_iters):
        jv = lin.jvp(v)
        jjv = lin.jvp(jv)
        n2 = np.linalg.norm(jjv)
        if n2 == 0.0:
            return 0.0
        # two-step ratio is insensitive to sign-alternating dominant pairs
        est = float(np.sqrt(n2))
        v = jjv / n2
        if abs(est - prev) < rtol:
            break
        prev = est
    return est
