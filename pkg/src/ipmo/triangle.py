"""Random verification instances and the three-way Jacobian comparison (MDFP, KKT, finite differences)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import AllocationPath, CovariancePath, ForecastPath, ProblemParams
from .errors import DegenerateInstanceError, OracleError
from .mdfp import NeumannConfig, active_mask, spectral_radius_estimate
from .oracles import (assembled_mdfp_jacobian, dense_fixed_point_jacobian, fd_sensitivity, kkt_sensitivity,
                      sensitivity_system)
from .solver import SolverConfig, coupled_step_bound, solve_fixed_point, step_size_bound

BACKWARD_SAFETY = 0.9


def random_instance(rng, n, h, lam=0.0, y_scale=0.3, delta=1.0, kappa=1e-4, z_init=None):
    """Random well-posed instance: PD covariances, Gaussian forecasts, Dirichlet pre-trade weights."""
    a = rng.standard_normal((h, n, n))
    v = a @ np.swapaxes(a, -1, -2) / n + 0.5 * np.eye(n)
    y = y_scale * rng.standard_normal((h, n))
    z0 = rng.dirichlet(np.ones(n)) if z_init is None else np.asarray(z_init, dtype=float)
    params = ProblemParams(delta=delta, lam=lam, kappa=kappa, horizon=h, n_assets=n)
    return params, ForecastPath(y), CovariancePath(v), z0


def backward_eta(path, params, cov) -> float:
    """Step used for implicit differentiation: a safety fraction of the smaller step bound."""
    return BACKWARD_SAFETY * min(step_size_bound(path, params, cov), coupled_step_bound(path, params, cov))


def solved_instance(rng, kind="interior", n_max=4, h_max=3, lam=None, gap=1e-3, min_free=0.05, rho_max=None,
                    tries=500, stats=None):
    """Draw and solve a random instance with a well-separated active set.

    ``kind="interior"`` keeps draws whose weights all exceed ``min_free``.
    ``kind="boundary"`` pushes one asset's forecast well below the rest in randomly
    chosen stages and keeps the draw if that asset ends at zero with multiplier gap
    at least ``gap`` while every free weight stays above ``min_free``. With
    ``rho_max`` set, draws whose map Jacobian at :func:`backward_eta` has estimated
    spectral radius above it are rejected too; a 200-term Neumann series needs
    roughly rho <= 0.92 to reach 1e-6. ``stats`` (a dict) collects the counts.

    Returns ``(params, fc, cov, zstar)`` with ``zstar`` solved to residual 1e-13.
    """
    if kind not in ("interior", "boundary"):
        raise ValueError(f"kind must be 'interior' or 'boundary', got {kind!r}")
    solver = SolverConfig(tol=1e-13, max_iters=300_000)
    for _ in range(tries):
        n = int(rng.integers(2 if kind == "interior" else 3, n_max + 1))
        h = int(rng.integers(1, h_max + 1))
        lam_k = float(rng.choice([0.0, 0.01])) if lam is None else lam
        params, fc, cov, z0 = random_instance(rng, n, h, lam=lam_k, y_scale=0.05)
        if kind == "boundary":
            y = fc.y_hat.copy()
            stages = rng.random(h) < 0.7
            stages[rng.integers(h)] = True
            for s in np.flatnonzero(stages):
                y[s, rng.integers(n)] -= rng.uniform(0.5, 1.5)
            fc = ForecastPath(y)
        res = solve_fixed_point(AllocationPath.hold(z0, h), params, fc, cov, solver)
        if not res.converged:
            continue
        z = res.path.stages
        free = z > 1e-6
        if z[free].min() <= min_free:
            continue
        if kind == "interior" and not free.all():
            continue
        if kind == "boundary":
            if free.all():
                continue
            try:
                sensitivity_system(res.path, params, fc, cov, gap_tol=gap)
            except DegenerateInstanceError:
                continue
        if rho_max is not None:
            rho = spectral_radius_estimate(res.path, params, fc, cov, backward_eta(res.path, params, cov),
                                           max_iters=2000)
            if stats is not None:
                stats["drawn"] = stats.get("drawn", 0) + 1
            if rho > rho_max:
                if stats is not None:
                    stats["rejected_rho"] = stats.get("rejected_rho", 0) + 1
                continue
        return params, fc, cov, res.path
    raise OracleError(f"no {kind} instance found in {tries} draws")


@dataclass
class TriangleResult:
    kind: str
    n_assets: int
    horizon: int
    mdfp_kkt: float  # max |difference| on the free block (everything, for interior instances)
    mdfp_fd: float
    kkt_fd: float
    active_max: float  # largest |entry| of the MDFP and KKT Jacobians in active rows/columns
    neumann_residual: float
    mdfp_dense: float  # Neumann sum vs the dense solve of the same linear system

    @property
    def worst(self) -> float:
        return max(self.mdfp_kkt, self.mdfp_fd, self.kkt_fd)

    def as_dict(self) -> dict:
        return asdict(self)


def triangle(zstar: AllocationPath, params, fc, cov, kind: str = "interior",
             ncfg: NeumannConfig = NeumannConfig()) -> TriangleResult:
    """Compare the three Jacobians d vec(z*) / d vec(y_hat) of one solved instance."""
    eta = backward_eta(zstar, params, cov)
    mdfp, residual = assembled_mdfp_jacobian(zstar, params, fc, cov, eta, ncfg)
    kkt = kkt_sensitivity(zstar, params, fc, cov)
    fd = fd_sensitivity(params, fc, cov, zstar.z_init)
    dense = dense_fixed_point_jacobian(zstar, params, fc, cov, eta)
    free = active_mask(zstar, ncfg.active_tol).reshape(-1) > 0
    blk = np.ix_(free, free)
    act = ~free
    active_max = 0.0
    if act.any():
        active_max = float(max(np.abs(mdfp[act]).max(), np.abs(mdfp[:, act]).max(),
                               np.abs(kkt[act]).max(), np.abs(kkt[:, act]).max()))
    h, n = zstar.stages.shape
    return TriangleResult(
        kind=kind, n_assets=n, horizon=h,
        mdfp_kkt=float(np.abs(mdfp[blk] - kkt[blk]).max()),
        mdfp_fd=float(np.abs(mdfp[blk] - fd[blk]).max()),
        kkt_fd=float(np.abs(kkt[blk] - fd[blk]).max()),
        active_max=active_max,
        neumann_residual=residual,
        mdfp_dense=float(np.abs(mdfp - dense).max()),
    )


def run_triangle(seed: int = 0, interior: int = 50, boundary: int = 20, n_max: int = 4, h_max: int = 3,
                 rho_max: float | None = 0.9, ncfg: NeumannConfig = NeumannConfig()) -> tuple:
    """Triangle results on fresh random instances; returns ``(results, draw_stats)``."""
    rng = np.random.default_rng(seed)
    stats = {}
    out = []
    for kind, count in (("interior", interior), ("boundary", boundary)):
        for _ in range(count):
            inst = solved_instance(rng, kind, n_max=n_max, h_max=h_max, rho_max=rho_max, stats=stats)
            out.append(triangle(inst[3], *inst[:3], kind=kind, ncfg=ncfg))
    return out, stats
