"""Linear multi-horizon return predictor, EWMA covariance and the two training loops.

Sample convention: for a decision index ``s`` the input window is the ``L``
returns ending at ``s`` (inclusive) and the target is the ``H`` returns
``s+1 .. s+H``. Covariance for sample ``s`` uses returns up to ``s`` only.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import AllocationPath, CovariancePath, ForecastPath, ProblemParams, lift_start
from .errors import InsufficientDataError, InvalidParameterError, ShapeError, TrainingError
from .mdfp import NeumannConfig, implicit_vjp
from .objective import decision_loss
from .oracles import kkt_sensitivity
from .solver import SolverConfig, _coupled_bound_arrays, solve_fixed_point

log = logging.getLogger(__name__)

BLOCK = 5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.005
    epochs: int = 200
    batch_size: int = 0  # 0: full window
    l2_beta: float = 0.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8


@dataclass(frozen=True)
class EwmaConfig:
    window: int = 20
    decay: float = 0.94
    jitter: float = 1e-6

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise InvalidParameterError(f"decay must lie in (0, 1], got {self.decay}")
        if self.window < 2:
            raise InvalidParameterError(f"window must be >= 2, got {self.window}")
        if self.jitter < 0:
            raise InvalidParameterError("jitter must be >= 0")


@dataclass
class LinearPredictor:
    """Per-asset affine map from block-averaged past returns to ``H`` forecasts.

    ``weights`` has shape (N, H, F) and ``bias`` (N, H); asset ``i`` only sees
    its own history. With ``block_average`` the L-day window is reduced to
    F = L/5 five-day means, otherwise F = L.
    """

    weights: np.ndarray
    bias: np.ndarray
    input_len: int
    block_average: bool = True
    l2_beta: float = 0.0
    hyper: TrainHyper = field(default_factory=TrainHyper)
    fingerprint: str = ""

    @classmethod
    def init(cls, n_assets: int, horizon: int, input_len: int, block_average: bool = True,
             scale: float = 0.0, seed: int = 0, **kw) -> "LinearPredictor":
        if block_average and input_len % BLOCK:
            raise ShapeError(f"input length {input_len} is not a multiple of {BLOCK}")
        f = input_len // BLOCK if block_average else input_len
        rng = np.random.default_rng(seed)
        w = scale * rng.standard_normal((n_assets, horizon, f)) / np.sqrt(f)
        return cls(w, np.zeros((n_assets, horizon)), input_len, block_average, **kw)

    @property
    def n_assets(self) -> int:
        return self.weights.shape[0]

    @property
    def horizon(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearPredictor":
        return replace(self, weights=self.weights.copy(), bias=self.bias.copy())

    def features(self, x: np.ndarray) -> np.ndarray:
        """(..., L, N) window -> (..., N, F) per-asset features."""
        x = np.asarray(x, dtype=float)
        if x.shape[-2:] != (self.input_len, self.n_assets):
            raise ShapeError(f"input window shape {x.shape[-2:]} != ({self.input_len}, {self.n_assets})")
        if self.block_average:
            if self.input_len % BLOCK:
                raise ShapeError(f"input length {self.input_len} is not a multiple of {BLOCK}")
            x = x.reshape(x.shape[:-2] + (self.input_len // BLOCK, BLOCK, self.n_assets)).mean(axis=-2)
        return np.swapaxes(x, -1, -2)

    def forward_features(self, feats: np.ndarray) -> np.ndarray:
        out = np.einsum("nhf,...nf->...nh", self.weights, feats) + self.bias
        return np.swapaxes(out, -1, -2)

    def predict_array(self, x: np.ndarray) -> np.ndarray:
        return self.forward_features(self.features(x))

    def param_norm_sq(self) -> float:
        return float(np.sum(self.weights ** 2) + np.sum(self.bias ** 2))

    def save(self, path) -> None:
        """Write a JSON checkpoint; floats are stored as hex strings so the round trip is bit-exact."""
        doc = {
            "format": "ipmo-linear-predictor",
            "version": CHECKPOINT_VERSION,
            "input_len": self.input_len,
            "block_average": self.block_average,
            "l2_beta": self.l2_beta.hex() if isinstance(self.l2_beta, float) else float(self.l2_beta).hex(),
            "hyper": {k: (float(v).hex() if isinstance(v, float) else v) for k, v in self.hyper.__dict__.items()},
            "fingerprint": self.fingerprint,
            "weights_shape": list(self.weights.shape),
            "weights": [float(v).hex() for v in self.weights.ravel()],
            "bias_shape": list(self.bias.shape),
            "bias": [float(v).hex() for v in self.bias.ravel()],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "LinearPredictor":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "ipmo-linear-predictor" or doc.get("version") != CHECKPOINT_VERSION:
            raise InvalidParameterError(f"unsupported checkpoint {path}")
        w = np.array([float.fromhex(v) for v in doc["weights"]]).reshape(doc["weights_shape"])
        b = np.array([float.fromhex(v) for v in doc["bias"]]).reshape(doc["bias_shape"])
        hyper = {k: (float.fromhex(v) if isinstance(v, str) else v) for k, v in doc["hyper"].items()}
        return cls(w, b, doc["input_len"], doc["block_average"], float.fromhex(doc["l2_beta"]),
                   TrainHyper(**hyper), doc["fingerprint"])


def predict(model: LinearPredictor, x) -> ForecastPath:
    return ForecastPath(model.predict_array(x))


def ewma_weights(n: int, decay: float) -> np.ndarray:
    """Normalized weights for ``n`` rows ordered oldest to newest."""
    w = decay ** np.arange(n - 1, -1, -1, dtype=float)
    return w / w.sum()


def ewma_covariance(returns, cfg: EwmaConfig = EwmaConfig()) -> np.ndarray:
    """Exponentially weighted covariance of the rows (oldest first) plus ``jitter * I``.

    Accepts leading batch axes: (..., window, N) -> (..., N, N).
    """
    r = np.asarray(returns, dtype=float)
    if r.ndim < 2 or r.shape[-2] < 2:
        raise InsufficientDataError(f"need at least 2 return rows, got shape {r.shape}")
    w = ewma_weights(r.shape[-2], cfg.decay)
    mean = np.einsum("t,...tn->...n", w, r)
    dev = r - mean[..., None, :]
    cov = np.einsum("t,...ti,...tj->...ij", w, dev, dev)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return cov + cfg.jitter * np.eye(r.shape[-1])


def covariance_at(returns: np.ndarray, t, cfg: EwmaConfig) -> np.ndarray:
    """EWMA covariance from the ``cfg.window`` rows ending at index ``t`` (scalar or array)."""
    t = np.asarray(t)
    if np.min(t) - cfg.window + 1 < 0:
        raise InsufficientDataError(f"index {int(np.min(t))} has fewer than {cfg.window} rows of history")
    idx = t[..., None] + np.arange(-cfg.window + 1, 1)
    return ewma_covariance(returns[idx], cfg)


def covariance_path(returns, t: int, horizon: int, cfg: EwmaConfig = EwmaConfig()) -> CovariancePath:
    """Identical EWMA estimate for every stage: the information set is frozen at ``t``."""
    r = returns.returns if hasattr(returns, "returns") else np.asarray(returns, dtype=float)
    return CovariancePath.constant(covariance_at(r, t, cfg), horizon)


@dataclass
class TrainingWindow:
    """Stacked samples: inputs (T, L, N), targets (T, H, N), covariances (T, H, N, N)."""

    inputs: np.ndarray
    targets: np.ndarray
    covs: np.ndarray
    input_end: np.ndarray     # index of the last input row per sample
    target_start: np.ndarray  # index of the first target row per sample

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise InsufficientDataError("training window is empty")
        if np.any(self.target_start <= self.input_end):
            raise InvalidParameterError("look-ahead: a target starts at or before its input window ends")

    def __len__(self):
        return len(self.inputs)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.inputs, self.targets):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def build_window(returns, t: int, lookback: int, input_len: int, horizon: int,
                 cfg: EwmaConfig = EwmaConfig()) -> TrainingWindow:
    """Samples ``s = t-T-H+1 .. t-H`` available at decision index ``t`` (targets end at ``t``)."""
    r = returns.returns if hasattr(returns, "returns") else np.asarray(returns, dtype=float)
    first = t - lookback - horizon + 1
    need = max(input_len, cfg.window) - 1
    if first - need < 0:
        raise InsufficientDataError(f"decision index {t} lacks history for lookback {lookback}, "
                                    f"input {input_len}, horizon {horizon}")
    s = np.arange(first, t - horizon + 1)
    x = r[s[:, None] + np.arange(-input_len + 1, 1)]
    y = r[s[:, None] + np.arange(1, horizon + 1)]
    cov = covariance_at(r, s, cfg)
    covs = np.repeat(cov[:, None], horizon, axis=1)
    return TrainingWindow(x, y, covs, s, s + 1)


class _Adam:
    def __init__(self, hyper: TrainHyper, shapes):
        self.h = hyper
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        h = self.h
        self.t += 1
        c1 = 1 - h.adam_b1 ** self.t
        c2 = 1 - h.adam_b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= h.adam_b1
            m += (1 - h.adam_b1) * g
            v *= h.adam_b2
            v += (1 - h.adam_b2) * g * g
            p -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.adam_eps)


def _batches(n, batch_size, rng):
    if not batch_size or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _param_grads(model, feats, gy, beta):
    """Chain d loss / d y_hat (B, H, N) into the predictor parameters (mean over the batch)."""
    b = gy.shape[0]
    gw = np.einsum("bhn,bnf->nhf", gy, feats) / b + 2 * beta * model.weights
    gb = np.swapaxes(gy.sum(axis=0), 0, 1) / b + 2 * beta * model.bias
    return gw, gb


def mse_loss(model: LinearPredictor, window: TrainingWindow, beta: float = 0.0) -> float:
    err = model.predict_array(window.inputs) - window.targets
    return float(np.mean(err ** 2) + beta * model.param_norm_sq())


def train_two_stage(window: TrainingWindow, model: LinearPredictor, hyper: TrainHyper = TrainHyper(),
                    seed: int = 0, trace=None) -> LinearPredictor:
    """Fit the predictor to mean squared forecast error plus ``beta * ||theta||^2`` with Adam."""
    model = model.copy()
    model.hyper = hyper
    model.l2_beta = hyper.l2_beta
    feats = model.features(window.inputs)
    rng = np.random.default_rng(seed)
    opt = _Adam(hyper, [model.weights.shape, model.bias.shape])
    hn = window.targets.shape[-2] * window.targets.shape[-1]
    for _ in range(hyper.epochs):
        for idx in _batches(len(window), hyper.batch_size, rng):
            pred = model.forward_features(feats[idx])
            gy = 2.0 * (pred - window.targets[idx]) / hn
            if trace is not None:
                trace.append("mse")
            if not np.all(np.isfinite(gy)):
                raise TrainingError("non-finite loss in two-stage training")
            gw, gb = _param_grads(model, feats[idx], gy, hyper.l2_beta)
            opt.step([model.weights, model.bias], [gw, gb])
    if not (np.all(np.isfinite(model.weights)) and np.all(np.isfinite(model.bias))):
        raise TrainingError("two-stage training diverged")
    model.fingerprint = window.fingerprint()
    return model


@dataclass
class IPMOState:
    """Warm-start cache of fixed points and step sizes across epochs."""

    plans: np.ndarray | None = None
    history: list = field(default_factory=list)


def decision_forward(model: LinearPredictor, feats, z_init, covs, params: ProblemParams, scfg: SolverConfig,
                     init=None):
    """Forecast, solve, and return (forecast, solve result) for a batch of samples."""
    y_hat = model.forward_features(feats)
    b, h, n = y_hat.shape
    z0 = np.broadcast_to(z_init, (b, n))
    start = AllocationPath(z0, lift_start(init)) if init is not None else AllocationPath.hold(z0, h)
    res = solve_fixed_point(start, params, ForecastPath(y_hat), CovariancePath(covs), scfg)
    return y_hat, res


def decision_gradient(model: LinearPredictor, feats, targets, covs, z_init, params: ProblemParams,
                      scfg: SolverConfig, ncfg: NeumannConfig, init=None, backward_eta_fraction: float = 0.9,
                      coupled: bool = True, backward: str = "mdfp"):
    """Mean decision loss and its gradient w.r.t. the predictor parameters on one batch.

    Returns ``(loss, grad_w, grad_b, solve_result, ok_mask, implicit_grad)``; samples
    whose forward solve did not converge are left out of the average. ``backward="kkt"``
    swaps the Neumann pullback for one dense KKT Jacobian per sample (benchmarking only;
    ``implicit_grad`` is then None).
    """
    if backward not in ("mdfp", "kkt"):
        raise InvalidParameterError(f"backward must be 'mdfp' or 'kkt', got {backward!r}")
    y_hat, res = decision_forward(model, feats, z_init, covs, params, scfg, init)
    z = res.path
    ok = np.asarray(res.converged, dtype=bool)
    loss, gz = decision_loss(z.stages, targets, covs, params.delta)
    gz = gz * ok[:, None, None]
    if backward == "kkt":
        ig = None
        z0 = np.broadcast_to(z.z_init, gz.shape[:1] + gz.shape[-1:])
        gy = np.stack([
            (kkt_sensitivity(AllocationPath(z0[k], z.stages[k]), params, ForecastPath(y_hat[k]),
                             CovariancePath(covs[k]), coupled=coupled, gap_tol=-np.inf).T
             @ gz[k].ravel()).reshape(gz.shape[1:]) for k in range(len(gz))])
    else:
        # any step size leaves the fixed point invariant; differentiate with a faster-contracting one
        eta_b = backward_eta_fraction * _coupled_bound_arrays(z.stages, z.z_init, covs, params.delta, params.lam,
                                                              params.kappa)
        ig = implicit_vjp(z, gz, params, ForecastPath(y_hat), CovariancePath(covs), eta_b, ncfg,
                          coupled=coupled, fp_tol=None, floor=scfg.floor, strict=False)
        gy = ig.grad
    gy = gy * ok[:, None, None]
    n_ok = max(int(ok.sum()), 1)
    gw = np.einsum("bhn,bnf->nhf", gy, feats) / n_ok
    gb = np.swapaxes(gy.sum(axis=0), 0, 1) / n_ok
    return float(np.sum(loss * ok) / n_ok), gw, gb, res, ok, ig


def train_ipmo(window: TrainingWindow, model: LinearPredictor, params: ProblemParams,
               scfg: SolverConfig = SolverConfig(), ncfg: NeumannConfig = NeumannConfig(),
               hyper: TrainHyper = TrainHyper(), z_init=None, seed: int = 0, max_fail_frac: float = 0.1,
               coupled: bool = True, trace=None, state: IPMOState | None = None,
               backward: str = "mdfp") -> LinearPredictor:
    """End-to-end training of the predictor on the realized decision loss.

    Each epoch solves every sample's inner program (warm-started from the
    previous epoch's plans), pulls the decision-loss gradient back through the
    fixed point, and takes an Adam step on the batch-average gradient.
    """
    model = model.copy()
    model.hyper = hyper
    model.l2_beta = hyper.l2_beta
    n = model.n_assets
    z_init = np.full(n, 1.0 / n) if z_init is None else np.asarray(z_init, dtype=float)
    feats = model.features(window.inputs)
    rng = np.random.default_rng(seed)
    opt = _Adam(hyper, [model.weights.shape, model.bias.shape])
    state = state if state is not None else IPMOState()
    plans = state.plans if state.plans is not None and state.plans.shape == window.targets.shape else None
    for epoch in range(hyper.epochs):
        for idx in _batches(len(window), hyper.batch_size, rng):
            init = None if plans is None else plans[idx]
            loss, gw, gb, res, ok, _ = decision_gradient(model, feats[idx], window.targets[idx], window.covs[idx],
                                                         z_init, params, scfg, ncfg, init=init, coupled=coupled,
                                                         backward=backward)
            if trace is not None:
                trace.append("decision")
            fail = 1.0 - ok.mean()
            if fail > max_fail_frac:
                raise TrainingError(
                    f"forward solve failed on {fail:.0%} of batch samples in epoch {epoch}",
                    diagnostics={"epoch": epoch, "failed": int((~ok).sum()), "batch": int(ok.size),
                                 "max_residual": float(np.max(res.residual))})
            if not (np.isfinite(loss) and np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise TrainingError("non-finite decision loss or gradient", diagnostics={"epoch": epoch})
            if plans is None:
                plans = np.broadcast_to(z_init, window.targets.shape).copy()
            plans[idx] = res.path.stages
            state.history.append(loss)
            gw = gw + 2 * hyper.l2_beta * model.weights
            gb = gb + 2 * hyper.l2_beta * model.bias
            opt.step([model.weights, model.bias], [gw, gb])
    state.plans = plans
    model.fingerprint = window.fingerprint()
    return model


def mean_decision_loss(model: LinearPredictor, window: TrainingWindow, params: ProblemParams,
                       scfg: SolverConfig = SolverConfig(), z_init=None) -> float:
    n = model.n_assets
    z_init = np.full(n, 1.0 / n) if z_init is None else z_init
    _, res = decision_forward(model, model.features(window.inputs), z_init, window.covs, params, scfg)
    loss, _ = decision_loss(res.path.stages, window.targets, window.covs, params.delta)
    return float(np.mean(loss))


@dataclass
class GradCheck:
    analytic: np.ndarray   # flattened (weights, bias) gradient
    numeric: np.ndarray
    rel_err: np.ndarray    # per parameter
    max_rel_err: float
    converged: bool


def gradcheck(model: LinearPredictor, window: TrainingWindow, params: ProblemParams,
              scfg: SolverConfig = SolverConfig(tol=1e-13, max_iters=200_000),
              ncfg: NeumannConfig = NeumannConfig(), eps: float = 1e-6, z_init=None,
              floor_rel: float = 1e-3) -> GradCheck:
    """Implicit-gradient pipeline vs central differences of the mean decision loss, per parameter.

    Relative error is ``|a - f| / max(|f|, floor_rel * max|f|)`` so that parameters with a
    vanishing gradient are judged on the scale of the whole gradient.
    """
    n = model.n_assets
    z_init = np.full(n, 1.0 / n) if z_init is None else np.asarray(z_init, dtype=float)
    feats = model.features(window.inputs)
    _, gw, gb, res, ok, ig = decision_gradient(model, feats, window.targets, window.covs, z_init, params, scfg, ncfg)
    analytic = np.concatenate([gw.ravel(), gb.ravel()])
    numeric = np.empty_like(analytic)
    probe = model.copy()
    flat = [probe.weights.reshape(-1), probe.bias.reshape(-1)]
    k = 0
    for arr in flat:
        for i in range(arr.size):
            old = arr[i]
            arr[i] = old + eps
            up = mean_decision_loss(probe, window, params, scfg, z_init)
            arr[i] = old - eps
            down = mean_decision_loss(probe, window, params, scfg, z_init)
            arr[i] = old
            numeric[k] = (up - down) / (2 * eps)
            k += 1
    scale = max(floor_rel * float(np.abs(numeric).max()), 1e-300)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), scale)
    return GradCheck(analytic, numeric, rel, float(rel.max()), bool(np.all(ok)) and bool(np.all(ig.converged)))
