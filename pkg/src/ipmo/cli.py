"""Command-line entry point: ``ipmo {ingest,synth,train,backtest,gradcheck,bench}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import errors
from .backtest import run_backtest
from .config import RunConfig, load_config
from .forecast import IPMOState, LinearPredictor, build_window, mse_loss, train_ipmo, train_two_stage
from .io import load_returns_csv, save_returns_csv
from .report import export_report
from .selection import apply_point, run_grid

log = logging.getLogger("ipmo")

# nonzero exit status per error category; anything unexpected exits with 1
EXIT_CODES = {
    "load-error": 3,
    "invalid-parameter": 4,
    "shape-error": 4,
    "precondition-error": 4,
    "insufficient-data": 5,
    "numeric-error": 6,
    "divergence-error": 6,
    "degenerate-instance": 6,
    "oracle-error": 6,
    "training-error": 7,
}
TRIANGLE_TOL = {"interior": 1e-5, "boundary": 1e-4}


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=Path(args.out))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def cmd_ingest(args) -> int:
    cfg = _config(args)
    path = args.csv or cfg.data.csv
    if path is None:
        raise errors.InvalidParameterError("no CSV given (positional argument or [data] csv)")
    panel = load_returns_csv(path)
    doc = {"path": str(path), "days": panel.n_days, "assets": panel.n_assets, "tickers": list(panel.tickers),
           "first": str(panel.dates[0]), "last": str(panel.dates[-1])}
    print(f"{path}: {panel.n_days} days x {panel.n_assets} assets ({panel.dates[0]} .. {panel.dates[-1]})")
    if args.out is not None:
        _write_json(_out_dir(cfg) / "ingest.json", doc)
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    if cfg.data.csv is not None:
        raise errors.InvalidParameterError("synth needs a synthetic [data] source, not a CSV")
    panel = cfg.data.load(cfg.seed)
    out = _out_dir(cfg) / "returns.csv"
    save_returns_csv(panel, out)
    print(f"wrote {panel.n_days} days x {panel.n_assets} assets to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    bt = cfg.backtest
    if bt.strategy not in ("ipmo", "two-stage"):
        raise errors.InvalidParameterError(f"train needs strategy ipmo or two-stage, got {bt.strategy!r}")
    panel = cfg.data.load(cfg.seed)
    t = panel.n_days - 1
    window = build_window(panel.returns, t, bt.lookback_train, bt.input_len, bt.horizon, bt.ewma)
    model = LinearPredictor.init(panel.n_assets, bt.horizon, bt.input_len, bt.block_average, bt.init_scale, cfg.seed)
    if bt.strategy == "two-stage":
        before = mse_loss(model, window, bt.hyper.l2_beta)
        model = train_two_stage(window, model, bt.hyper, seed=cfg.seed)
        history = [before, mse_loss(model, window, bt.hyper.l2_beta)]
    else:
        state = IPMOState()
        model = train_ipmo(window, model, bt.problem(panel.n_assets), bt.train_solver, bt.neumann, bt.hyper,
                           seed=cfg.seed, state=state)
        history = state.history
    out = _out_dir(cfg)
    model.save(out / "model.json")
    _write_json(out / "train.json", {"strategy": bt.strategy, "samples": len(window), "decision_index": t,
                                     "date": str(panel.dates[t]), "loss_history": history,
                                     "fingerprint": model.fingerprint})
    print(f"trained {bt.strategy} predictor on {len(window)} samples ending {panel.dates[t]}; saved {out / 'model.json'}")
    return 0


def cmd_backtest(args) -> int:
    cfg = _config(args)
    panel = cfg.data.load(cfg.seed)
    out = _out_dir(cfg)
    points = cfg.grid.points()
    if len(points) == 1:
        report = run_backtest(panel, apply_point(cfg.backtest, points[0]), cfg.seed)
    else:
        outcome = run_grid(panel, cfg.backtest, cfg.grid, cfg.seed, cfg.split, cfg.workers,
                           progress=out / "progress.log")
        report = outcome.report
        with (out / "grid.csv").open("w", newline="") as fh:
            rows = outcome.rows()
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        _write_json(out / "selection.json", {"selected": outcome.selected, "split_days": cfg.split,
                                             "out_of_sample_net": outcome.oos.as_json()})
        print(f"selected {outcome.selected} from {len(points)} grid points")
    export_report(report, out, figures=not args.no_figures)
    m = report.metrics_net
    print(f"{report.strategy}: net Sharpe {m.sharpe:.3f}, turnover {m.turnover:.4f}, "
          f"{len(report.warnings)} warning(s); report in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .triangle import run_triangle

    cfg = _config(args)
    g = cfg.gradcheck
    results, stats = run_triangle(cfg.seed, g.interior, g.boundary, g.n_max, g.h_max, ncfg=cfg.neumann)
    worst = {}
    ok = True
    for kind in ("interior", "boundary"):
        rs = [r for r in results if r.kind == kind]
        if not rs:
            continue
        w = {k: max(getattr(r, k) for r in rs) for k in ("mdfp_kkt", "mdfp_fd", "kkt_fd", "active_max",
                                                        "neumann_residual", "mdfp_dense")}
        worst[kind] = w
        passed = max(w["mdfp_kkt"], w["mdfp_fd"], w["kkt_fd"]) <= TRIANGLE_TOL[kind] and w["active_max"] == 0.0
        ok &= passed
        print(f"{kind:9s} n={len(rs):3d}  mdfp-kkt {w['mdfp_kkt']:.2e}  mdfp-fd {w['mdfp_fd']:.2e}  "
              f"kkt-fd {w['kkt_fd']:.2e}  active {w['active_max']:.1e}  neumann-res {w['neumann_residual']:.2e}  "
              f"{'ok' if passed else 'EXCEEDS ' + format(TRIANGLE_TOL[kind], 'g')}")
    print(f"instances drawn {stats.get('drawn', 0)}, rejected for slow contraction {stats.get('rejected_rho', 0)}")
    if args.out is not None:
        out = _out_dir(cfg)
        with (out / "gradcheck.csv").open("w", newline="") as fh:
            rows = [r.as_dict() for r in results]
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        _write_json(out / "gradcheck.json", {"worst": worst, "draws": stats, "passed": ok})
    if not ok:
        raise errors.OracleError("gradient oracles disagree beyond tolerance")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_runtime

    cfg = _config(args)
    res = bench_runtime(cfg.bench_horizons, replace(cfg.bench, seed=cfg.seed), cfg.bench_repetitions)
    out = _out_dir(cfg)
    res.write_csv(out / "bench.csv")
    print("method  " + "  ".join(f"H={h:>4d}" for h in res.horizons) + "   ratio")
    for m, ts in res.seconds.items():
        print(f"{m:6s}  " + "  ".join(f"{t:7.3f}" for t in ts) + f"   {res.ratio(m):6.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipmo", description="Multi-period portfolio learning with a mirror-descent "
                                                         "fixed-point layer.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="INI run file")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", type=Path, help="override [run] out directory")
        sp.set_defaults(func=fn)
        return sp

    add("ingest", cmd_ingest, "validate a returns CSV").add_argument("csv", nargs="?", type=Path)
    add("synth", cmd_synth, "generate a synthetic two-regime panel")
    add("train", cmd_train, "train a predictor on the latest window")
    add("backtest", cmd_backtest, "walk-forward backtest (with grid selection if the grid has several points)"
        ).add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    add("gradcheck", cmd_gradcheck, "compare MDFP, KKT and finite-difference Jacobians on random instances")
    add("bench", cmd_bench, "epoch runtime versus horizon, Neumann vs dense KKT backward")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except errors.IPMOError as exc:
        print(f"ipmo: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"ipmo: io-error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
