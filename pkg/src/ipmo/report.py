"""Write a backtest report to disk: CSV series, a JSON metrics document, and PNG figures."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .backtest import TURNOVER_DEFINITION, BacktestReport

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
# PNG metadata carries no timestamp; dropping the version string keeps files byte-identical across installs
_PNG_META = {"Software": None}


def _json_safe(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def metrics_document(report: BacktestReport) -> dict:
    return {
        "strategy": report.strategy,
        "start": str(report.dates[0]),
        "end": str(report.dates[-1]),
        "days": len(report.dates) - 1,
        "turnover_definition": TURNOVER_DEFINITION,
        "gross": report.metrics_gross.as_json(),
        "net": report.metrics_net.as_json(),
        "warnings": report.warnings,
        "config": _json_safe(report.config),
    }


def _save(fig: Figure, path: Path):
    fig.savefig(path, format="png", metadata=_PNG_META)


def plot_nav(report: BacktestReport, path):
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(7, 3.2))
        ax = fig.add_subplot()
        x = range(len(report.nav_gross))
        ax.plot(x, report.nav_gross, label="gross")
        ax.plot(x, report.nav_net, label="net")
        ax.set_xlabel(f"trading day from {report.dates[0]}")
        ax.set_ylabel("NAV")
        ax.set_title(f"{report.strategy}: net Sharpe {report.metrics_net.sharpe:.2f}")
        ax.legend()
        _save(fig, Path(path))


def plot_weights(report: BacktestReport, path):
    with matplotlib.rc_context({**STYLE, "axes.grid": False}):
        fig = Figure(figsize=(7, 0.35 * len(report.tickers) + 1.4))
        ax = fig.add_subplot()
        im = ax.imshow(report.weights.T, aspect="auto", interpolation="nearest", cmap="viridis", vmin=0.0,
                       vmax=1.0)
        ax.set_yticks(range(len(report.tickers)), labels=list(report.tickers))
        ax.set_xlabel("trading day")
        ax.set_title("executed weights")
        fig.colorbar(im, ax=ax, fraction=0.04, pad=0.02)
        _save(fig, Path(path))


def plot_tv(report: BacktestReport, path):
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(7, 2.6))
        ax = fig.add_subplot()
        ax.bar(range(len(report.tv_series)), report.tv_series, width=0.8)
        ax.set_xlabel("20-day block")
        ax.set_ylabel("total variation")
        ax.set_title("weight total variation per block")
        _save(fig, Path(path))


def export_report(report: BacktestReport, out_dir, figures: bool = True) -> dict:
    """Write nav.csv, weights.csv, tv.csv, metrics.json and (optionally) three PNGs; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("nav.csv", "weights.csv", "tv.csv", "metrics.json")}
    with paths["nav.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "nav_gross", "nav_net"])
        for d, g, n in zip(report.dates, report.nav_gross, report.nav_net):
            w.writerow([str(d), repr(float(g)), repr(float(n))])
    with paths["weights.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *report.tickers])
        for d, row in zip(report.dates, report.weights):
            w.writerow([str(d), *(repr(float(x)) for x in row)])
    with paths["tv.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "start", "total_variation"])
        for k, tv in enumerate(report.tv_series):
            w.writerow([k, str(report.dates[20 * k]), repr(float(tv))])
    paths["metrics.json"].write_text(json.dumps(metrics_document(report), indent=2, sort_keys=True) + "\n")
    if figures:
        for name, fn in (("nav.png", plot_nav), ("weights.png", plot_weights), ("tv.png", plot_tv)):
            paths[name] = out / name
            fn(report, paths[name])
    return paths
