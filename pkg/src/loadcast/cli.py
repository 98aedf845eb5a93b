"""Command line entry points.

Every command takes ``--config`` (YAML), ``--seed`` and ``--out`` (or the
LOADCAST_OUT environment variable). Failures print one JSON line to stderr
and exit with status 1.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import pandas as pd

from .core import extract_daily_peaks
from .features import FeatureBuilder
from .gbdt import GBMRegressor
from .hierarchy import build_summing_matrix, coherence_error, reconcile_horizon, reconciliation_report
from .io import (TIMESTAMP, SyntheticSpec, concat_series, gen_synthetic, ingest_csv, load_config,
                 read_forecast_csv, split_last_year, to_float, truth_json, write_dataset_csv, write_forecast_csv,
                 write_holidays, write_peaks_csv, _read_table, _write_frame)
from .metrics import score_forecast
from .pipeline import LoadForecaster, PipelineConfig, TemporalHierarchyForecaster
from .selection import ClusteredPermutationSelector, dendrogram_edges

logger = logging.getLogger("loadcast")


class Context:
    def __init__(self, config_path, seed, out):
        self.raw = load_config(config_path) if config_path else {}
        self.seed = seed
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    def pipeline_config(self) -> PipelineConfig:
        cfg = PipelineConfig.from_dict(self.raw)
        return cfg.with_seed(self.seed) if self.seed is not None else cfg

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})

    def path(self, given, default_name: str) -> Path:
        return Path(given) if given else self.out / default_name


def common(f):
    f = click.option("--out", envvar="LOADCAST_OUT", default=".", show_default=True,
                     type=click.Path(file_okay=False), help="Output directory.")(f)
    f = click.option("--seed", type=int, default=None, help="Overrides every RNG seed in the config.")(f)
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="YAML config file.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Hourly load and daily peak forecasting."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@common
def synth(config_path, seed, out):
    """Write a synthetic history, the following year and its holidays."""
    ctx = Context(config_path, seed, out)
    params = ctx.section("synth")
    if seed is not None:
        params["rng_seed"] = seed
    spec = SyntheticSpec(**params)
    ds, truth = gen_synthetic(replace(spec, years=spec.years + 1))
    history, future = split_last_year(ds)
    write_dataset_csv(history, ctx.out / "history.csv")
    write_dataset_csv(future, ctx.out / "future.csv")
    write_holidays(ds.holidays, ctx.out / "holidays.csv")
    truth["settings"]["years"] = spec.years
    (ctx.out / "truth.json").write_text(truth_json(truth) + "\n")
    _done({"history_hours": len(history), "future_hours": len(future)})


def _future_inputs(history, future):
    temps = [concat_series(h, f) for h, f in zip(history.temperatures, future.temperatures)]
    exo = [concat_series(h, f) for h, f in zip(history.exogenous, future.exogenous)]
    return temps, exo


@cli.command()
@common
@click.option("--history", type=click.Path(exists=True, dir_okay=False), help="Training CSV [OUT/history.csv].")
@click.option("--future", type=click.Path(exists=True, dir_okay=False),
              help="Temperatures over the horizon [OUT/future.csv]; a load column is ignored.")
@click.option("--ldc", default="load", show_default=True, help="Target column.")
def forecast(config_path, seed, out, history, future, ldc):
    """Train on the history and forecast every hour of the future file."""
    ctx = Context(config_path, seed, out)
    cfg = ctx.pipeline_config()
    hist = ingest_csv(ctx.path(history, "history.csv"), target=ldc)
    fut = ingest_csv(ctx.path(future, "future.csv"), target=ldc, require_target=False)
    temps, exo = _future_inputs(hist, fut)
    horizon = len(fut)

    if set(cfg.scales) - {1}:
        model = TemporalHierarchyForecaster(cfg).fit(hist)
        base = model.predict_base(temps, horizon, exo)
        for k, dist in base.items():
            write_forecast_csv(dist, ctx.out / f"base_k{k}.csv")
        bottom = model.models_[1]
        dist = base[1]
    else:
        bottom = LoadForecaster(cfg).fit(hist)
        dist = bottom.predict_horizon(temps, horizon, exo).dist
        write_forecast_csv(dist, ctx.out / "base_k1.csv")
    bottom.save(ctx.out / "model.json")
    write_forecast_csv(dist, ctx.out / "forecasts.csv")
    write_peaks_csv(extract_daily_peaks(dist.point), ctx.out / "peaks.csv")
    _done({"hours": horizon, "features": len(bottom.feature_names_), "scales": list(cfg.scales)})


@cli.command()
@common
@click.option("--inputs", type=click.Path(exists=True, file_okay=False),
              help="Directory holding base_k{k}.csv files [OUT].")
def reconcile(config_path, seed, out, inputs):
    """Reconcile per-scale base forecasts into coherent hourly forecasts."""
    ctx = Context(config_path, seed, out)
    src = Path(inputs) if inputs else ctx.out
    scales = ctx.section("hierarchy").get("scales")
    if scales is None:
        scales = sorted(int(p.stem[len("base_k"):]) for p in src.glob("base_k*.csv"))
    if not scales:
        raise FileNotFoundError(f"no base_k*.csv forecasts in {src}")
    hs = build_summing_matrix(scales)
    base = {k: read_forecast_csv(src / f"base_k{k}.csv") for k in hs.scales}
    dist, results = reconcile_horizon(base, hs)
    err = coherence_error(np.array([r.mean for r in results]), hs)
    write_forecast_csv(dist, ctx.out / "reconciled.csv")
    write_peaks_csv(extract_daily_peaks(dist.point), ctx.out / "reconciled_peaks.csv")
    _write_frame(reconciliation_report(base, hs, results), ctx.out / "reconciliation_report.csv")
    _done({"days": len(results), "scales": list(hs.scales), "coherence_error": err})


def _float_column(df: pd.DataFrame, col: str) -> np.ndarray:
    if col not in df.columns:
        raise click.UsageError(f"missing column {col!r}")
    vals = to_float(df[col].str.strip())
    if np.isnan(vals).any():
        raise ValueError(f"column {col!r} has missing or non-numeric values")
    return vals


def _read_scored(path, ldc: str) -> pd.DataFrame:
    df = _read_table(path)
    col = "mean" if "mean" in df.columns else ldc
    if col not in df.columns:
        raise click.UsageError(f"{path} has neither a 'mean' nor a {ldc!r} column")
    out = pd.DataFrame({"mean": _float_column(df, col)},
                       index=pd.to_datetime(df[TIMESTAMP], format="ISO8601"))
    out["stddev"] = _float_column(df, "stddev") if "stddev" in df.columns else 0.0
    return out


@cli.command()
@common
@click.option("--actual", type=click.Path(exists=True, dir_okay=False), help="Actuals CSV [OUT/future.csv].")
@click.option("--forecast", "forecast_path", type=click.Path(exists=True, dir_okay=False),
              help="Forecast CSV [OUT/reconciled.csv, else OUT/forecasts.csv].")
@click.option("--reference", type=click.Path(exists=True, dir_okay=False),
              help="Second forecast to compute skill against.")
@click.option("--ldc", default="load", show_default=True, help="Target column of the actuals.")
@click.option("--alpha", default=0.1, show_default=True, help="Interval score level.")
def score(config_path, seed, out, actual, forecast_path, reference, ldc, alpha):
    """Score a forecast file against actuals."""
    ctx = Context(config_path, seed, out)
    if forecast_path is None:
        rec = ctx.out / "reconciled.csv"
        forecast_path = rec if rec.is_file() else ctx.out / "forecasts.csv"
    y = _read_table(ctx.path(actual, "future.csv"))
    ys = pd.Series(_float_column(y, ldc), index=pd.to_datetime(y[TIMESTAMP], format="ISO8601"))
    fc = _read_scored(forecast_path, ldc)
    if not fc.index.equals(pd.DatetimeIndex(ys.index)):
        raise ValueError("forecast and actual timestamps differ")
    ref_report = None
    rows = []
    if reference:
        rf = _read_scored(reference, ldc)
        ref_report = score_forecast(ys.to_numpy(), rf["mean"].to_numpy(), rf["stddev"].to_numpy(), alpha)
        rows.append({"forecast": str(reference), **ref_report.as_row()})
    report = score_forecast(ys.to_numpy(), fc["mean"].to_numpy(), fc["stddev"].to_numpy(), alpha, ref_report)
    rows.append({"forecast": str(forecast_path), **report.as_row()})
    _write_frame(pd.DataFrame(rows), ctx.out / "scores.csv")
    (ctx.out / "scores.json").write_text(report.to_json() + "\n")
    _done({"hours": len(ys), "days": len(ys) // 24, **{k: v for k, v in report.as_row().items()}})


@cli.command("select-features")
@common
@click.option("--history", type=click.Path(exists=True, dir_okay=False), help="Training CSV [OUT/history.csv].")
@click.option("--ldc", default="load", show_default=True, help="Target column.")
def select_features(config_path, seed, out, history, ldc):
    """Cluster features and rank clusters by permutation importance."""
    ctx = Context(config_path, seed, out)
    cfg = ctx.pipeline_config()
    ds = ingest_csv(ctx.path(history, "history.csv"), target=ldc)
    builder = FeatureBuilder(**cfg.features)
    fm = builder.build(ds.temperatures, ds.holidays, ds.exogenous)
    keep = ~fm.row_mask
    y = np.log(ds.load.values) if cfg.log_transform else np.asarray(ds.load.values)
    sel = cfg.selection
    probe = cfg.boost if sel.num_iterations is None else replace(cfg.boost, num_iterations=sel.num_iterations)
    selector = ClusteredPermutationSelector(
        GBMRegressor.from_config(probe), threshold=sel.threshold, method=sel.method,
        n_repeats=sel.n_repeats, scorer=sel.scorer, cv=sel.cv, n_sigma=sel.n_sigma,
        protected=builder.baseline_columns(ds.temperatures + ds.exogenous),
        random_state=cfg.boost.rng_seed)
    selector.fit(fm.to_frame()[keep], y[keep])
    selector.report_.to_csv(ctx.out / "importance.csv")
    _write_frame(dendrogram_edges(selector.correlation_, absolute=True), ctx.out / "dendrogram.csv")
    (ctx.out / "selected.txt").write_text("\n".join(selector.selected_features) + "\n")
    _done({"features": fm.n_columns, "clusters": len(selector.clusters_),
           "informative": len(selector.informative_), "selected": len(selector.selected_features)})


def _done(info: dict) -> None:
    click.echo(json.dumps({"status": "ok", **info}, default=float))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        print(json.dumps({"status": "error", "error": "Abort", "message": "aborted"}), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        msg = exc.format_message() if isinstance(exc, click.ClickException) else str(exc)
        print(json.dumps({"status": "error", "error": type(exc).__name__,
                          "message": " ".join(msg.split())}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
