"""End-to-end forecaster: target transforms, outlier weighting, feature
assembly, optional cluster-permutation selection, boosting, and horizon
prediction with daily peaks. Also time-series CV and the per-scale
temporal-hierarchy forecaster.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .core import Dataset, DistForecast, HourlySeries, PeakForecast, PointForecast, extract_daily_peaks
from .features import AGG_FUNCS, GROUP_KEYS, ROLLING_STATS, ROLLING_WINDOWS, FeatureBuilder
from .gbdt import BoostConfig, GaussianGBMRegressor, GBMRegressor, TreeEnsemble
from .hierarchy import DEFAULT_SCALES, HierarchyStructure, aggregate_series, build_summing_matrix, reconcile_horizon
from .metrics import score_forecast
from .selection import ClusteredPermutationSelector

logger = logging.getLogger(__name__)

PIPELINE_FORMAT = "loadcast-pipeline"
PIPELINE_VERSION = 1
Z90 = 1.6448536269514722  # 95th percentile of a standard normal: half-width of the 90% interval


# ------------------------------------------------------------ target transforms


@dataclass(frozen=True)
class TrendModel:
    beta0: float
    beta1: float

    def __post_init__(self):
        if not (math.isfinite(self.beta0) and math.isfinite(self.beta1)):
            raise ValueError("trend coefficients must be finite")

    def at(self, t) -> np.ndarray:
        return self.beta0 + self.beta1 * np.asarray(t, dtype=float)


def _values(y) -> np.ndarray:
    return np.asarray(y.values if isinstance(y, HourlySeries) else y, dtype=float)


def fit_trend(y) -> TrendModel:
    """Ordinary least squares of y_t on t = 1..T."""
    v = _values(y)
    if v.size < 2:
        raise ValueError("a trend needs at least two observations")
    t = np.arange(1, v.size + 1, dtype=float)
    tc = t - t.mean()
    beta1 = float(np.dot(tc, v - v.mean()) / np.dot(tc, tc))
    return TrendModel(float(v.mean() - beta1 * t.mean()), beta1)


def detrend(y, tm: TrendModel, t=None) -> np.ndarray:
    v = _values(y)
    t = np.arange(1, v.size + 1) if t is None else t
    return v - tm.at(t)


def retrend(forecast, tm: TrendModel, t) -> np.ndarray:
    """Add the trend line evaluated at (possibly future) indices ``t``."""
    return _values(forecast) + tm.at(t)


def log_transform(y) -> np.ndarray:
    v = _values(y)
    bad = np.nonzero(~(v > 0))[0]
    if bad.size:
        where = (str(y.index[bad[0]]) if isinstance(y, HourlySeries) else f"position {bad[0]}")
        raise ValueError(f"log transform needs positive values; got {v[bad[0]]} at {where}")
    return np.log(v)


def inverse_log(z) -> np.ndarray:
    return np.exp(_values(z))


def outlier_weights(y, q: float = 0.005) -> np.ndarray:
    """Zero weight for values strictly below the empirical q-quantile."""
    if not 0 <= q < 1:
        raise ValueError("quantile must be in [0, 1)")
    v = _values(y)
    return np.where(v < np.quantile(v, q), 0.0, 1.0)


def lognormal_moments(mu_log, sigma_log) -> tuple[np.ndarray, np.ndarray]:
    """Mean and stddev of exp(N(mu, sigma^2))."""
    mu_log, sigma_log = np.asarray(mu_log, dtype=float), np.asarray(sigma_log, dtype=float)
    mean = np.exp(mu_log + 0.5 * sigma_log ** 2)
    return mean, mean * np.sqrt(np.expm1(sigma_log ** 2))


# ------------------------------------------------------------------------- folds


@dataclass(frozen=True)
class Fold:
    train_index: pd.DatetimeIndex
    test_index: pd.DatetimeIndex

    def __post_init__(self):
        if len(self.train_index) == 0 or len(self.test_index) == 0:
            raise ValueError("folds need non-empty train and test ranges")
        if not self.train_index.max() < self.test_index.min():
            raise ValueError("training data must precede the test block")


def ts_cv_folds(index: pd.DatetimeIndex, n_folds: int, fold_length: int | str) -> list[Fold]:
    """Expanding-window folds over the last ``n_folds`` test blocks.

    ``fold_length`` is a number of steps, or a pandas period alias ("Y", "M")
    for calendar blocks such as whole years.
    """
    index = pd.DatetimeIndex(index)
    n = len(index)
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    if isinstance(fold_length, str):
        periods = index.to_period(fold_length)
        uniq = periods.unique()
        if len(uniq) < n_folds + 1:
            raise ValueError(f"need {n_folds + 1} periods of {fold_length!r}, have {len(uniq)}")
        bounds = [np.nonzero(periods == p)[0] for p in uniq[-n_folds:]]
        blocks = [(b[0], b[-1] + 1) for b in bounds]
    else:
        if fold_length < 1 or n_folds * fold_length >= n:
            raise ValueError(f"{n} observations cannot hold {n_folds} folds of {fold_length} plus training data")
        blocks = [(n - (n_folds - i) * fold_length, n - (n_folds - i - 1) * fold_length)
                  for i in range(n_folds)]
    return [Fold(index[:a], index[a:b]) for a, b in blocks]


# ------------------------------------------------------------------------ config


@dataclass
class SelectionConfig:
    enabled: bool = False
    threshold: float = 0.1
    method: str = "spearman"
    n_repeats: int = 100
    scorer: str = "neg_mse"
    cv: int = 3
    n_sigma: float = 3.0
    num_iterations: int | None = None  # boosting rounds of the probe models


@dataclass
class PipelineConfig:
    log_transform: bool = True
    detrend: bool = True
    outlier_quantile: float = 0.005
    distributional: bool = True
    # fraction of the history held out to rescale the predictive stddev (0 = off)
    sigma_calibration: float = 0.2
    features: dict = field(default_factory=lambda: {
        "calendar": "full", "current": True, "lags": 48,
        "rolling_windows": list(ROLLING_WINDOWS), "rolling_stats": list(ROLLING_STATS),
        "agg_keys": list(GROUP_KEYS), "agg_funcs": list(AGG_FUNCS)})
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)
    scales: tuple = (1,)

    def __post_init__(self):
        if not 0 <= self.outlier_quantile < 1:
            raise ValueError("outlier_quantile must be in [0, 1)")
        if not 0 <= self.sigma_calibration < 1:
            raise ValueError("sigma_calibration must be in [0, 1)")
        if isinstance(self.selection, Mapping):
            self.selection = SelectionConfig(**self.selection)
        if isinstance(self.boost, Mapping):
            self.boost = BoostConfig(**self.boost)
        self.scales = tuple(int(k) for k in self.scales)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        """Build from the nested config file layout (unknown keys rejected)."""
        d = dict(d)
        pipe = dict(d.pop("pipeline", {}) or {})
        known = {f.name for f in fields(cls)}
        for section in ("features", "selection", "boost"):
            if section in d:
                pipe[section] = d.pop(section)
        if "hierarchy" in d:
            pipe["scales"] = tuple((d.pop("hierarchy") or {}).get("scales", DEFAULT_SCALES))
        unknown = set(pipe) - known
        if unknown:
            raise KeyError(f"unknown pipeline keys: {sorted(unknown)}")
        cfg = cls(**pipe)
        if "features" in pipe:
            merged = cls().features
            merged.update(pipe["features"])
            cfg.features = merged
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, boost=replace(self.boost, rng_seed=seed))


# --------------------------------------------------------------------- forecaster


@dataclass(frozen=True)
class HorizonForecast:
    point: PointForecast
    dist: DistForecast
    peaks: list[PeakForecast]


class LoadForecaster(BaseEstimator):
    """Single-scale load model.

    ``fit`` runs log -> detrend -> features -> (selection) -> boosting with
    outlier weights and keeps every fitted artifact as an attribute.
    ``predict_horizon`` inverts the transforms (retrend, then exp) and
    propagates the predictive stddev to the original scale to first order.
    """

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config

    @property
    def cfg(self) -> PipelineConfig:
        return self.config or PipelineConfig()

    # transformed-scale helpers -------------------------------------------------

    def _t(self, index: pd.DatetimeIndex) -> np.ndarray:
        return ((index - self.train_start_) / pd.Timedelta(hours=self.step_hours_)).to_numpy() + 1.0

    def _forward(self, y: np.ndarray, t: np.ndarray) -> np.ndarray:
        z = log_transform(y) if self.cfg.log_transform else np.asarray(y, dtype=float)
        return z - self.trend_.at(t) if self.trend_ is not None else z

    def _inverse(self, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        v = retrend(z, self.trend_, t) if self.trend_ is not None else np.asarray(z, dtype=float)
        return inverse_log(v) if self.cfg.log_transform else v

    def fit(self, ds: Dataset):
        cfg = self.cfg
        self.train_start_ = ds.index[0]
        self.step_hours_ = ds.load.freq_hours
        self.holidays_ = ds.holidays
        self.temperature_names_ = [t.name for t in ds.temperatures]
        self.exogenous_names_ = [e.name for e in ds.exogenous]
        y = np.asarray(ds.load.values)
        t = self._t(ds.index)
        z = log_transform(ds.load) if cfg.log_transform else y.astype(float)
        self.trend_ = fit_trend(z) if cfg.detrend else None
        if self.trend_ is not None:
            z = detrend(z, self.trend_, t)
        self.builder_ = FeatureBuilder(**cfg.features)
        fm = self.builder_.build(ds.temperatures, ds.holidays, ds.exogenous)
        self.weights_ = outlier_weights(y, cfg.outlier_quantile) * ~fm.row_mask
        if self.weights_.sum() == 0:
            raise ValueError("no usable training rows after warm-up and outlier removal")
        X = fm.to_frame()

        if cfg.selection.enabled:
            probe_cfg = cfg.boost if cfg.selection.num_iterations is None else replace(
                cfg.boost, num_iterations=cfg.selection.num_iterations, dart=False)
            self.selector_ = ClusteredPermutationSelector(
                GBMRegressor.from_config(probe_cfg), threshold=cfg.selection.threshold,
                method=cfg.selection.method, n_repeats=cfg.selection.n_repeats,
                scorer=cfg.selection.scorer, cv=cfg.selection.cv, n_sigma=cfg.selection.n_sigma,
                protected=self.builder_.baseline_columns(ds.temperatures + ds.exogenous),
                random_state=cfg.boost.rng_seed)
            keep = self.weights_ > 0
            self.selector_.fit(X[keep], z[keep])
            self.feature_names_ = self.selector_.selected_features
        else:
            self.selector_ = None
            self.feature_names_ = list(X.columns)

        est_cls = GaussianGBMRegressor if cfg.distributional else GBMRegressor
        self.model_ = est_cls.from_config(cfg.boost).fit(X[self.feature_names_], z, sample_weight=self.weights_)
        if not cfg.distributional:
            fitted = self.model_.predict(X[self.feature_names_])
            r = (z - fitted)[self.weights_ > 0]
            self.residual_std_ = float(max(np.std(r), 1e-12))
        else:
            self.residual_std_ = None
        self.sigma_scale_ = self._calibrate(ds) if cfg.sigma_calibration > 0 else 1.0
        return self

    def _calibrate(self, ds: Dataset) -> float:
        """Robust spread of the z-scores of a refit on the head of the history,
        evaluated on the held-out tail (whole days). In-sample spreads are
        optimistic because the mean trees overfit; this factor rescales them
        so the central 90% interval covers 90% of the tail. A quantile keeps
        a few near-zero stddevs from dominating, unlike an RMS."""
        cfg = self.cfg
        per_day = 24 // self.step_hours_
        n_days = len(ds) // per_day
        tail_days = int(round(n_days * cfg.sigma_calibration))
        head = (n_days - tail_days) * per_day
        if tail_days < 1 or head <= self.required_history():
            logger.warning("history too short for sigma calibration; skipping")
            return 1.0
        inner = LoadForecaster(replace(cfg, sigma_calibration=0.0)).fit(ds.slice(ds.index[:head]))
        horizon = len(ds) - head
        index, mu, sd = inner.predict_transformed(ds.temperatures, horizon, ds.exogenous)
        truth = inner._forward(np.asarray(ds.load.values[head:]), inner._t(index))
        keep = self.weights_[head:] > 0
        z = (truth - mu)[keep] / sd[keep]
        return float(np.quantile(np.abs(z), 0.9) / Z90) if z.size else 1.0

    def required_history(self) -> int:
        return self.builder_.warmup(self.step_hours_)

    def features_for(self, temperatures: Sequence[HourlySeries], exogenous: Sequence[HourlySeries] = ()):
        by_name = {t.name: t for t in temperatures}
        missing = [n for n in self.temperature_names_ if n not in by_name]
        if missing:
            raise ValueError(f"missing temperature series: {missing}")
        temps = [by_name[n] for n in self.temperature_names_]
        ex = {e.name: e for e in exogenous}
        exo = [ex[n] for n in self.exogenous_names_]
        return self.builder_.build(temps, self.holidays_, exo)

    def predict_transformed(self, temperatures, horizon: int, exogenous=()):
        """Model-scale (mean, stddev) over the last ``horizon`` steps."""
        fm = self.features_for(temperatures, exogenous)
        if horizon < 1 or horizon > len(fm):
            raise ValueError(f"horizon {horizon} outside the supplied {len(fm)} steps")
        fm = fm.rows(slice(len(fm) - horizon, None))
        if fm.row_mask.any():
            raise ValueError(f"insufficient warm-up: supply at least {self.required_history()} steps "
                             f"of temperatures before the {horizon}-step horizon")
        X = fm.to_frame()[self.feature_names_]
        if self.cfg.distributional:
            mu, sd = self.model_.predict_dist(X)
        else:
            mu = self.model_.predict(X)
            sd = np.full(mu.shape, self.residual_std_)
        return fm.index, mu, sd * getattr(self, "sigma_scale_", 1.0)

    def predict_horizon(self, temperatures, horizon: int, exogenous=()) -> HorizonForecast:
        index, mu, sd = self.predict_transformed(temperatures, horizon, exogenous)
        t = self._t(index)
        mean = self._inverse(mu, t)
        # d/dz of the inverse transform: exp for the log path, 1 otherwise
        stddev = mean * sd if self.cfg.log_transform else sd
        stddev = np.maximum(stddev, np.finfo(float).tiny)
        point = PointForecast(index, mean)
        peaks = extract_daily_peaks(point) if self.step_hours_ == 1 else []
        return HorizonForecast(point, DistForecast(index, mean, stddev), peaks)

    def predict(self, temperatures, horizon: int, exogenous=()) -> np.ndarray:
        return np.asarray(self.predict_horizon(temperatures, horizon, exogenous).point.values)

    # persistence -------------------------------------------------------------

    def artifacts(self) -> dict:
        return {
            "format": PIPELINE_FORMAT,
            "version": PIPELINE_VERSION,
            "config": self.cfg.to_dict(),
            "train_start": str(self.train_start_),
            "step_hours": self.step_hours_,
            "holidays": sorted(str(d) for d in self.holidays_),
            "temperature_names": self.temperature_names_,
            "exogenous_names": self.exogenous_names_,
            "trend": asdict(self.trend_) if self.trend_ is not None else None,
            "feature_names": list(self.feature_names_),
            "residual_std": self.residual_std_,
            "sigma_scale": self.sigma_scale_,
            "selected_clusters": sorted(self.selector_.informative_) if self.selector_ is not None else None,
            "n_zero_weight": int(np.sum(self.weights_ == 0)),
            "model": self.model_.ensemble_.to_dict(),
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.artifacts(), sort_keys=True).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.artifacts()))

    @classmethod
    def load(cls, path) -> "LoadForecaster":
        d = json.loads(Path(path).read_text())
        if d.get("format") != PIPELINE_FORMAT or d.get("version") != PIPELINE_VERSION:
            raise ValueError(f"{path} is not a saved pipeline of version {PIPELINE_VERSION}")
        cfg = PipelineConfig(**d["config"])
        self = cls(cfg)
        self.train_start_ = pd.Timestamp(d["train_start"])
        self.step_hours_ = d["step_hours"]
        self.holidays_ = frozenset(pd.Timestamp(h).date() for h in d["holidays"])
        self.temperature_names_ = d["temperature_names"]
        self.exogenous_names_ = d["exogenous_names"]
        self.trend_ = TrendModel(**d["trend"]) if d["trend"] else None
        self.builder_ = FeatureBuilder(**cfg.features)
        self.feature_names_ = d["feature_names"]
        self.residual_std_ = d["residual_std"]
        self.sigma_scale_ = d["sigma_scale"]
        self.selector_ = None
        self.model_ = GBMRegressor.from_ensemble(TreeEnsemble.from_dict(d["model"]))
        return self


def train_forecaster(ds: Dataset, cfg: PipelineConfig | None = None) -> LoadForecaster:
    return LoadForecaster(cfg).fit(ds)


def predict_horizon(pipeline: LoadForecaster, future_temps, horizon: int, exogenous=()) -> HorizonForecast:
    return pipeline.predict_horizon(future_temps, horizon, exogenous)


# ----------------------------------------------------------- temporal hierarchy


def aggregate_dataset(ds: Dataset, k: int) -> Dataset:
    """Block-sum load, temperatures and exogenous series over k hours."""
    return Dataset(aggregate_series(ds.load, k),
                   tuple(aggregate_series(t, k) for t in ds.temperatures),
                   ds.holidays,
                   tuple(aggregate_series(e, k) for e in ds.exogenous))


@dataclass(frozen=True)
class HierarchyForecast:
    base: dict            # scale -> DistForecast (original units)
    reconciled: DistForecast
    peaks: list[PeakForecast]
    structure: HierarchyStructure
    results: list


class TemporalHierarchyForecaster(BaseEstimator):
    """One independent forecaster per scale, reconciled per day."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config

    def fit(self, ds: Dataset):
        cfg = self.config or PipelineConfig(scales=DEFAULT_SCALES)
        self.structure_ = build_summing_matrix(cfg.scales)
        self.models_ = {}
        for k in self.structure_.scales:
            logger.info("fitting scale %dh", k)
            self.models_[k] = LoadForecaster(cfg).fit(aggregate_dataset(ds, k))
        return self

    def predict_base(self, temperatures, horizon: int, exogenous=()) -> dict:
        out = {}
        for k, model in self.models_.items():
            if horizon % k:
                raise ValueError(f"horizon {horizon} is not a multiple of scale {k}")
            temps = [aggregate_series(t, k) for t in temperatures]
            exo = [aggregate_series(e, k) for e in exogenous]
            out[k] = model.predict_horizon(temps, horizon // k, exo).dist
        return out

    def predict_horizon(self, temperatures, horizon: int, exogenous=()) -> HierarchyForecast:
        base = self.predict_base(temperatures, horizon, exogenous)
        reconciled, results = reconcile_horizon(base, self.structure_)
        return HierarchyForecast(base, reconciled, extract_daily_peaks(reconciled.point),
                                 self.structure_, results)


# --------------------------------------------------------- CV and grid search


def cross_validate(ds: Dataset, cfg: PipelineConfig, n_folds: int = 3, fold_length: int | str = "Y"
                   ) -> pd.DataFrame:
    """Out-of-sample score report per fold (ex-post temperatures)."""
    rows = []
    for i, fold in enumerate(ts_cv_folds(ds.index, n_folds, fold_length)):
        model = LoadForecaster(cfg).fit(ds.slice(fold.train_index))
        full = ds.slice(fold.train_index.append(fold.test_index))
        fc = model.predict_horizon(full.temperatures, len(fold.test_index), full.exogenous)
        actual = ds.slice(fold.test_index).load.values
        rep = score_forecast(actual, fc.dist.mean, fc.dist.stddev)
        rows.append({"fold": i, "test_start": fold.test_index[0], **rep.as_row()})
    return pd.DataFrame(rows)


def grid_search(ds: Dataset, cfg: PipelineConfig, grid: Mapping[str, Sequence], n_folds: int = 3,
                fold_length: int | str = "Y", metric: str = "mape_h") -> tuple[PipelineConfig, pd.DataFrame]:
    """Exhaustive search over ``boost`` parameters (keys of BoostConfig) by
    mean CV score; lower is better."""
    keys = list(grid)
    results = []
    best, best_score = cfg, math.inf
    for combo in itertools.product(*(grid[k] for k in keys)):
        trial = replace(cfg, boost=replace(cfg.boost, **dict(zip(keys, combo))))
        score = float(cross_validate(ds, trial, n_folds, fold_length)[metric].mean())
        results.append({**dict(zip(keys, combo)), metric: score})
        if score < best_score:
            best, best_score = trial, score
    return best, pd.DataFrame(results)
