import numpy as np
import pandas as pd
import pytest

from loadcast.core import Dataset, PointForecast, extract_daily_peaks
from loadcast.features import FeatureBuilder
from loadcast.gbdt import BoostConfig
from loadcast.hierarchy import coherence_error
from loadcast.pipeline import (Fold, LoadForecaster, PipelineConfig, SelectionConfig, TemporalHierarchyForecaster,
                               TrendModel,
                               cross_validate, detrend, fit_trend, inverse_log, log_transform, outlier_weights,
                               retrend, train_forecaster, ts_cv_folds)
from conftest import series

BASELINE = {"calendar": "basic", "current": True, "lags": None, "rolling_windows": None, "agg_keys": None}


def cheap(**kw):
    base = dict(features=dict(BASELINE), boost=BoostConfig(num_iterations=20, learning_rate=0.2, max_leaves=8),
                sigma_calibration=0.0)
    base.update(kw)
    return PipelineConfig(**base)


def year_split(ds, year):
    idx = ds.index
    return ds.slice(idx[idx.year < year]), ds.slice(idx[idx.year == year])


# -------------------------------------------------------------- transforms


def test_trend_examples(rng):
    tm = fit_trend([2.0, 4.0, 6.0])
    assert (tm.beta0, tm.beta1) == pytest.approx((0.0, 2.0), abs=1e-12)
    assert np.allclose(detrend([2.0, 4.0, 6.0], tm), 0)
    tm = fit_trend(np.full(10, 3.3))
    assert tm.beta1 == pytest.approx(0, abs=1e-14) and tm.beta0 == pytest.approx(3.3)
    t = np.arange(1, 1001)
    y = 3 + 0.5 * t + rng.uniform(-0.01, 0.01, 1000)
    tm = fit_trend(y)
    slope, icpt = np.polyfit(t, y, 1)
    assert tm.beta1 == pytest.approx(slope, rel=1e-10) and abs(tm.beta1 - 0.5) < 0.01
    assert retrend(detrend(y, tm), tm, t) == pytest.approx(y, rel=1e-12)
    with pytest.raises(ValueError):
        fit_trend([1.0])
    with pytest.raises(ValueError):
        TrendModel(float("nan"), 0.0)


def test_log_transform_examples(rng):
    assert log_transform([1.0]).tolist() == [0.0]
    assert log_transform([np.e])[0] == pytest.approx(1.0, abs=1e-15)
    y = rng.uniform(1e-3, 1e4, 1000)
    np.testing.assert_allclose(inverse_log(log_transform(y)), y, rtol=1e-12)
    with pytest.raises(ValueError, match="2004-01-01 01:00"):
        log_transform(series([1.0, -2.0, 3.0]))


def test_outlier_weights_examples():
    y = np.arange(1.0, 101.0)
    assert np.all(outlier_weights(y, 0.0) == 1)
    q = np.quantile(y, 0.02)
    np.testing.assert_array_equal(outlier_weights(y, 0.02), (y >= q).astype(float))
    assert outlier_weights(y, 0.02).tolist()[:3] == [0.0, 0.0, 1.0]
    assert np.all(outlier_weights(np.full(10, 4.0), 0.3) == 1)
    with pytest.raises(ValueError):
        outlier_weights(y, 1.0)


# ------------------------------------------------------------------- folds


def test_yearly_folds_2002_to_2006():
    idx = pd.date_range("2002-01-01", "2006-12-31 23:00", freq="h")
    folds = ts_cv_folds(idx, 3, "Y")
    assert [f.test_index.year.unique().tolist() for f in folds] == [[2004], [2005], [2006]]
    for f in folds:
        assert f.train_index[-1] < f.test_index[0]
        assert f.train_index[0] == idx[0]
    assert not folds[0].test_index.intersection(folds[1].test_index).size


def test_step_folds_and_errors():
    idx = pd.date_range("2002-01-01", periods=100, freq="h")
    (f,) = ts_cv_folds(idx, 1, 20)
    assert len(f.test_index) == 20 and len(f.train_index) == 80
    folds = ts_cv_folds(idx, 4, 10)
    assert [len(f.train_index) for f in folds] == [60, 70, 80, 90]
    with pytest.raises(ValueError):
        ts_cv_folds(idx, 5, 20)
    with pytest.raises(ValueError):
        ts_cv_folds(idx, 3, "Y")
    with pytest.raises(ValueError):
        Fold(idx[50:], idx[:10])


# ---------------------------------------------------------------- pipeline


def test_config_from_dict_and_roundtrip():
    cfg = PipelineConfig.from_dict({"pipeline": {"detrend": False}, "features": {"lags": 3},
                                    "boost": {"num_iterations": 7}, "hierarchy": {"scales": [1, 2]},
                                    "synth": {"years": 1}})
    assert not cfg.detrend and cfg.features["lags"] == 3 and cfg.features["calendar"] == "full"
    assert cfg.boost.num_iterations == 7 and cfg.scales == (1, 2)
    assert PipelineConfig(**cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        PipelineConfig.from_dict({"pipeline": {"bogus": 1}})
    with pytest.raises(ValueError):
        PipelineConfig(outlier_quantile=1.0)


def test_baseline_run_scores_every_fold(small_synth):
    ds, _ = small_synth
    res = cross_validate(ds, cheap(), n_folds=2, fold_length=24 * 60)
    assert len(res) == 2 and np.all(np.isfinite(res["mape_h"])) and np.all(res["coverage_pct"] >= 0)


def test_lag_block_adds_192_features(small_synth):
    ds, _ = small_synth
    temps4 = [series(t.values, name=f"T{i}") for i, t in enumerate(ds.temperatures * 2)]
    narrow = FeatureBuilder(**BASELINE).build(temps4)
    wide = FeatureBuilder(**{**BASELINE, "lags": 48}).build(temps4)
    assert wide.n_columns - narrow.n_columns == 192


def test_constant_model_gives_constant_forecast(small_synth):
    ds, _ = small_synth
    hist, fut = year_split(ds, 2005)
    cfg = cheap(log_transform=False, detrend=False, boost=BoostConfig(num_iterations=0), distributional=False)
    m = train_forecaster(hist, cfg)
    fc = m.predict_horizon(ds.temperatures, len(fut), ds.exogenous)
    w = m.weights_ > 0
    assert np.allclose(fc.point.values, np.mean(hist.load.values[w]))


def test_year_horizon_gives_8760_values_and_365_peaks(small_synth):
    ds, _ = small_synth
    hist, fut = year_split(ds, 2005)
    m = train_forecaster(hist, cheap())
    fc = m.predict_horizon(ds.temperatures, len(fut), ds.exogenous)
    assert len(fc.point.values) == 8760 and len(fc.peaks) == 365
    assert np.all(fc.dist.stddev > 0)
    assert fc.point.index.equals(fut.index)


def test_transform_roundtrip_identity(small_synth):
    ds, _ = small_synth
    m = train_forecaster(ds, cheap())
    t = m._t(ds.index)
    y = np.asarray(ds.load.values)
    np.testing.assert_allclose(m._inverse(m._forward(y, t), t), y, rtol=1e-9)
    assert m.trend_ is not None


def test_insufficient_warmup_names_required_history(small_synth):
    ds, _ = small_synth
    cfg = cheap(features={**BASELINE, "lags": 24})
    hist, fut = year_split(ds, 2005)
    m = train_forecaster(hist, cfg)
    short = [t.slice(fut.index) for t in ds.temperatures]
    with pytest.raises(ValueError, match="at least 24 steps"):
        m.predict_horizon(short, len(fut), [e.slice(fut.index) for e in ds.exogenous])


def test_test_targets_never_touch_training_artifacts(small_synth):
    ds, _ = small_synth
    fold = ts_cv_folds(ds.index, 1, "Y")[0]
    cfg = cheap(sigma_calibration=0.2)
    a = LoadForecaster(cfg).fit(ds.slice(fold.train_index))
    y = np.asarray(ds.load.values).copy()
    y[len(fold.train_index):] *= 3.0
    mutated = Dataset(ds.load.with_values(y), ds.temperatures, ds.holidays, ds.exogenous)
    b = LoadForecaster(cfg).fit(mutated.slice(fold.train_index))
    assert a.fingerprint() == b.fingerprint()


def test_peaks_invariant_under_exp_and_small_trend(rng):
    z = rng.normal(0, 1, 24 * 20)
    idx = pd.date_range("2007-01-01", periods=z.size, freq="h")
    p = extract_daily_peaks(PointForecast(idx, z))
    q = extract_daily_peaks(PointForecast(idx, np.exp(z)))
    assert [a.peak_hour for a in p] == [b.peak_hour for b in q]
    tm = TrendModel(0.0, 1e-4)
    r = extract_daily_peaks(PointForecast(idx, retrend(z, tm, np.arange(1, z.size + 1))))
    days = z.reshape(-1, 24)
    top2 = np.sort(days, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    for a, b, m in zip(p, r, margin):
        if m > 24 * tm.beta1:
            assert a.peak_hour == b.peak_hour


def test_save_load_roundtrip(tmp_path, small_synth):
    ds, _ = small_synth
    hist, fut = year_split(ds, 2005)
    m = train_forecaster(hist, cheap(sigma_calibration=0.25))
    m.save(tmp_path / "p.json")
    m2 = LoadForecaster.load(tmp_path / "p.json")
    a = m.predict_horizon(ds.temperatures, 24 * 7, ds.exogenous)
    b = m2.predict_horizon(ds.temperatures, 24 * 7, ds.exogenous)
    np.testing.assert_array_equal(a.dist.mean, b.dist.mean)
    np.testing.assert_array_equal(a.dist.stddev, b.dist.stddev)
    assert m.sigma_scale_ > 0


def test_selection_inside_pipeline(small_synth):
    ds, _ = small_synth
    cfg = cheap(features={**BASELINE, "lags": 2}, selection=SelectionConfig(enabled=True, n_repeats=5, cv=2))
    m = train_forecaster(ds, cfg)
    assert set(m.builder_.baseline_columns(ds.temperatures + ds.exogenous)) <= set(m.feature_names_)
    assert m.artifacts()["selected_clusters"] is not None


def test_hierarchy_forecaster_is_coherent(small_synth):
    ds, _ = small_synth
    hist, fut = year_split(ds, 2005)
    cfg = cheap(scales=(1, 4, 12))
    m = TemporalHierarchyForecaster(cfg).fit(hist)
    out = m.predict_horizon(ds.temperatures, 24 * 14, ds.exogenous)
    assert set(out.base) == {1, 4, 12}
    assert len(out.reconciled.mean) == 24 * 14 and len(out.peaks) == 14
    assert coherence_error(np.array([r.mean for r in out.results]), out.structure) <= 1e-9
