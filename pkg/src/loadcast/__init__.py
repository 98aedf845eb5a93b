"""Hourly electricity load and daily peak forecasting with boosted trees,
clustered permutation feature selection and temporal-hierarchy
reconciliation."""
from .core import (AlignmentError, Dataset, DistForecast, FeatureMatrix, HourlySeries, PeakForecast,
                   PointForecast, TimePoint, align, extract_daily_peaks)
from .features import FeatureBuilder, signal_stats
from .gbdt import BoostConfig, GaussianGBMRegressor, GBMRegressor, TreeEnsemble, fit_gbm, fit_gbm_lss
from .hierarchy import build_summing_matrix, reconcile, reconcile_horizon
from .metrics import ScoreReport, crps_gaussian, score_forecast
from .pipeline import LoadForecaster, PipelineConfig, TemporalHierarchyForecaster, train_forecaster
from .selection import ClusteredPermutationSelector, cpfi, pfi
from .io import SyntheticSpec, gen_synthetic, ingest_csv, write_dataset_csv

__version__ = "0.1.0"
