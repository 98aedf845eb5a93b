"""Shared domain types: time points, hourly series, datasets, feature matrices
and forecast containers.

Timestamps are naive and mark the *start* of each hourly interval. The
competition hour index runs 1..24, so ``00:00`` is hour 1 and ``23:00`` is
hour 24. Internal arrays are 0-based; the +1 happens only at the
``TimePoint``/``PeakForecast`` boundary.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd


class AlignmentError(ValueError):
    """Raised when series cannot be put on a common time index."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, order=True)
class TimePoint:
    year: int
    month: int
    day: int
    hour: int  # 1..24

    def __post_init__(self):
        if not 1 <= self.hour <= 24:
            raise ValueError(f"hour must be in [1, 24], got {self.hour}")
        # raises on invalid Gregorian dates
        dt.date(self.year, self.month, self.day)

    @classmethod
    def from_timestamp(cls, ts) -> "TimePoint":
        ts = pd.Timestamp(ts)
        return cls(ts.year, ts.month, ts.day, ts.hour + 1)

    def to_timestamp(self) -> pd.Timestamp:
        return pd.Timestamp(self.year, self.month, self.day, self.hour - 1)


def hourly_index(start, periods: int, freq_hours: int = 1) -> pd.DatetimeIndex:
    if isinstance(start, TimePoint):
        start = start.to_timestamp()
    return pd.date_range(pd.Timestamp(start), periods=periods, freq=f"{freq_hours}h")


@dataclass(frozen=True)
class HourlySeries:
    """Evenly spaced series starting at ``start``.

    ``freq_hours`` is 1 for raw data; temporally aggregated series carry the
    block length (2, 4, ...) so their index stays meaningful.
    """

    start: TimePoint
    values: np.ndarray
    name: str = "value"
    freq_hours: int = 1

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1 or values.size == 0:
            raise ValueError(f"series {self.name!r} must be a non-empty 1-d sequence")
        if self.freq_hours < 1:
            raise ValueError("freq_hours must be >= 1")
        object.__setattr__(self, "values", values)
        if not isinstance(self.start, TimePoint):
            object.__setattr__(self, "start", TimePoint.from_timestamp(self.start))

    @classmethod
    def from_pandas(cls, s: pd.Series, name: str | None = None) -> "HourlySeries":
        idx = pd.DatetimeIndex(s.index)
        freq_hours = 1
        if len(idx) > 1:
            steps = np.diff(idx.asi8)
            if not np.all(steps == steps[0]):
                raise AlignmentError(f"series {name or s.name!r} is not evenly spaced")
            freq_hours = int(steps[0] // 3_600_000_000_000)
            if freq_hours < 1 or steps[0] % 3_600_000_000_000:
                raise AlignmentError("spacing must be a whole number of hours")
        return cls(TimePoint.from_timestamp(idx[0]), s.to_numpy(dtype=float),
                   name or str(s.name), freq_hours)

    def __len__(self) -> int:
        return self.values.size

    @property
    def index(self) -> pd.DatetimeIndex:
        return hourly_index(self.start, len(self), self.freq_hours)

    def to_pandas(self) -> pd.Series:
        return pd.Series(np.array(self.values), index=self.index, name=self.name)

    def slice(self, index: pd.DatetimeIndex) -> "HourlySeries":
        s = self.to_pandas()
        missing = index.difference(s.index)
        if len(missing):
            raise AlignmentError(f"series {self.name!r} does not cover {missing[0]}")
        return HourlySeries.from_pandas(s.loc[index], self.name)

    def with_values(self, values) -> "HourlySeries":
        return HourlySeries(self.start, values, self.name, self.freq_hours)


@dataclass(frozen=True)
class Dataset:
    load: HourlySeries
    temperatures: tuple[HourlySeries, ...]
    holidays: frozenset = frozenset()
    # non-temperature covariates passed through raw (e.g. synthetic noise drivers)
    exogenous: tuple[HourlySeries, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "temperatures", tuple(self.temperatures))
        object.__setattr__(self, "exogenous", tuple(self.exogenous))
        object.__setattr__(self, "holidays", frozenset(pd.Timestamp(d).date() for d in self.holidays))
        if not self.temperatures:
            raise ValueError("a dataset needs at least one temperature series")
        ref = self.load.index
        for s in (*self.temperatures, *self.exogenous):
            if not s.index.equals(ref):
                raise AlignmentError(f"series {s.name!r} is not aligned with the load")

    @property
    def index(self) -> pd.DatetimeIndex:
        return self.load.index

    def __len__(self) -> int:
        return len(self.load)

    def slice(self, index: pd.DatetimeIndex) -> "Dataset":
        return Dataset(
            self.load.slice(index),
            tuple(t.slice(index) for t in self.temperatures),
            self.holidays,
            tuple(e.slice(index) for e in self.exogenous),
        )


@dataclass(frozen=True)
class FeatureMatrix:
    """Named columns over a time index.

    Masked cells hold NaN in ``values``; ``mask`` is True where a cell is
    missing (warm-up prefix of lag and rolling blocks).
    """

    index: pd.DatetimeIndex
    column_names: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        n = len(self.index)
        names = tuple(self.column_names)
        if values.shape != (n, len(names)):
            raise ValueError(f"values shape {values.shape} does not match "
                             f"{n} rows x {len(names)} columns")
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names")
        mask = np.isnan(values) if self.mask is None else np.array(self.mask, dtype=bool)
        values[mask] = np.nan
        weights = np.ones(n) if self.weights is None else np.array(self.weights, dtype=float)
        if weights.shape != (n,) or np.any(weights < 0):
            raise ValueError("weights must be non-negative, one per row")
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask, bool))
        object.__setattr__(self, "weights", _frozen(weights))

    @classmethod
    def from_frame(cls, df: pd.DataFrame, weights=None) -> "FeatureMatrix":
        return cls(pd.DatetimeIndex(df.index), tuple(map(str, df.columns)),
                   df.to_numpy(dtype=float), weights=weights)

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def row_mask(self) -> np.ndarray:
        """True for rows with any missing cell."""
        return self.mask.any(axis=1)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(np.array(self.values), index=self.index, columns=list(self.column_names))

    def select(self, columns: Sequence[str]) -> "FeatureMatrix":
        pos = {c: i for i, c in enumerate(self.column_names)}
        missing = [c for c in columns if c not in pos]
        if missing:
            raise KeyError(f"unknown columns: {missing}")
        cols = [pos[c] for c in columns]
        return FeatureMatrix(self.index, tuple(columns), self.values[:, cols],
                             self.mask[:, cols], self.weights)

    def rows(self, sel) -> "FeatureMatrix":
        return FeatureMatrix(self.index[sel], self.column_names, self.values[sel],
                             self.mask[sel], self.weights[sel])

    def with_weights(self, weights) -> "FeatureMatrix":
        return FeatureMatrix(self.index, self.column_names, self.values, self.mask, weights)


@dataclass(frozen=True)
class PointForecast:
    index: pd.DatetimeIndex
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.shape != (len(self.index),):
            raise ValueError("forecast values must match the horizon length")

    @property
    def horizon_index(self) -> list[TimePoint]:
        return [TimePoint.from_timestamp(t) for t in self.index]

    def to_pandas(self) -> pd.Series:
        return pd.Series(np.array(self.values), index=self.index, name="mean")


@dataclass(frozen=True)
class DistForecast:
    index: pd.DatetimeIndex
    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "stddev", _frozen(self.stddev))
        n = len(self.index)
        if self.mean.shape != (n,) or self.stddev.shape != (n,):
            raise ValueError("mean/stddev must match the horizon length")
        if not np.all(self.stddev > 0):
            raise ValueError("stddev must be strictly positive")

    @property
    def horizon_index(self) -> list[TimePoint]:
        return [TimePoint.from_timestamp(t) for t in self.index]

    @property
    def point(self) -> PointForecast:
        return PointForecast(self.index, self.mean)


@dataclass(frozen=True)
class PeakForecast:
    date: dt.date
    peak_value: float
    peak_hour: int

    def __post_init__(self):
        if not 1 <= self.peak_hour <= 24:
            raise ValueError(f"peak_hour must be in [1, 24], got {self.peak_hour}")


def _check_whole_days(index: pd.DatetimeIndex) -> None:
    if len(index) == 0:
        raise ValueError("empty forecast")
    ts = pd.Series(index.normalize())
    counts = ts.value_counts(sort=False)
    bad = counts[counts != 24]
    if len(bad):
        raise ValueError(f"partial day in forecast: {bad.index[0].date()} has {bad.iloc[0]} hours")
    steps = np.diff(index.asi8)
    if len(steps) and not np.all(steps == 3_600_000_000_000):
        raise ValueError("forecast index is not contiguous hourly")
    if index[0].hour != 0:
        raise ValueError(f"partial day in forecast: {index[0].date()} does not start at hour 1")


def extract_daily_peaks(forecast: PointForecast) -> list[PeakForecast]:
    """One (max value, 1-based hour) per day; ties go to the earliest hour."""
    _check_whole_days(forecast.index)
    days = np.asarray(forecast.values).reshape(-1, 24)
    hours = np.argmax(days, axis=1)  # first occurrence on ties
    dates = forecast.index[::24].date
    return [PeakForecast(d, float(days[i, h]), int(h) + 1)
            for i, (d, h) in enumerate(zip(dates, hours))]


def align(series: Iterable[HourlySeries]) -> pd.DatetimeIndex:
    """Intersection of the series' time indices."""
    series = list(series)
    if not series:
        raise AlignmentError("nothing to align")
    common = series[0].index
    for s in series[1:]:
        common = common.intersection(s.index)
    if len(common) == 0:
        raise AlignmentError("series have no common time range")
    return common
