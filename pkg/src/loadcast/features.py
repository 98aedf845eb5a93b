"""Explanatory variables for load models: calendar labels, lagged and rolling
temperatures, and per-period aggregates including signal-processing shape
statistics of the temperature profile.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Dataset, FeatureMatrix, HourlySeries

ROLLING_STATS = ("mean", "max", "min", "median", "std")
ROLLING_WINDOWS = (3, 24, 168, 720)
BASIC_AGG_FUNCS = ("mean", "max", "min", "median")
SIGNAL_FUNCS = ("rms", "crest", "peak", "impulse", "margin", "shape", "peak_to_peak")
AGG_FUNCS = BASIC_AGG_FUNCS + SIGNAL_FUNCS
GROUP_KEYS = ("Year-Month-Day", "Month-Hour")

BASIC_CALENDAR = ("Year", "Month", "Week", "Day", "Weekday", "Hour")
EXTENDED_CALENDAR = ("Holiday", "HolidayName", "Weekend", "WeekOfMonth", "Season",
                     "DayOfYear", "DaysSinceLastHoliday", "DaysUntilNextHoliday")

# stand-in for "no holiday on record before/after this day"
NO_HOLIDAY_DAYS = 366


@dataclass(frozen=True)
class LagSpec:
    max_lag: int = 48

    def __post_init__(self):
        if self.max_lag < 1:
            raise ValueError("max_lag must be >= 1")


@dataclass(frozen=True)
class RollingSpec:
    stat: str
    window_hours: int

    def __post_init__(self):
        if self.stat not in ROLLING_STATS:
            raise ValueError(f"unknown rolling stat {self.stat!r}")
        if self.window_hours < 1:
            raise ValueError("rolling window must be >= 1")


@dataclass(frozen=True)
class AggSpec:
    func: str
    group_key: str
    centered: bool | None = None

    def __post_init__(self):
        if self.func not in AGG_FUNCS:
            raise ValueError(f"unknown aggregation function {self.func!r}")
        if self.group_key not in GROUP_KEYS:
            raise ValueError(f"unknown group key {self.group_key!r}")
        if self.centered is None:
            object.__setattr__(self, "centered", self.func in SIGNAL_FUNCS)
        if self.func in SIGNAL_FUNCS and not self.centered:
            raise ValueError(f"{self.func} is only defined on the centered signal")


def default_rolling_specs(windows=ROLLING_WINDOWS, stats=ROLLING_STATS) -> list[RollingSpec]:
    return [RollingSpec(s, w) for w in windows for s in stats]


def default_agg_specs(keys=GROUP_KEYS, funcs=AGG_FUNCS) -> list[AggSpec]:
    return [AggSpec(f, k) for k in keys for f in funcs]


def _season(month: np.ndarray) -> np.ndarray:
    # DJF=1, MAM=2, JJA=3, SON=4
    return (month % 12) // 3 + 1


def _days_to_holidays(days: np.ndarray, hol: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Days since the last and until the next holiday (0 on the holiday)."""
    if hol.size == 0:
        full = np.full(days.shape, NO_HOLIDAY_DAYS)
        return full, full.copy()
    pos = np.searchsorted(hol, days, side="right")
    prev = np.where(pos > 0, days - hol[np.maximum(pos - 1, 0)], NO_HOLIDAY_DAYS)
    pos = np.searchsorted(hol, days, side="left")
    nxt = np.where(pos < hol.size, hol[np.minimum(pos, hol.size - 1)] - days, NO_HOLIDAY_DAYS)
    return prev, nxt


def calendar_features(index: pd.DatetimeIndex, holidays=(), columns: Sequence[str] | None = None
                      ) -> FeatureMatrix:
    """Label-encoded calendar columns.

    ``holidays`` is a set of dates or a mapping date -> holiday name. Without
    names, holidays falling on the same month/day share a label.
    """
    index = pd.DatetimeIndex(index)
    if len(index) == 0:
        raise ValueError("empty index")
    if isinstance(holidays, Mapping):
        names = {pd.Timestamp(d).date(): str(n) for d, n in holidays.items()}
    else:
        names = {pd.Timestamp(d).date(): pd.Timestamp(d).strftime("%m-%d") for d in holidays}
    labels = {n: i + 1 for i, n in enumerate(sorted(set(names.values())))}

    dates = index.date
    iso = index.isocalendar()
    day_num = (index.normalize() - pd.Timestamp("1970-01-01")).days.to_numpy()
    hol_num = np.array(sorted((pd.Timestamp(d) - pd.Timestamp("1970-01-01")).days for d in names),
                       dtype=np.int64)
    since, until = _days_to_holidays(day_num, hol_num)
    is_hol = np.isin(day_num, hol_num)
    weekday = index.dayofweek.to_numpy() + 1  # Monday=1 .. Sunday=7

    cols = {
        "Year": index.year.to_numpy(),
        "Month": index.month.to_numpy(),
        "Week": iso["week"].to_numpy(dtype=int),
        "Day": index.day.to_numpy(),
        "Weekday": weekday,
        "Hour": index.hour.to_numpy() + 1,
        "Holiday": is_hol.astype(int),
        "HolidayName": np.array([labels[names[d]] if d in names else 0 for d in dates]),
        "Weekend": (weekday >= 6).astype(int),
        "WeekOfMonth": (index.day.to_numpy() - 1) // 7 + 1,
        "Season": _season(index.month.to_numpy()),
        "DayOfYear": index.dayofyear.to_numpy(),
        "DaysSinceLastHoliday": since,
        "DaysUntilNextHoliday": until,
    }
    wanted = list(columns) if columns is not None else list(cols)
    unknown = set(wanted) - set(cols)
    if unknown:
        raise KeyError(f"unknown calendar columns: {sorted(unknown)}")
    return FeatureMatrix(index, tuple(wanted), np.column_stack([cols[c] for c in wanted]).astype(float))


def _check_aligned(temps: Sequence[HourlySeries]) -> pd.DatetimeIndex:
    temps = list(temps)
    if not temps:
        raise ValueError("need at least one series")
    index = temps[0].index
    for t in temps[1:]:
        if not t.index.equals(index):
            raise ValueError(f"series {t.name!r} is not aligned")
    return index


def current_features(temps: Sequence[HourlySeries]) -> FeatureMatrix:
    """The series values at time t, one column per series."""
    index = _check_aligned(temps)
    return FeatureMatrix(index, tuple(t.name for t in temps),
                         np.column_stack([t.values for t in temps]))


def lag_features(temps: Sequence[HourlySeries], spec: LagSpec = LagSpec()) -> FeatureMatrix:
    """Columns ``<name>_lag<h>`` holding T(t-h) for h = 1..L."""
    index = _check_aligned(temps)
    n = len(index)
    if spec.max_lag >= n:
        raise ValueError(f"max lag {spec.max_lag} needs more than {n} observations")
    names, blocks = [], []
    for t in temps:
        out = np.full((n, spec.max_lag), np.nan)
        for h in range(1, spec.max_lag + 1):
            out[h:, h - 1] = t.values[:-h]
            names.append(f"{t.name}_lag{h}")
        blocks.append(out)
    return FeatureMatrix(index, tuple(names), np.hstack(blocks))


def rolling_features(temps: Sequence[HourlySeries], specs: Sequence[RollingSpec] | None = None
                     ) -> FeatureMatrix:
    """Statistics over the strictly-past window t-1 .. t-w."""
    specs = default_rolling_specs() if specs is None else list(specs)
    index = _check_aligned(temps)
    n = len(index)
    names, cols = [], []
    for t in temps:
        past = pd.Series(t.values).shift(1)
        for sp in specs:
            if sp.window_hours >= n:
                raise ValueError(f"window {sp.window_hours} needs more than {n} observations")
            roll = past.rolling(sp.window_hours, min_periods=sp.window_hours)
            if sp.stat == "std":
                col = roll.std(ddof=0)
            else:
                col = getattr(roll, sp.stat)()
            names.append(f"{t.name}_roll{sp.window_hours}_{sp.stat}")
            cols.append(col.to_numpy())
    return FeatureMatrix(index, tuple(names), np.column_stack(cols))


class SignalStats(NamedTuple):
    rms: float
    peak: float
    crest: float
    impulse: float
    margin: float
    shape: float
    peak_to_peak: float


def signal_stats(x) -> SignalStats:
    """Shape statistics of a signal; the four ratio factors are NaN for an
    all-zero input."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("signal_stats needs a non-empty input")
    a = np.abs(x)
    rms = float(np.sqrt(np.mean(x * x)))
    peak = float(a.max())
    mean_abs = float(a.mean())
    sqrt_sum = float(np.sum(np.sqrt(a)))
    pp = float(x.max() - x.min())
    if peak == 0.0:
        nan = float("nan")
        return SignalStats(rms, peak, nan, nan, nan, nan, pp)
    return SignalStats(rms, peak, peak / rms, peak / mean_abs, peak / sqrt_sum ** 2,
                       rms / mean_abs, pp)


def group_codes(index: pd.DatetimeIndex, key: str) -> np.ndarray:
    if key == "Year-Month-Day":
        return (index.year * 10_000 + index.month * 100 + index.day).to_numpy()
    if key == "Month-Hour":
        return (index.month * 100 + index.hour).to_numpy()
    raise ValueError(f"unknown group key {key!r}")


def _group_table(x: np.ndarray, codes: np.ndarray, funcs: set[str]) -> pd.DataFrame:
    """Per-group values of each requested function, one row per group code."""
    df = pd.DataFrame({"g": codes, "x": x})
    grp = df.groupby("g", sort=True)["x"]
    out = {}
    for f in funcs & set(BASIC_AGG_FUNCS):
        out[f] = getattr(grp, f)()
    if funcs & set(SIGNAL_FUNCS):
        c = x - df.groupby("g")["x"].transform("mean").to_numpy()
        a = np.abs(c)
        g2 = pd.DataFrame({"g": codes, "c2": c * c, "a": a, "sa": np.sqrt(a), "c": c}).groupby("g", sort=True)
        rms = np.sqrt(g2["c2"].mean())
        peak = g2["a"].max()
        mean_abs = g2["a"].mean()
        sqrt_sum = g2["sa"].sum()
        # centering leaves rounding noise in flat groups; snap it to exact zero
        scale = pd.Series(np.abs(x)).groupby(codes, sort=True).max().to_numpy()
        flat = peak.to_numpy() <= 1e-12 * np.maximum(scale, 1.0)
        rms[flat] = peak[flat] = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = {
                "crest": peak / rms,
                "impulse": peak / mean_abs,
                "margin": peak / sqrt_sum ** 2,
                "shape": rms / mean_abs,
            }
        # a flat group has no shape; 0 keeps the column dense
        ratios = {k: v.where(peak > 0, 0.0) for k, v in ratios.items()}
        p2p = g2["c"].max() - g2["c"].min()
        p2p[flat] = 0.0
        sig = {"rms": rms, "peak": peak, "peak_to_peak": p2p, **ratios}
        out.update({f: sig[f] for f in funcs & set(SIGNAL_FUNCS)})
    return pd.DataFrame(out)


def aggregated_features(temps: Sequence[HourlySeries], specs: Sequence[AggSpec] | None = None
                        ) -> FeatureMatrix:
    """Per-period aggregates broadcast back to every hour of the period, each
    followed by the difference ``actual - aggregate``."""
    specs = default_agg_specs() if specs is None else list(specs)
    index = _check_aligned(temps)
    names, cols = [], []
    for t in temps:
        x = np.asarray(t.values)
        for key in dict.fromkeys(s.group_key for s in specs):
            codes = group_codes(index, key)
            key_specs = [s for s in specs if s.group_key == key]
            table = _group_table(x, codes, {s.func for s in key_specs})
            pos = table.index.get_indexer(codes)
            for sp in key_specs:
                agg = table[sp.func].to_numpy()[pos]
                tag = f"{t.name}_{key.replace('-', '')}_{sp.func}"
                names += [tag, f"{tag}_diff"]
                cols += [agg, x - agg]
    return FeatureMatrix(index, tuple(names), np.column_stack(cols))


def assemble(blocks: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Column-wise concatenation; row weights multiply."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("no feature blocks to assemble")
    index = blocks[0].index
    names: list[str] = []
    for b in blocks:
        if not b.index.equals(index):
            raise ValueError("feature blocks have different time indices")
        names += b.column_names
    seen = set()
    dup = [n for n in names if n in seen or seen.add(n)]
    if dup:
        raise ValueError(f"duplicate feature name {dup[0]!r}")
    weights = np.prod([b.weights for b in blocks], axis=0)
    return FeatureMatrix(index, tuple(names), np.hstack([b.values for b in blocks]),
                         np.hstack([b.mask for b in blocks]), weights)


def _steps(hours: int, step_hours: int) -> int:
    return max(1, -(-int(hours) // step_hours))


class FeatureBuilder(TransformerMixin, BaseEstimator):
    """Builds the feature matrix of a dataset block by block.

    Lags and rolling windows are given in hours and converted to steps of the
    input series, so the same builder serves temporally aggregated data.
    Stateless apart from recording the produced column names in ``fit``.
    """

    def __init__(self, calendar="full", current=True, lags=48, rolling_windows=ROLLING_WINDOWS,
                 rolling_stats=ROLLING_STATS, agg_keys=GROUP_KEYS, agg_funcs=AGG_FUNCS):
        self.calendar = calendar
        self.current = current
        self.lags = lags
        self.rolling_windows = rolling_windows
        self.rolling_stats = rolling_stats
        self.agg_keys = agg_keys
        self.agg_funcs = agg_funcs

    @classmethod
    def baseline(cls) -> "FeatureBuilder":
        """Basic calendar labels plus current temperatures."""
        return cls(calendar="basic", lags=None, rolling_windows=None, agg_keys=None)

    def baseline_columns(self, temps: Sequence[HourlySeries]) -> list[str]:
        cal = list(BASIC_CALENDAR) if self.calendar else []
        return cal + ([t.name for t in temps] if self.current else [])

    def warmup(self, step_hours: int = 1) -> int:
        """Steps of history consumed before every column is defined."""
        spans = [self.lags or 0, *(self.rolling_windows or ())]
        return max(_steps(h, step_hours) if h else 0 for h in spans)

    def build(self, temperatures: Sequence[HourlySeries], holidays=(),
              exogenous: Sequence[HourlySeries] = ()) -> FeatureMatrix:
        temps = tuple(temperatures)
        index = _check_aligned(temps + tuple(exogenous))
        step = temps[0].freq_hours
        blocks = []
        if self.calendar:
            if self.calendar not in ("basic", "full"):
                raise ValueError(f"calendar must be 'basic', 'full' or None, got {self.calendar!r}")
            cols = BASIC_CALENDAR if self.calendar == "basic" else BASIC_CALENDAR + EXTENDED_CALENDAR
            blocks.append(calendar_features(index, holidays, cols))
        if self.current:
            blocks.append(current_features(temps + tuple(exogenous)))
        if self.lags:
            blocks.append(lag_features(temps, LagSpec(_steps(self.lags, step))))
        if self.rolling_windows:
            windows = sorted({_steps(w, step) for w in self.rolling_windows})
            blocks.append(rolling_features(temps, default_rolling_specs(windows, self.rolling_stats)))
        if self.agg_keys:
            blocks.append(aggregated_features(temps, default_agg_specs(self.agg_keys, self.agg_funcs)))
        return assemble(blocks)

    def fit(self, ds: Dataset, y=None):
        self.feature_names_out_ = self.transform(ds).column_names
        return self

    def transform(self, ds: Dataset) -> FeatureMatrix:
        return self.build(ds.temperatures, ds.holidays, ds.exogenous)

    def get_feature_names_out(self, input_features=None):
        return np.array(self.feature_names_out_, dtype=object)
