"""CSV ingestion and emission, the synthetic data generator and config files.

CSV layout: a ``timestamp`` column (ISO 8601, hourly, start of the hour),
the target load column, one column per temperature station and optional
exogenous columns prefixed ``exo_``. Holidays live in a companion CSV with a
single ``date`` column.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import yaml

from .core import Dataset, DistForecast, HourlySeries, PeakForecast, TimePoint
from .metrics import gaussian_interval

TIMESTAMP = "timestamp"
EXOGENOUS_PREFIX = "exo_"
TS_FORMAT = "%Y-%m-%dT%H:%M:%S"
FLOAT_FORMAT = "%.17g"


class IngestError(ValueError):
    """Malformed input file; ``row`` is the 1-based line number (header = 1)."""

    def __init__(self, message: str, row: int | None = None, path=None):
        where = f"{path}: " if path else ""
        where += f"row {row}: " if row is not None else ""
        super().__init__(where + message)
        self.row = row


# ---------------------------------------------------------------------- ingest


def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise IngestError("file not found", path=path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if df.columns.empty:
        raise IngestError("missing header row", path=path)
    return df


def _parse_timestamps(col: pd.Series, path) -> pd.DatetimeIndex:
    ts = pd.to_datetime(col, errors="coerce", format="ISO8601")
    bad = np.nonzero(ts.isna().to_numpy())[0]
    if bad.size:
        raise IngestError(f"unparseable timestamp {col.iloc[bad[0]]!r}", bad[0] + 2, path)
    idx = pd.DatetimeIndex(ts)
    if idx.tz is not None:
        idx = idx.tz_convert("UTC").tz_localize(None)
    step = np.diff(idx.asi8)
    hour = 3_600_000_000_000
    for i in np.nonzero(step != hour)[0]:
        kind = ("duplicate" if step[i] == 0 else "out-of-order" if step[i] < 0 else "gap before")
        raise IngestError(f"{kind} timestamp {idx[i + 1]}", int(i) + 3, path)
    return idx


def to_float(text: pd.Series) -> np.ndarray:
    """Correctly rounded parse; unparseable cells become NaN.

    ``pd.to_numeric`` can be off by an ulp, which breaks exact round trips.
    """
    vals = pd.to_numeric(text, errors="coerce").to_numpy(dtype=float)
    ok = ~np.isnan(vals)
    vals[ok] = text[ok].astype(float).to_numpy()
    return vals


def _parse_numeric(df: pd.DataFrame, name: str, path) -> np.ndarray:
    text = df[name].str.strip()
    vals = to_float(text)
    bad = np.nonzero(np.isnan(vals))[0]
    if bad.size:
        cell = text.iloc[bad[0]]
        what = "missing value" if cell == "" else f"non-numeric value {cell!r}"
        raise IngestError(f"{what} in column {name!r}", int(bad[0]) + 2, path)
    return vals


def read_holidays(path) -> frozenset:
    df = _read_table(path)
    if "date" not in df.columns:
        raise IngestError("holiday file needs a 'date' column", path=path)
    out = set()
    for i, v in enumerate(df["date"]):
        try:
            out.add(pd.Timestamp(v).date())
        except ValueError:
            raise IngestError(f"bad date {v!r}", i + 2, path) from None
    return frozenset(out)


def ingest_csv(path, target: str = "load", temperature_columns: Sequence[str] | None = None,
               holidays_path=None, exogenous_columns: Sequence[str] | None = None,
               require_target: bool = True) -> Dataset:
    """Read a dataset file.

    Temperature columns default to every column other than the timestamp, the
    target and the exogenous columns (those prefixed ``exo_`` unless given).
    ``holidays_path`` defaults to a ``holidays.csv`` next to the file, if any.
    With ``require_target=False`` a file without the target column yields a
    dataset whose load is all NaN (future temperatures only).
    """
    df = _read_table(path)
    cols = list(df.columns)
    if TIMESTAMP not in cols:
        raise IngestError(f"missing column {TIMESTAMP!r}", 1, path)
    has_target = target in cols
    if require_target and not has_target:
        raise IngestError(f"missing load column {target!r}", 1, path)
    if len(df) == 0:
        raise IngestError("no data rows", path=path)
    if exogenous_columns is None:
        exogenous_columns = [c for c in cols if c.startswith(EXOGENOUS_PREFIX)]
    if temperature_columns is None:
        temperature_columns = [c for c in cols if c not in (TIMESTAMP, target, *exogenous_columns)]
    for c in (*temperature_columns, *exogenous_columns):
        if c not in cols:
            raise IngestError(f"missing column {c!r}", 1, path)
    if not temperature_columns:
        raise IngestError("no temperature columns", 1, path)

    idx = _parse_timestamps(df[TIMESTAMP], path)
    start = TimePoint.from_timestamp(idx[0])
    series = lambda c: HourlySeries(start, _parse_numeric(df, c, path), c)
    load = series(target) if has_target else HourlySeries(start, np.full(len(df), np.nan), target)
    if holidays_path is None:
        companion = Path(path).with_name("holidays.csv")
        holidays = read_holidays(companion) if companion.is_file() else frozenset()
    else:
        holidays = read_holidays(holidays_path)
    return Dataset(load, tuple(series(c) for c in temperature_columns), holidays,
                   tuple(series(c) for c in exogenous_columns))


def _write_frame(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, date_format=TS_FORMAT,
              quoting=csv.QUOTE_MINIMAL, lineterminator="\n")


def write_dataset_csv(ds: Dataset, path, holidays_path=None, include_load: bool = True) -> None:
    cols = {TIMESTAMP: ds.index}
    if include_load:
        cols[ds.load.name] = ds.load.values
    for s in (*ds.temperatures, *ds.exogenous):
        cols[s.name] = s.values
    _write_frame(pd.DataFrame(cols), path)
    if holidays_path is not None:
        write_holidays(ds.holidays, holidays_path)


def write_holidays(holidays, path) -> None:
    _write_frame(pd.DataFrame({"date": sorted(str(d) for d in holidays)}), path)


def concat_series(a: HourlySeries, b: HourlySeries) -> HourlySeries:
    """Join two contiguous series of the same step."""
    if a.freq_hours != b.freq_hours:
        raise ValueError("cannot join series of different steps")
    expected = a.index[-1] + pd.Timedelta(hours=a.freq_hours)
    if b.index[0] != expected:
        raise ValueError(f"series {b.name!r} starts at {b.index[0]}, expected {expected}")
    return HourlySeries(a.start, np.concatenate([a.values, b.values]), a.name, a.freq_hours)


# ------------------------------------------------------------- forecast files


def write_forecast_csv(dist: DistForecast, path, coverage: float = 0.9) -> None:
    lo, hi = gaussian_interval(dist, coverage)
    _write_frame(pd.DataFrame({TIMESTAMP: dist.index, "mean": dist.mean, "stddev": dist.stddev,
                               "lo90": lo, "hi90": hi}), path)


def read_forecast_csv(path) -> DistForecast:
    df = _read_table(path)
    for c in (TIMESTAMP, "mean", "stddev"):
        if c not in df.columns:
            raise IngestError(f"missing column {c!r}", 1, path)
    idx = pd.DatetimeIndex(pd.to_datetime(df[TIMESTAMP], format="ISO8601"))
    step = np.diff(idx.asi8)
    if len(step) and np.any(step != step[0]):
        raise IngestError("forecast timestamps are not evenly spaced", path=path)
    return DistForecast(idx, _parse_numeric(df, "mean", path), _parse_numeric(df, "stddev", path))


def write_peaks_csv(peaks: Sequence[PeakForecast], path) -> None:
    _write_frame(pd.DataFrame({"date": [str(p.date) for p in peaks],
                               "peak_value": [p.peak_value for p in peaks],
                               "peak_hour": [p.peak_hour for p in peaks]}), path)


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    years: int = 5
    start_year: int = 2002
    rng_seed: int = 0
    base_load: float = 1000.0
    trend_slope: float = 0.002          # MW per hourly step
    daily_amplitude: float = 150.0
    weekly_amplitude: float = 60.0      # weekend reduction
    annual_amplitude: float = 50.0
    comfort_temp: float = 60.0          # deg F
    heating_sensitivity: float = 6.0    # MW per deg F below comfort
    cooling_sensitivity: float = 12.0   # MW per deg F above comfort
    temp_lag_hours: int = 3
    noise_std: float = 15.0
    n_stations: int = 4
    n_noise_features: int = 2
    temp_mean: float = 55.0
    temp_annual_amplitude: float = 22.0
    temp_daily_amplitude: float = 8.0
    temp_ar: float = 0.95
    temp_noise_std: float = 1.0
    holiday_effect: float = 80.0

    def __post_init__(self):
        if self.years < 1:
            raise ValueError("years must be >= 1")
        amps = ("daily_amplitude", "weekly_amplitude", "annual_amplitude", "temp_annual_amplitude",
                "temp_daily_amplitude", "noise_std", "temp_noise_std")
        for a in amps:
            if getattr(self, a) < 0:
                raise ValueError(f"{a} must be >= 0")
        if self.n_stations < 1 or self.n_noise_features < 0 or self.temp_lag_hours < 0:
            raise ValueError("need >= 1 station, >= 0 noise features and a non-negative lag")
        if not -1 < self.temp_ar < 1:
            raise ValueError("temp_ar must lie in (-1, 1)")


def synthetic_holidays(years: Sequence[int]) -> frozenset:
    """New Year, Independence Day and Christmas."""
    return frozenset(pd.Timestamp(y, m, d).date() for y in years for m, d in ((1, 1), (7, 4), (12, 25)))


def _ar1(rng, n: int, phi: float, sd: float) -> np.ndarray:
    eps = rng.normal(0.0, sd, n)
    out = np.empty(n)
    out[0] = eps[0] / math.sqrt(1 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + eps[t]
    return out


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> tuple[Dataset, dict]:
    """Hourly load and temperatures from a known generating process.

    Returns the dataset and a ground-truth record with the generator settings and the
    noiseless load components.
    """
    rng = np.random.default_rng(spec.rng_seed)
    idx = pd.date_range(f"{spec.start_year}-01-01", f"{spec.start_year + spec.years}-01-01",
                        freq="h", inclusive="left")
    n = len(idx)
    t = np.arange(1, n + 1, dtype=float)
    doy = idx.dayofyear.to_numpy() - 1 + idx.hour.to_numpy() / 24.0
    hour = idx.hour.to_numpy()

    base_temp = (spec.temp_mean
                 - spec.temp_annual_amplitude * np.cos(2 * np.pi * (doy - 15) / 365.25)
                 - spec.temp_daily_amplitude * np.cos(2 * np.pi * (hour - 3) / 24))
    temps = []
    for s in range(spec.n_stations):
        offset = rng.normal(0.0, 2.0)
        temps.append(base_temp + offset + _ar1(rng, n, spec.temp_ar, spec.temp_noise_std))
    mean_temp = np.mean(temps, axis=0)
    lagged = np.concatenate([np.repeat(mean_temp[0], spec.temp_lag_hours), mean_temp])[:n]

    holidays = synthetic_holidays(range(spec.start_year, spec.start_year + spec.years))
    is_holiday = np.isin(idx.normalize().date, list(holidays))
    weekend = idx.dayofweek.to_numpy() >= 5
    # daily profile: night trough, evening peak
    daily = spec.daily_amplitude * (0.6 * np.sin(2 * np.pi * (hour - 9) / 24)
                                    + 0.4 * np.sin(4 * np.pi * (hour - 6) / 24))
    components = {
        "trend": spec.base_load + spec.trend_slope * t,
        "daily": daily,
        "weekly": -spec.weekly_amplitude * weekend - spec.holiday_effect * is_holiday,
        "annual": spec.annual_amplitude * np.cos(2 * np.pi * doy / 365.25),
        "heating": spec.heating_sensitivity * np.maximum(spec.comfort_temp - lagged, 0.0),
        "cooling": spec.cooling_sensitivity * np.maximum(lagged - spec.comfort_temp, 0.0),
    }
    signal = sum(components.values())
    load = signal + rng.normal(0.0, spec.noise_std, n)
    noise = [rng.normal(0.0, 1.0, n) for _ in range(spec.n_noise_features)]

    start = TimePoint.from_timestamp(idx[0])
    ds = Dataset(HourlySeries(start, load, "load"),
                 tuple(HourlySeries(start, x, f"T{i + 1}") for i, x in enumerate(temps)),
                 holidays,
                 tuple(HourlySeries(start, x, f"{EXOGENOUS_PREFIX}noise{i + 1}") for i, x in enumerate(noise)))
    truth = {"settings": asdict(spec), "n_hours": n, "signal": signal, "components": components}
    return ds, truth


def split_last_year(ds: Dataset) -> tuple[Dataset, Dataset]:
    """History up to the final calendar year, and that year."""
    idx = ds.index
    last = idx.year == idx.year[-1]
    if last.all():
        raise ValueError("need more than one calendar year to split")
    return ds.slice(idx[~last]), ds.slice(idx[last])


def truth_json(truth: dict) -> str:
    return json.dumps({"settings": truth["settings"], "n_hours": truth["n_hours"]}, indent=2, sort_keys=True)


# --------------------------------------------------------------------- config


def load_config(path) -> dict[str, Any]:
    """Read a YAML config file into a plain dict (empty file -> {})."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data
