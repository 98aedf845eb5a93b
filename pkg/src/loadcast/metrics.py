"""Competition and probabilistic scores for hourly load and daily peaks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
SQRT_2PI = math.sqrt(2.0 * math.pi)


def _pair(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    if y.shape != f.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {f.shape}")
    if y.size == 0:
        raise ValueError("empty input")
    return y, f


def mape(actual, forecast) -> float:
    """Mean absolute percentage error, in percent."""
    y, f = _pair(actual, forecast)
    if np.any(y == 0):
        raise ValueError("MAPE is undefined for zero actual values")
    return float(np.mean(np.abs(y - f) / np.abs(y)) * 100.0)


def _peak_values(peaks) -> np.ndarray:
    return np.array([p.peak_value if hasattr(p, "peak_value") else p for p in peaks], dtype=float)


def _peak_hours(peaks) -> np.ndarray:
    hours = np.array([p.peak_hour if hasattr(p, "peak_hour") else p for p in peaks])
    if hours.size and (np.any(hours < 1) or np.any(hours > 24) or np.any(hours != np.round(hours))):
        raise ValueError("peak hours must be integers in [1, 24]")
    return hours.astype(int)


def magnitude(actual_peaks, forecast_peaks) -> float:
    """MAPE over daily peak values; accepts PeakForecast lists or plain values."""
    a = list(actual_peaks)
    f = list(forecast_peaks)
    if a and hasattr(a[0], "date") and hasattr(f[0], "date"):
        if [p.date for p in a] != [p.date for p in f]:
            raise ValueError("actual and forecast peaks cover different dates")
    return mape(_peak_values(a), _peak_values(f))


def timing_qual(actual_hours, forecast_hours) -> float:
    """Mean absolute error of the peak hour."""
    a, f = _pair(_peak_hours(actual_hours), _peak_hours(forecast_hours))
    return float(np.mean(np.abs(a - f)))


def timing_weight(delta) -> np.ndarray:
    """Cost of a peak-hour miss of ``delta`` hours: 0, |d|, 2|d| or 10."""
    d = np.abs(np.asarray(delta))
    return np.select([d == 0, d == 1, d <= 4], [0.0, d, 2.0 * d], 10.0)


def timing_final(actual_hours, forecast_hours) -> float:
    a, f = _pair(_peak_hours(actual_hours), _peak_hours(forecast_hours))
    return float(np.mean(timing_weight(a - f)))


def _days(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.size % 24:
            raise ValueError("shape needs whole days of 24 hourly values")
        x = x.reshape(-1, 24)
    return x


def shape(actual_days, forecast_days) -> float:
    """Peak-window profile error of max-normalised days.

    The window is the actual peak hour +-2 hours, clipped to the day.
    """
    y, f = _pair(_days(actual_days), _days(forecast_days))
    ymax = y.max(axis=1)
    fmax = f.max(axis=1)
    if np.any(ymax <= 0) or np.any(fmax <= 0):
        raise ValueError("shape needs positive daily maxima")
    yn = y / ymax[:, None]
    fn = f / fmax[:, None]
    peak = np.argmax(y, axis=1)
    hours = np.arange(y.shape[1])
    window = np.abs(hours[None, :] - peak[:, None]) <= 2
    return float(np.mean(np.sum(np.abs(yn - fn) * window, axis=1)))


def normal_cdf(z):
    return ndtr(z)


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) / SQRT_2PI


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) at observation y (elementwise)."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, y)))
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be strictly positive")
    z = (y - mu) / sigma
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * normal_pdf(z) - INV_SQRT_PI)
    return out if out.ndim else float(out)


def interval_score(lo, hi, y, alpha: float = 0.1):
    """Width plus 2/alpha-weighted excursions outside [lo, hi]."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    lo, hi, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lo, hi, y)))
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    out = (hi - lo) + (2.0 / alpha) * (lo - y) * (y < lo) + (2.0 / alpha) * (y - hi) * (y > hi)
    return out if out.ndim else float(out)


def coverage(lo, hi, ys) -> float:
    """Percentage of observations inside the closed interval."""
    lo, hi, ys = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lo, hi, ys)))
    return float(np.mean((ys >= lo) & (ys <= hi)) * 100.0)


def skill(m_origin: float, m_new: float) -> float:
    """Symmetric percentage improvement of ``m_new`` over ``m_origin``."""
    den = (m_origin + m_new) / 2.0
    if den == 0:
        raise ValueError("skill score undefined when both metrics sum to zero")
    return (m_origin - m_new) / den * 100.0


def gaussian_interval(dist, coverage: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Central interval ``mean -+ z * stddev`` of a DistForecast (or a
    ``(mean, stddev)`` pair)."""
    if isinstance(dist, tuple):
        mu, sd = (np.asarray(v, dtype=float) for v in dist)
    else:
        mu, sd = np.asarray(dist.mean), np.asarray(dist.stddev)
    z = ndtri(0.5 + coverage / 2.0)
    return mu - z * sd, mu + z * sd


@dataclass
class ScoreReport:
    mape_h: float
    magnitude: float
    timing_qual: float
    timing_final: float
    shape: float
    crps_mean: float | None = None
    interval_score_mean: float | None = None
    coverage_pct: float | None = None
    skill: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "skill"}
        row.update({f"skill_{k}": v for k, v in self.skill.items()})
        return row

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def score_forecast(actual, mean, stddev=None, alpha: float = 0.1, reference: "ScoreReport | None" = None
                   ) -> ScoreReport:
    """Full report for hourly actuals against a (possibly probabilistic)
    forecast covering whole days.

    A zero stddev is read as a point forecast: its CRPS degenerates to the
    absolute error and its interval to the point itself.
    """
    y, f = _pair(actual, mean)
    yd, fd = _days(y), _days(f)
    a_hours = np.argmax(yd, axis=1) + 1
    f_hours = np.argmax(fd, axis=1) + 1
    report = ScoreReport(
        mape_h=mape(y, f),
        magnitude=mape(yd.max(axis=1), fd.max(axis=1)),
        timing_qual=timing_qual(a_hours, f_hours),
        timing_final=timing_final(a_hours, f_hours),
        shape=shape(yd, fd),
    )
    if stddev is not None:
        sd = np.asarray(stddev, dtype=float)
        if np.any(sd < 0):
            raise ValueError("stddev must be non-negative")
        pos = sd > 0
        crps = np.abs(y - f)
        if pos.any():
            crps[pos] = crps_gaussian(f[pos], sd[pos], y[pos])
        lo, hi = gaussian_interval((f, sd), 1.0 - alpha)
        report.crps_mean = float(np.mean(crps))
        report.interval_score_mean = float(np.mean(interval_score(lo, hi, y, alpha)))
        report.coverage_pct = coverage(lo, hi, y)
    if reference is not None:
        ref, new = asdict(reference), asdict(report)
        for k, v in new.items():
            if k not in ("skill", "coverage_pct") and v is not None and ref.get(k) is not None and ref[k] + v != 0:
                report.skill[k] = skill(ref[k], v)
    return report
