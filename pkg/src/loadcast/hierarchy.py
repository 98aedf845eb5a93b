"""Temporal hierarchies: block aggregation, the daily summing matrix and
Gaussian reconciliation of base forecasts across scales.

Reconciliation is the generalised-least-squares projection

    b = (S' W^-1 S)^-1 S' W^-1 y_hat,   y_tilde = S b,   V = S (S' W^-1 S)^-1 S'

with ``W`` the diagonal of base-forecast variances. Every default scale
divides 24, so days decouple and are reconciled one at a time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .core import DistForecast, HourlySeries

DEFAULT_SCALES = (1, 2, 4, 6, 12)


def aggregate_series(s: HourlySeries, k: int, day_length: int = 24) -> HourlySeries:
    """Non-overlapping k-step block sums, aligned to day boundaries."""
    if k < 1 or day_length % k:
        raise ValueError(f"scale {k} does not divide the day length {day_length}")
    if k == 1:
        return s
    if s.freq_hours != 1:
        raise ValueError("aggregate_series expects an hourly series")
    if s.start.hour != 1:
        raise ValueError(f"series {s.name!r} does not start at a day boundary")
    if len(s) % k:
        raise ValueError(f"series length {len(s)} is not a multiple of {k}")
    return HourlySeries(s.start, np.asarray(s.values).reshape(-1, k).sum(axis=1), s.name, k)


@dataclass(frozen=True)
class HierarchyStructure:
    scales: tuple[int, ...]
    summing_matrix: np.ndarray
    node_labels: tuple[str, ...]
    node_scale: np.ndarray      # scale of each row
    node_position: np.ndarray   # block number of each row within its scale

    @property
    def n_bottom(self) -> int:
        return self.summing_matrix.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.summing_matrix.shape[0]

    def rows_of(self, k: int) -> np.ndarray:
        return np.nonzero(self.node_scale == k)[0]


def build_summing_matrix(scales: Sequence[int] = DEFAULT_SCALES, day_length: int = 24
                         ) -> HierarchyStructure:
    """Stack one row per aggregate node (largest scale first) above the
    identity block of the bottom level."""
    scales = tuple(sorted({int(k) for k in scales} | {1}, reverse=True))
    for k in scales:
        if k < 1 or day_length % k:
            raise ValueError(f"scale {k} does not divide the day length {day_length}")
    rows, labels, node_scale, node_pos = [], [], [], []
    for k in scales:
        for b in range(day_length // k):
            r = np.zeros(day_length)
            r[b * k:(b + 1) * k] = 1.0
            rows.append(r)
            first, last = b * k + 1, (b + 1) * k
            labels.append(f"h{first}" if k == 1 else f"h{first}-{last}")
            node_scale.append(k)
            node_pos.append(b)
    S = np.array(rows)
    S.setflags(write=False)
    return HierarchyStructure(scales, S, tuple(labels), np.array(node_scale), np.array(node_pos))


@dataclass(frozen=True)
class BaseForecasts:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        v = np.asarray(self.variance, dtype=float)
        if m.shape != v.shape or m.ndim != 1:
            raise ValueError("mean and variance must be 1-d and of equal length")
        if not np.all(v > 0):
            raise ValueError("base variances must be positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", v)


@dataclass(frozen=True)
class ReconciledForecasts:
    mean: np.ndarray
    variance: np.ndarray
    bottom_mean: np.ndarray
    bottom_cov: np.ndarray


def reconcile(base: BaseForecasts, hs: HierarchyStructure) -> ReconciledForecasts:
    S = hs.summing_matrix
    if base.mean.size != S.shape[0]:
        raise ValueError(f"expected {S.shape[0]} base forecasts, got {base.mean.size}")
    winv = 1.0 / base.variance
    A = S.T @ (S * winv[:, None])
    try:
        cf = cho_factor(A, lower=True)
    except LinAlgError as exc:
        raise LinAlgError("S' W^-1 S is not positive definite") from exc
    b = cho_solve(cf, S.T @ (winv * base.mean))
    cov_b = cho_solve(cf, np.eye(S.shape[1]))
    cov_b = 0.5 * (cov_b + cov_b.T)
    mean = S @ b
    var = np.einsum("ij,jk,ik->i", S, cov_b, S)
    return ReconciledForecasts(mean, var, b, cov_b)


def _day_blocks(dist: DistForecast, k: int, day_length: int) -> tuple[pd.DatetimeIndex, np.ndarray, np.ndarray]:
    per_day = day_length // k
    n = len(dist.index)
    if n % per_day:
        raise ValueError(f"scale {k} forecast does not cover whole days")
    if dist.index[0].hour != 0:
        raise ValueError(f"scale {k} forecast does not start at a day boundary")
    days = dist.index[::per_day].normalize()
    return days, np.asarray(dist.mean).reshape(-1, per_day), np.asarray(dist.stddev).reshape(-1, per_day)


def stack_base(per_scale: Mapping[int, DistForecast], hs: HierarchyStructure, day_length: int = 24):
    """Per-day node means and variances ordered like the rows of S."""
    missing = set(hs.scales) - set(per_scale)
    if missing:
        raise ValueError(f"no base forecast for scales {sorted(missing)}")
    days = None
    blocks = {}
    for k in hs.scales:
        d, m, s = _day_blocks(per_scale[k], k, day_length)
        if days is None:
            days = d
        elif not d.equals(days):
            raise ValueError(f"scale {k} covers different days than the other scales")
        blocks[k] = (m, s)
    means = np.hstack([blocks[k][0] for k in hs.scales])
    sds = np.hstack([blocks[k][1] for k in hs.scales])
    return days, means, sds ** 2


def reconcile_horizon(per_scale: Mapping[int, DistForecast], hs: HierarchyStructure,
                      day_length: int = 24) -> tuple[DistForecast, list[ReconciledForecasts]]:
    """Reconcile each day independently; returns the bottom-level forecast and
    the per-day node results."""
    days, means, variances = stack_base(per_scale, hs, day_length)
    results = [reconcile(BaseForecasts(m, v), hs) for m, v in zip(means, variances)]
    bottom = hs.rows_of(1)
    mean = np.concatenate([r.mean[bottom] for r in results])
    sd = np.sqrt(np.concatenate([r.variance[bottom] for r in results]))
    return DistForecast(per_scale[1].index, mean, sd), results


def reconciliation_report(per_scale: Mapping[int, DistForecast], hs: HierarchyStructure,
                          results: Sequence[ReconciledForecasts], day_length: int = 24) -> pd.DataFrame:
    """One row per (day, node): base and reconciled mean/variance."""
    days, means, variances = stack_base(per_scale, hs, day_length)
    frames = []
    for day, m, v, r in zip(days, means, variances, results):
        start = day + pd.to_timedelta(hs.node_position * hs.node_scale, unit="h")
        frames.append(pd.DataFrame({
            "timestamp": start,
            "node": hs.node_labels,
            "scale": hs.node_scale,
            "base_mean": m,
            "base_var": v,
            "reconciled_mean": r.mean,
            "reconciled_var": r.variance,
        }))
    return pd.concat(frames, ignore_index=True)


def coherence_error(values: np.ndarray, hs: HierarchyStructure) -> float:
    """Largest relative gap between node values and sums of their bottom hours."""
    values = np.asarray(values, dtype=float)
    bottom = values[..., hs.rows_of(1)]
    implied = bottom @ hs.summing_matrix.T
    scale = max(1.0, float(np.max(np.abs(values))))
    return float(np.max(np.abs(values - implied)) / scale)
