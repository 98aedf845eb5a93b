"""Feature selection by permutation importance, alone or over clusters of
correlated features.

Clusters come from average-linkage agglomeration of ``1 - |rho|`` and are
shuffled jointly, with a single row permutation shared by all members, so
that correlated features cannot stand in for one another while their
importance is measured.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.feature_selection import SelectorMixin
from sklearn.model_selection import TimeSeriesSplit

from .core import FeatureMatrix

Scorer = Callable[[np.ndarray, np.ndarray], float]


def neg_mse(y_true, y_pred) -> float:
    r = np.asarray(y_true, dtype=float) - np.asarray(y_pred, dtype=float)
    return -float(np.mean(r * r))


def neg_mape(y_true, y_pred) -> float:
    y = np.asarray(y_true, dtype=float)
    return -float(np.mean(np.abs(y - np.asarray(y_pred, dtype=float)) / np.abs(y)) * 100.0)


SCORERS = {"neg_mse": neg_mse, "neg_mape": neg_mape}


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    rho: np.ndarray  # NaN where undefined (constant column)

    def distance(self, absolute: bool = True) -> np.ndarray:
        r = np.abs(self.rho) if absolute else self.rho
        d = 1.0 - np.nan_to_num(r, nan=0.0)
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 2.0)


@dataclass(frozen=True)
class FeatureCluster:
    id: int
    members: tuple[str, ...]


def _frame(X) -> pd.DataFrame:
    if isinstance(X, FeatureMatrix):
        return X.to_frame()
    if isinstance(X, pd.DataFrame):
        return X
    X = np.asarray(X, dtype=float)
    return pd.DataFrame(X, columns=[f"x{i}" for i in range(X.shape[1])])


def correlation_matrix(fm, method: str = "spearman") -> CorrelationMatrix:
    """Pairwise-complete correlations; Spearman uses average ranks for ties."""
    if method not in ("spearman", "pearson"):
        raise ValueError(f"unknown correlation method {method!r}")
    df = _frame(fm).astype(float)
    if len(df) < 2:
        raise ValueError("need at least two rows")
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = df.corr(method=method, min_periods=2).to_numpy(copy=True)
    const = (df.nunique(dropna=True) <= 1).to_numpy()
    rho[const, :] = np.nan
    rho[:, const] = np.nan
    np.fill_diagonal(rho, 1.0)
    rho = np.clip(rho, -1.0, 1.0)
    rho.setflags(write=False)
    return CorrelationMatrix(tuple(map(str, df.columns)), rho)


def cluster_linkage(cm: CorrelationMatrix, method: str = "average", absolute: bool = True) -> np.ndarray:
    d = cm.distance(absolute)
    return linkage(squareform(d, checks=False), method=method)


def cluster_features(cm: CorrelationMatrix, threshold: float = 0.1, method: str = "average",
                     absolute: bool = True) -> list[FeatureCluster]:
    """Flat clusters whose linkage distance stays within ``threshold``.

    Cluster ids are 1-based and follow the position of each cluster's first
    member in ``cm.names``.
    """
    if not 0 < threshold < 2:
        raise ValueError("threshold must be in (0, 2)")
    n = len(cm.names)
    if n == 1:
        return [FeatureCluster(1, cm.names)]
    labels = fcluster(cluster_linkage(cm, method, absolute), t=threshold, criterion="distance")
    first = {}
    for i, lab in enumerate(labels):
        first.setdefault(lab, i)
    ordered = sorted(first, key=first.get)
    return [FeatureCluster(cid, tuple(cm.names[i] for i in range(n) if labels[i] == lab))
            for cid, lab in enumerate(ordered, start=1)]


def dendrogram_edges(cm: CorrelationMatrix, method: str = "average", absolute: bool = True
                     ) -> pd.DataFrame:
    """Linkage as an edge list: merged node ids (leaves are 0..n-1), merge
    distance and size of the new node."""
    Z = cluster_linkage(cm, method, absolute)
    n = len(cm.names)
    label = list(cm.names) + [f"node{n + i}" for i in range(len(Z))]
    return pd.DataFrame({
        "node_id": np.arange(n, n + len(Z)),
        "left": [label[int(a)] for a in Z[:, 0]],
        "right": [label[int(b)] for b in Z[:, 1]],
        "distance": Z[:, 2],
        "n_members": Z[:, 3].astype(int),
    })


@dataclass
class ImportanceReport:
    """Score drops per group (rows) and repetition (columns)."""

    groups: list[FeatureCluster]
    drops: np.ndarray
    baseline_score: float = float("nan")

    @property
    def repetitions(self) -> int:
        return self.drops.shape[1]

    @property
    def mean_drop(self) -> np.ndarray:
        return self.drops.mean(axis=1)

    @property
    def std_drop(self) -> np.ndarray:
        if self.repetitions < 2:
            return np.zeros(len(self.groups))
        return self.drops.std(axis=1, ddof=1)

    @classmethod
    def combine(cls, reports: Sequence["ImportanceReport"]) -> "ImportanceReport":
        """Pool repetitions of the same groups, e.g. over CV folds."""
        first = reports[0]
        for r in reports[1:]:
            if [g.members for g in r.groups] != [g.members for g in first.groups]:
                raise ValueError("reports cover different groups")
        return cls(first.groups, np.hstack([r.drops for r in reports]),
                   float(np.mean([r.baseline_score for r in reports])))

    def to_frame(self) -> pd.DataFrame:
        kept = informative_clusters(self) if self.repetitions >= 2 else set()
        return pd.DataFrame({
            "cluster_id": [g.id for g in self.groups],
            "members": [";".join(g.members) for g in self.groups],
            "mean_drop": self.mean_drop,
            "std_drop": self.std_drop,
            "kept": [g.id in kept for g in self.groups],
        })

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", quoting=csv.QUOTE_MINIMAL)


def _permutation_rng(seed: int, rep: int, cols: Sequence[int]) -> np.random.Generator:
    # keyed by the group's columns so schedules match however groups are ordered
    return np.random.default_rng(np.random.SeedSequence([int(seed), rep, *sorted(cols)]))


def _group_importance(model, X, y, scorer: Scorer, groups: list[FeatureCluster],
                      n_repeats: int, rng_seed: int) -> ImportanceReport:
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    df = _frame(X)
    cols = list(map(str, df.columns))
    pos = {c: i for i, c in enumerate(cols)}
    seen: set[str] = set()
    for g in groups:
        unknown = [m for m in g.members if m not in pos]
        if unknown:
            raise KeyError(f"cluster {g.id} has unknown features {unknown}")
        if seen & set(g.members):
            raise ValueError(f"cluster {g.id} overlaps another cluster")
        seen |= set(g.members)
    y = np.asarray(y, dtype=float)
    src = df.to_numpy(dtype=float)
    work = src.copy()
    wrap = isinstance(X, (pd.DataFrame, FeatureMatrix))

    def score(arr):
        inp = pd.DataFrame(arr, index=df.index, columns=df.columns) if wrap else arr
        return scorer(y, model.predict(inp))

    base = score(work)
    drops = np.empty((len(groups), n_repeats))
    n = src.shape[0]
    for gi, g in enumerate(groups):
        idx = [pos[m] for m in g.members]
        for k in range(n_repeats):
            perm = _permutation_rng(rng_seed, k, idx).permutation(n)
            work[:, idx] = src[perm][:, idx]
            drops[gi, k] = base - score(work)
        work[:, idx] = src[:, idx]
    return ImportanceReport(list(groups), drops, base)


def pfi(model, X, y, scorer: Scorer = neg_mse, n_repeats: int = 100, rng_seed: int = 0
        ) -> ImportanceReport:
    """Permutation importance of every column: ``I_j = s - mean_k s_kj``."""
    names = list(map(str, _frame(X).columns))
    groups = [FeatureCluster(i + 1, (c,)) for i, c in enumerate(names)]
    return _group_importance(model, X, y, scorer, groups, n_repeats, rng_seed)


def cpfi(model, X, y, clusters: Sequence[FeatureCluster], scorer: Scorer = neg_mse,
         n_repeats: int = 100, rng_seed: int = 0) -> ImportanceReport:
    """Permutation importance of whole clusters, one shared permutation per
    cluster and repetition."""
    return _group_importance(model, X, y, scorer, list(clusters), n_repeats, rng_seed)


def informative_clusters(report: ImportanceReport, n_sigma: float = 3.0) -> set[int]:
    """Clusters whose mean drop exceeds ``n_sigma`` standard deviations above 0."""
    if report.repetitions < 2:
        raise ValueError("need at least two repetitions to estimate a spread")
    keep = report.mean_drop - n_sigma * report.std_drop > 0
    return {g.id for g, k in zip(report.groups, keep) if k}


class ClusteredPermutationSelector(SelectorMixin, BaseEstimator):
    """Keep the features of informative clusters.

    Each time-ordered CV split trains a clone of ``estimator`` on the earlier
    rows and measures cluster importance on the later ones; drops are pooled
    over splits before the ``mean - 3 std > 0`` rule is applied. Features
    listed in ``protected`` are always kept and never shuffled.
    """

    def __init__(self, estimator, threshold=0.1, method="spearman", n_repeats=100,
                 scorer="neg_mse", cv=3, protected=(), n_sigma=3.0, random_state=0):
        self.estimator = estimator
        self.threshold = threshold
        self.method = method
        self.n_repeats = n_repeats
        self.scorer = scorer
        self.cv = cv
        self.protected = protected
        self.n_sigma = n_sigma
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        df = _frame(X)
        if sample_weight is None and isinstance(X, FeatureMatrix):
            sample_weight = X.weights
        names = list(map(str, df.columns))
        candidates = [c for c in names if c not in set(self.protected)]
        scorer = SCORERS[self.scorer] if isinstance(self.scorer, str) else self.scorer
        y = np.asarray(y, dtype=float)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)

        complete = ~df.isna().any(axis=1).to_numpy()
        self.correlation_ = correlation_matrix(df.loc[complete, candidates], self.method)
        self.clusters_ = cluster_features(self.correlation_, self.threshold)
        cv = TimeSeriesSplit(n_splits=self.cv) if isinstance(self.cv, int) else self.cv
        reports = []
        for train, test in cv.split(df):
            test = test[complete[test] & (w[test] > 0)]
            model = clone(self.estimator).fit(df.iloc[train], y[train], sample_weight=w[train])
            reports.append(cpfi(model, df.iloc[test], y[test], self.clusters_, scorer,
                                self.n_repeats, self.random_state))
        self.report_ = ImportanceReport.combine(reports)
        self.informative_ = informative_clusters(self.report_, self.n_sigma)
        keep = set(self.protected)
        for g in self.clusters_:
            if g.id in self.informative_:
                keep |= set(g.members)
        self.feature_names_in_ = np.array(names, dtype=object)
        self.n_features_in_ = len(names)
        self.support_ = np.array([c in keep for c in names])
        return self

    def _get_support_mask(self):
        return self.support_

    def transform(self, X):
        if isinstance(X, FeatureMatrix):
            return X.select(self.selected_features)
        if isinstance(X, pd.DataFrame):
            return X[self.selected_features]
        return super().transform(X)

    @property
    def selected_features(self) -> list[str]:
        return [c for c, k in zip(self.feature_names_in_, self.support_) if k]
