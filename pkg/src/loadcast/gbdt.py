"""Gradient-boosted regression trees written from scratch.

Two objectives share one booster:

* ``"l2"`` – weighted squared error, one tree per iteration;
* ``"gaussian"`` – Gaussian negative log-likelihood over (mu, s = log sigma),
  one tree per parameter per iteration (location/scale boosting).

Trees are grown best-first with exact greedy split search on presorted
columns and Newton leaf values. DART dropout is available for both
objectives; dropped iterations share one scale factor across parameters.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import FeatureMatrix

FORMAT_NAME = "loadcast-tree-ensemble"
FORMAT_VERSION = 1
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class SchemaError(ValueError):
    """Prediction input does not carry the training columns."""


@dataclass
class BoostConfig:
    num_iterations: int = 100
    learning_rate: float = 0.05
    max_leaves: int = 31
    min_samples_leaf: int = 20
    lambda_l2: float = 0.0
    min_child_weight: float = 1e-3
    max_depth: int | None = None
    dart: bool = False
    drop_rate: float = 0.1
    dart_fallback: bool = True  # drop one random tree when the sampled drop set is empty
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_iterations < 0:
            raise ValueError("num_iterations must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be >= 0")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")


# --------------------------------------------------------------------------- trees


@dataclass
class Tree:
    """Array-encoded binary tree. ``feature == -1`` marks a leaf.

    Rows go left when ``x <= threshold`` or ``x`` is NaN.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.intp)
        for _ in range(self.depth):
            f = self.feature[node]
            inner = np.nonzero(f >= 0)[0]
            if inner.size == 0:
                break
            nd = node[inner]
            x = X[inner, f[inner]]
            go_left = ~(x > self.threshold[nd])  # NaN goes left
            node[inner] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.intp), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.intp), np.array(d["right"], dtype=np.intp),
                   np.array(d["value"], dtype=float), int(d["depth"]))


@njit(cache=True)
def _best_split(order, xs, gh, s, e, msl, mcw, lam):
    """Scan every feature of the node segment ``[s, e)``.

    ``order[f]``/``xs[f]`` hold row ids and values sorted along feature f.
    Returns (gain, feature, last_left_offset, G, H); feature is -1 when no
    split is admissible. Strict ``>`` keeps the first (lowest feature, lowest
    threshold) candidate among equal gains.
    """
    d = order.shape[0]
    m = e - s
    G = 0.0
    H = 0.0
    for k in range(s, e):
        r = order[0, k]
        G += gh[r, 0]
        H += gh[r, 1]
    parent = G * G / (H + lam) if H + lam > 0 else 0.0
    best_gain = 0.0
    best_f = -1
    best_k = -1
    if m < 2 * msl:
        return best_gain, best_f, best_k, G, H
    for f in range(d):
        gl = 0.0
        hl = 0.0
        of = order[f]
        xf = xs[f]
        for k in range(s, e - msl):
            r = of[k]
            gl += gh[r, 0]
            hl += gh[r, 1]
            if k - s + 1 < msl or not xf[k] < xf[k + 1]:
                continue
            hr = H - hl
            if hl < mcw or hr < mcw or hl + lam <= 0 or hr + lam <= 0:
                continue
            gr = G - gl
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_k = k - s
    return best_gain, best_f, best_k, G, H


@njit(cache=True)
def _partition(order, xs, s, e, f, nl, buf, xbuf, in_left):
    """Stable in-place split of segment [s, e) of every feature row: the
    first ``nl`` rows along feature ``f`` move left."""
    for k in range(s, s + nl):
        in_left[order[f, k]] = True
    d = order.shape[0]
    for j in range(d):
        if j == f:
            continue
        a = s
        b = 0
        for k in range(s, e):
            r = order[j, k]
            if in_left[r]:
                order[j, a] = r
                xs[j, a] = xs[j, k]
                a += 1
            else:
                buf[b] = r
                xbuf[b] = xs[j, k]
                b += 1
        for k in range(b):
            order[j, a + k] = buf[k]
            xs[j, a + k] = xbuf[k]
    for k in range(s, s + nl):
        in_left[order[f, k]] = False


class Presorted:
    """Row filter and per-feature sort order, reusable across boosting rounds."""

    def __init__(self, X: np.ndarray, weights: np.ndarray):
        self.keep = np.nonzero((weights > 0) & ~np.isnan(X).any(axis=1))[0]
        self.X = np.ascontiguousarray(X[self.keep])
        self.order = np.ascontiguousarray(np.argsort(self.X, axis=0, kind="stable").T, dtype=np.int64)
        self.xs = np.ascontiguousarray(np.take_along_axis(self.X.T, self.order, axis=1))


def _leaf_value(G: float, H: float, lam: float) -> float:
    den = H + lam
    return -G / den if den > 0 else 0.0


def fit_tree(X, gradients, hessians, weights=None, cfg: BoostConfig | None = None,
             presorted: Presorted | None = None) -> Tree:
    """Fit one regression tree to first/second order statistics.

    Rows with zero weight or any NaN feature take no part in the fit.
    Splits maximise ``G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)``; candidate
    thresholds are midpoints of consecutive distinct values and ties go to the
    lowest feature id, then the lowest threshold. Growth is best-first up to
    ``max_leaves``.
    """
    cfg = cfg or BoostConfig()
    X = np.asarray(X, dtype=float)
    g = np.asarray(gradients, dtype=float)
    h = np.asarray(hessians, dtype=float)
    w = np.ones_like(g) if weights is None else np.asarray(weights, dtype=float)
    if not (X.shape[0] == g.size == h.size == w.size):
        raise ValueError("features, gradients, hessians and weights must have the same length")
    pre = presorted if presorted is not None else Presorted(X, w)
    if pre.keep.size == 0 or w[pre.keep].sum() <= 0:
        raise ValueError("sum of weights must be positive")
    gh = np.ascontiguousarray(np.column_stack([g * w, h * w])[pre.keep])
    Xk = pre.X
    order = pre.order.copy()
    xs = pre.xs.copy()
    n = Xk.shape[0]
    lam = float(cfg.lambda_l2)
    msl = int(cfg.min_samples_leaf)
    mcw = float(cfg.min_child_weight)
    buf = np.empty(n, dtype=np.int64)
    xbuf = np.empty(n)
    in_left = np.zeros(n, dtype=np.bool_)

    # node -> (segment start, end, depth); flat arrays, node 0 is the root
    seg = [(0, n, 0)]
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    heap: list = []

    def push(nid: int):
        s, e, depth = seg[nid]
        gain, f, k, G, H = _best_split(order, xs, gh, s, e, msl, mcw, lam)
        value[nid] = _leaf_value(G, H, lam)
        if f >= 0 and (cfg.max_depth is None or depth < cfg.max_depth):
            heapq.heappush(heap, (-gain, nid, f, k))

    push(0)
    n_leaves = 1
    while heap and n_leaves < cfg.max_leaves:
        _, nid, f, k = heapq.heappop(heap)
        s, e, depth = seg[nid]
        lo = xs[f, s + k]
        hi = xs[f, s + k + 1]
        thr = 0.5 * (lo + hi)
        if not lo <= thr < hi:  # midpoint rounded onto a neighbour
            thr = lo
        _partition(order, xs, s, e, f, k + 1, buf, xbuf, in_left)
        lid = len(seg)
        seg += [(s, s + k + 1, depth + 1), (s + k + 1, e, depth + 1)]
        feature += [-1, -1]
        threshold += [0.0, 0.0]
        left += [-1, -1]
        right += [-1, -1]
        value += [0.0, 0.0]
        feature[nid], threshold[nid], left[nid], right[nid] = f, float(thr), lid, lid + 1
        n_leaves += 1
        push(lid)
        push(lid + 1)

    feature = np.array(feature, dtype=np.intp)
    value = np.where(feature < 0, np.array(value), 0.0)
    depth = max(d for _, _, d in seg)
    return Tree(feature, np.array(threshold), np.array(left, dtype=np.intp),
                np.array(right, dtype=np.intp), value, depth)


# ---------------------------------------------------------------------- objectives


class L2Objective:
    name = "l2"
    n_params = 1

    def base_score(self, y, w):
        return np.array([np.average(y, weights=w)])

    def grad_hess(self, y, F):
        return (F[:, 0] - y)[:, None], np.ones((y.size, 1))

    def loss(self, y, F, w):
        r = y - F[:, 0]
        return float(np.sum(w * r * r) / np.sum(w))


class GaussianObjective:
    """Negative log-likelihood of N(mu, exp(s)^2)."""

    name = "gaussian"
    n_params = 2

    def base_score(self, y, w):
        mu = np.average(y, weights=w)
        sd = math.sqrt(np.average((y - mu) ** 2, weights=w))
        eps = 1e-9 * (1.0 + abs(mu))
        return np.array([mu, math.log(max(sd, eps))])

    @staticmethod
    def grad_hess(y, F):
        r = y - F[:, 0]
        inv = np.exp(-2.0 * F[:, 1])
        q = r * r * inv
        g = np.column_stack([-r * inv, 1.0 - q])
        h = np.column_stack([inv, 2.0 * q])
        return g, h

    @staticmethod
    def pointwise(y, mu, s):
        r = y - mu
        return HALF_LOG_2PI + s + r * r * np.exp(-2.0 * s) / 2.0

    def loss(self, y, F, w):
        return float(np.sum(w * self.pointwise(y, F[:, 0], F[:, 1])) / np.sum(w))


OBJECTIVES = {"l2": L2Objective, "gaussian": GaussianObjective}


# ------------------------------------------------------------------------ ensemble


@dataclass
class TreeEnsemble:
    """Additive model: ``base_score + sum_m scale_m * tree_m(x)`` per parameter."""

    mode: str
    base_score: np.ndarray
    trees: list = field(default_factory=list)     # per iteration: list of Tree (one per param)
    scales: list = field(default_factory=list)    # per iteration, in (0, 1]
    feature_names: tuple | None = None
    config: dict | None = None

    @property
    def n_params(self) -> int:
        return len(self.base_score)

    def raw_predict(self, X: np.ndarray) -> np.ndarray:
        out = np.tile(np.asarray(self.base_score, dtype=float), (X.shape[0], 1))
        for trees, scale in zip(self.trees, self.scales):
            for p, tree in enumerate(trees):
                out[:, p] += scale * tree.predict(X)
        return out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "mode": self.mode,
            "base_score": [float(b) for b in self.base_score],
            "scales": [float(s) for s in self.scales],
            "trees": [[t.to_dict() for t in it] for it in self.trees],
            "feature_names": list(self.feature_names) if self.feature_names is not None else None,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        if d.get("format") != FORMAT_NAME:
            raise ValueError("not a serialized tree ensemble")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble version {d.get('version')}")
        names = d.get("feature_names")
        return cls(d["mode"], np.array(d["base_score"], dtype=float),
                   [[Tree.from_dict(t) for t in it] for it in d["trees"]],
                   list(d["scales"]), tuple(names) if names is not None else None, d.get("config"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "TreeEnsemble":
        return cls.from_dict(json.loads(s))


class BoostState:
    """Training-set bookkeeping for one boosting run.

    Keeps the leaf every training row falls into for each iteration, so
    dropped trees can be subtracted without re-traversal.
    """

    def __init__(self, X, y, w, objective, ensemble: TreeEnsemble):
        self.X, self.y, self.w = X, y, w
        self.objective = objective
        self.ensemble = ensemble
        self.leaves: list[np.ndarray] = []
        self.presorted = Presorted(X, w)
        self.F = np.tile(ensemble.base_score, (y.size, 1))

    def contribution(self, it: int) -> np.ndarray:
        trees = self.ensemble.trees[it]
        return np.column_stack([t.value[leaf] for t, leaf in zip(trees, self.leaves[it])])

    def loss(self) -> float:
        return self.objective.loss(self.y, self.F, self.w)


def _iteration(state: BoostState, cfg: BoostConfig, dropped: list[int]) -> None:
    ens = state.ensemble
    F = state.F
    if dropped:
        F = F.copy()
        for i in dropped:
            F -= ens.scales[i] * state.contribution(i)
    g, h = state.objective.grad_hess(state.y, F)
    trees = [fit_tree(state.X, g[:, p], h[:, p], state.w, cfg, state.presorted)
             for p in range(g.shape[1])]
    leaves = [t.apply(state.X) for t in trees]
    new = np.column_stack([t.value[leaf] for t, leaf in zip(trees, leaves)])
    k = len(dropped)
    for i in dropped:
        ens.scales[i] *= k / (k + 1)
        F += ens.scales[i] * state.contribution(i)
    scale = cfg.learning_rate / (k + 1)
    ens.trees.append(trees)
    ens.scales.append(scale)
    state.leaves.append(leaves)
    state.F = F + scale * new


def boost_iteration(state: BoostState, cfg: BoostConfig) -> None:
    """Plain gradient boosting step with shrinkage ``learning_rate``."""
    _iteration(state, cfg, [])


def sample_drop_set(n_trees: int, cfg: BoostConfig, rng: np.random.Generator) -> list[int]:
    if n_trees == 0:
        return []
    dropped = np.nonzero(rng.random(n_trees) < cfg.drop_rate)[0].tolist()
    if not dropped and cfg.dart_fallback:
        dropped = [int(rng.integers(n_trees))]
    return dropped


def dart_iteration(state: BoostState, cfg: BoostConfig, rng: np.random.Generator) -> list[int]:
    """One DART step. Returns the dropped iteration ids.

    The new tree is scaled by ``lr/(k+1)`` and each of the ``k`` dropped trees
    by ``k/(k+1)``.
    """
    dropped = sample_drop_set(len(state.ensemble.trees), cfg, rng)
    _iteration(state, cfg, dropped)
    return dropped


def _fit(X, y, w, cfg: BoostConfig, objective, base_score=None, feature_names=None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if y.ndim != 1 or X.shape[0] != y.size or w.shape != y.shape:
        raise ValueError("X, y and weights must have matching lengths")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if w.sum() <= 0:
        raise ValueError("sum of weights must be positive")
    base = objective.base_score(y, w) if base_score is None else np.atleast_1d(
        np.asarray(base_score, dtype=float))
    ens = TreeEnsemble(objective.name, base, feature_names=feature_names, config=asdict(cfg))
    state = BoostState(X, y, w, objective, ens)
    history = [state.loss()]
    rng = np.random.default_rng(cfg.rng_seed)
    for _ in range(cfg.num_iterations):
        if cfg.dart:
            dart_iteration(state, cfg, rng)
        else:
            boost_iteration(state, cfg)
        history.append(state.loss())
    return ens, history


def fit_gbm(X, y, cfg: BoostConfig | None = None, sample_weight=None):
    """L2 boosting; returns ``(ensemble, training_loss_history)``."""
    return _fit(X, y, sample_weight, cfg or BoostConfig(), L2Objective())


def fit_gbm_lss(X, y, cfg: BoostConfig | None = None, sample_weight=None, base_score=None):
    """Gaussian location/scale boosting; returns ``(ensemble, nll_history)``."""
    return _fit(X, y, sample_weight, cfg or BoostConfig(), GaussianObjective(), base_score)


# ---------------------------------------------------------------- sklearn wrappers


def _as_matrix(X):
    """Array plus column names (when the input carries them)."""
    if isinstance(X, FeatureMatrix):
        return np.asarray(X.values, dtype=float), list(X.column_names)
    if isinstance(X, pd.DataFrame):
        return X.to_numpy(dtype=float), [str(c) for c in X.columns]
    return check_array(X, ensure_all_finite=False, dtype=float), None


class GBMRegressor(RegressorMixin, BaseEstimator):
    """Gradient-boosted trees with L2 loss (optionally DART)."""

    _objective = "l2"

    def __init__(self, num_iterations=100, learning_rate=0.05, max_leaves=31, min_samples_leaf=20,
                 lambda_l2=0.0, min_child_weight=1e-3, max_depth=None, dart=False, drop_rate=0.1,
                 dart_fallback=True, random_state=0):
        self.num_iterations = num_iterations
        self.learning_rate = learning_rate
        self.max_leaves = max_leaves
        self.min_samples_leaf = min_samples_leaf
        self.lambda_l2 = lambda_l2
        self.min_child_weight = min_child_weight
        self.max_depth = max_depth
        self.dart = dart
        self.drop_rate = drop_rate
        self.dart_fallback = dart_fallback
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: BoostConfig) -> "GBMRegressor":
        d = asdict(cfg)
        d["random_state"] = d.pop("rng_seed")
        return cls(**d)

    def boost_config(self) -> BoostConfig:
        return BoostConfig(self.num_iterations, self.learning_rate, self.max_leaves,
                           self.min_samples_leaf, self.lambda_l2, self.min_child_weight,
                           self.max_depth, self.dart, self.drop_rate, self.dart_fallback,
                           int(self.random_state or 0))

    def fit(self, X, y, sample_weight=None, base_score=None):
        arr, names = _as_matrix(X)
        if sample_weight is None and isinstance(X, FeatureMatrix):
            sample_weight = X.weights
        self.n_features_in_ = arr.shape[1]
        if names is not None:
            self.feature_names_in_ = np.array(names, dtype=object)
        elif hasattr(self, "feature_names_in_"):
            del self.feature_names_in_
        self.ensemble_, self.train_loss_ = _fit(
            arr, np.asarray(y, dtype=float), sample_weight, self.boost_config(),
            OBJECTIVES[self._objective](), base_score, tuple(names) if names else None)
        return self

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        arr, names = _as_matrix(X)
        trained = getattr(self, "feature_names_in_", None)
        if trained is not None and names is not None:
            pos = {c: i for i, c in enumerate(names)}
            missing = [c for c in trained if c not in pos]
            if missing:
                raise SchemaError(f"missing feature columns: {', '.join(missing)}")
            arr = arr[:, [pos[c] for c in trained]]
        elif arr.shape[1] != self.n_features_in_:
            raise SchemaError(f"expected {self.n_features_in_} features, got {arr.shape[1]}")
        return arr

    def predict_raw(self, X) -> np.ndarray:
        return self.ensemble_.raw_predict(self._prepare(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_raw(X)[:, 0]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.ensemble_.to_json())

    @classmethod
    def from_ensemble(cls, ens: TreeEnsemble) -> "GBMRegressor":
        est_cls = GaussianGBMRegressor if ens.mode == "gaussian" else GBMRegressor
        cfg = dict(ens.config or {})
        if cfg:
            cfg["random_state"] = cfg.pop("rng_seed")
        est = est_cls(**cfg)
        est.ensemble_ = ens
        est.train_loss_ = []
        if ens.feature_names is not None:
            est.feature_names_in_ = np.array(ens.feature_names, dtype=object)
            est.n_features_in_ = len(ens.feature_names)
        else:
            used = [f.max() for it in ens.trees for t in it for f in [t.feature]]
            est.n_features_in_ = int(max(used, default=-1)) + 1
        return est

    @classmethod
    def load(cls, path) -> "GBMRegressor":
        with open(path) as fh:
            return cls.from_ensemble(TreeEnsemble.from_json(fh.read()))


class GaussianGBMRegressor(GBMRegressor):
    """Distributional boosting: predicts a Gaussian (mean, stddev) per row."""

    _objective = "gaussian"

    def predict_dist(self, X) -> tuple[np.ndarray, np.ndarray]:
        raw = self.predict_raw(X)
        return raw[:, 0], np.exp(raw[:, 1])
