import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from loadcast.gbdt import (BoostConfig, BoostState, GaussianGBMRegressor, GaussianObjective, GBMRegressor,
                           L2Objective, SchemaError, Tree, TreeEnsemble, dart_iteration, fit_gbm, fit_gbm_lss,
                           fit_tree)


def nll(y, mu, s):
    return GaussianObjective.pointwise(y, mu, s)


def best_split_oracle(x, g, h, lam, msl):
    """Exhaustive scan over midpoints of one feature."""
    vals = np.unique(x)
    G, H = g.sum(), h.sum()
    best = (-np.inf, None)
    for a, b in zip(vals[:-1], vals[1:]):
        thr = 0.5 * (a + b)
        L = x <= thr
        if L.sum() < msl or (~L).sum() < msl:
            continue
        gain = g[L].sum() ** 2 / (h[L].sum() + lam) + g[~L].sum() ** 2 / (h[~L].sum() + lam) - G * G / (H + lam)
        if gain > best[0]:
            best = (gain, thr)
    return best


def test_constant_gradient_single_leaf():
    X = np.arange(20.0)[:, None]
    t = fit_tree(X, np.full(20, 2.5), np.ones(20), cfg=BoostConfig(min_samples_leaf=1))
    assert t.n_leaves == 1
    assert t.predict(X).tolist() == [-2.5] * 20


def test_step_target_split_matches_exhaustive_search(rng):
    x = rng.permutation(np.arange(30.0))
    y = np.where(x < 12, 1.0, 5.0)
    g, h = -y, np.ones(30)
    t = fit_tree(x[:, None], g, h, cfg=BoostConfig(max_leaves=2, min_samples_leaf=1))
    gain, thr = best_split_oracle(x, g, h, 0.0, 1)
    assert t.threshold[0] == thr == 11.5
    pred = t.predict(x[:, None])
    assert np.allclose(pred[x < 12], 1.0) and np.allclose(pred[x >= 12], 5.0)


def test_split_gain_with_lambda_matches_oracle(rng):
    x = rng.normal(size=200)
    g = rng.normal(size=200) + 2 * (x > 0.3)
    h = rng.uniform(0.5, 2, 200)
    t = fit_tree(x[:, None], g, h, cfg=BoostConfig(max_leaves=2, min_samples_leaf=5, lambda_l2=3.0))
    _, thr = best_split_oracle(x, g, h, 3.0, 5)
    assert t.threshold[0] == pytest.approx(thr, abs=1e-15)
    L = x <= thr
    assert t.predict(x[L][:1, None])[0] == pytest.approx(-g[L].sum() / (h[L].sum() + 3.0))


def test_zero_weight_rows_do_not_matter(rng):
    X = rng.normal(size=(200, 3))
    y = X[:, 0] * 2 + rng.normal(size=200)
    w = (rng.random(200) > 0.3).astype(float)
    cfg = BoostConfig(num_iterations=10, min_samples_leaf=5, max_leaves=8)
    a, _ = fit_gbm(X, y, cfg, w)
    X2, y2 = X.copy(), y.copy()
    X2[w == 0] = rng.normal(100, 50, size=(int((w == 0).sum()), 3))
    y2[w == 0] = 1e6
    b, _ = fit_gbm(X2, y2, cfg, w)
    assert a.to_json() == b.to_json()


def test_nan_rows_are_excluded_and_go_left():
    X = np.array([[0.0], [1.0], [2.0], [3.0], [np.nan]])
    t = fit_tree(X, np.array([-1, -1, 1, 1, 50.0]), np.ones(5), cfg=BoostConfig(max_leaves=2, min_samples_leaf=1))
    assert t.threshold[0] == 1.5
    assert t.apply(np.array([[np.nan]]))[0] == t.left[0]


def test_zero_iterations_predicts_weighted_mean():
    X = np.zeros((4, 1))
    ens, hist = fit_gbm(X, np.array([1.0, 2, 3, 4]), BoostConfig(num_iterations=0), np.array([1, 1, 1, 5.0]))
    assert ens.raw_predict(X)[:, 0] == pytest.approx(np.full(4, 26 / 8))
    assert len(hist) == 1


def test_l2_converges_on_identity(rng):
    x = rng.permutation(np.linspace(0, 10, 300))
    cfg = BoostConfig(num_iterations=200, learning_rate=0.1, max_leaves=31, min_samples_leaf=1)
    ens, hist = fit_gbm(x[:, None], x, cfg)
    mse = np.mean((ens.raw_predict(x[:, None])[:, 0] - x) ** 2)
    assert mse < 1e-3 * np.var(x)
    assert np.all(np.diff(hist) <= 1e-12)


def test_duplicated_half_weight_rows_equal_unit_weights(rng):
    X = rng.normal(size=(80, 2))
    y = X[:, 0] - X[:, 1] ** 2
    cfg = BoostConfig(num_iterations=15, min_samples_leaf=1, max_leaves=6)
    a, _ = fit_gbm(X, y, cfg)
    b, _ = fit_gbm(np.vstack([X, X]), np.r_[y, y], cfg, np.full(160, 0.5))
    Xt = rng.normal(size=(50, 2))
    assert np.allclose(a.raw_predict(Xt), b.raw_predict(Xt), rtol=0, atol=1e-12)


def test_row_permutation_invariance(rng):
    X = np.round(rng.normal(size=(150, 4)), 1)  # ties across rows
    y = X[:, 0] + np.sin(X[:, 1])
    cfg = BoostConfig(num_iterations=20, min_samples_leaf=3, max_leaves=8)
    a, _ = fit_gbm(X, y, cfg)
    p = rng.permutation(150)
    b, _ = fit_gbm(X[p], y[p], cfg)
    for ta, tb in zip(a.trees, b.trees):
        np.testing.assert_array_equal(ta[0].feature, tb[0].feature)
        np.testing.assert_array_equal(ta[0].threshold, tb[0].threshold)
    assert np.allclose(a.raw_predict(X), b.raw_predict(X), rtol=0, atol=1e-12)


def test_gaussian_gradients_finite_differences(rng):
    obj = GaussianObjective()
    pts = [(1.0, 0.3, 0.2)] + [tuple(v) for v in rng.uniform([-3, -3, -1.5], [3, 3, 1.5], size=(99, 3))]
    eps = 1e-5
    for y, mu, s in pts:
        g, h = obj.grad_hess(np.array([y]), np.array([[mu, s]]))
        num_gmu = (nll(y, mu + eps, s) - nll(y, mu - eps, s)) / (2 * eps)
        num_gs = (nll(y, mu, s + eps) - nll(y, mu, s - eps)) / (2 * eps)
        assert g[0, 0] == pytest.approx(num_gmu, rel=1e-6, abs=1e-9)
        assert g[0, 1] == pytest.approx(num_gs, rel=1e-6, abs=1e-9)
        num_hmu = (nll(y, mu + eps, s) - 2 * nll(y, mu, s) + nll(y, mu - eps, s)) / eps ** 2
        assert h[0, 0] == pytest.approx(num_hmu, rel=1e-4)


def test_gaussian_gradient_zero_at_mean():
    g, _ = GaussianObjective.grad_hess(np.array([2.0]), np.array([[2.0, 0.7]]))
    assert g[0, 0] == 0.0


def test_lss_base_scores_and_constant_floor():
    y = np.array([1.0, 2.0, 3.0, 6.0])
    ens, _ = fit_gbm_lss(np.zeros((4, 1)), y, BoostConfig(num_iterations=0))
    assert ens.base_score[0] == pytest.approx(3.0)
    assert ens.base_score[1] == pytest.approx(np.log(np.std(y)))
    ens, _ = fit_gbm_lss(np.zeros((3, 1)), np.full(3, 5.0), BoostConfig(num_iterations=0))
    assert ens.base_score[1] == pytest.approx(np.log(1e-9 * 6))


def test_dart_scaling_one_step(rng):
    X = rng.normal(size=(100, 2))
    y = X[:, 0] + rng.normal(0, 0.1, 100)
    cfg = BoostConfig(num_iterations=1, learning_rate=0.5, min_samples_leaf=5, max_leaves=4)
    ens, _ = fit_gbm(X, y, cfg)
    state = BoostState(X, y, np.ones(100), L2Objective(), ens)
    state.leaves.append([t.apply(X) for t in ens.trees[0]])
    state.F = ens.raw_predict(X)
    dart_cfg = BoostConfig(learning_rate=0.5, min_samples_leaf=5, max_leaves=4, dart=True, drop_rate=0.999)
    dropped = dart_iteration(state, dart_cfg, np.random.default_rng(0))
    assert dropped == [0]
    assert ens.scales == [0.25, 0.25]
    assert np.allclose(state.F, ens.raw_predict(X))
    assert all(0 < s <= 1 for s in ens.scales)


def test_dart_fallback_drops_one_tree():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 2))
    y = X[:, 1]
    cfg = BoostConfig(num_iterations=6, min_samples_leaf=2, max_leaves=4, dart=True, drop_rate=0.0)
    ens, _ = fit_gbm(X, y, cfg)
    assert any(s < cfg.learning_rate for s in ens.scales)
    assert all(0 < s <= 1 for s in ens.scales)


def test_estimator_schema_and_roundtrip(tmp_path, rng):
    df = pd.DataFrame(rng.normal(size=(120, 3)), columns=["a", "b", "c"])
    y = df["a"] * 3 + rng.normal(size=120)
    m = GaussianGBMRegressor(num_iterations=15, min_samples_leaf=5).fit(df, y)
    with pytest.raises(SchemaError, match="missing feature columns: b"):
        m.predict(df[["a", "c"]])
    mu, sd = m.predict_dist(df[["c", "b", "a"]])
    assert np.all(sd > 0)
    assert np.allclose(mu, m.predict(df))
    path = tmp_path / "m.json"
    m.save(path)
    assert json.loads(path.read_text())["format"] == "loadcast-tree-ensemble"
    m2 = GBMRegressor.load(path)
    assert isinstance(m2, GaussianGBMRegressor)
    np.testing.assert_array_equal(m2.predict_raw(df), m.predict_raw(df))
    assert m.get_params()["num_iterations"] == 15


def test_single_stump_prediction():
    tree = Tree(np.array([0, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
                np.array([0.0, -1.0, 4.0]), 1)
    ens = TreeEnsemble("l2", np.array([10.0]), [[tree]], [0.1])
    assert ens.raw_predict(np.array([[0.0], [1.0]]))[:, 0].tolist() == [pytest.approx(9.9), pytest.approx(10.4)]
    assert TreeEnsemble.from_json(ens.to_json()).raw_predict(np.array([[1.0]]))[0, 0] == pytest.approx(10.4)


def test_config_validation():
    for bad in (dict(learning_rate=0), dict(max_leaves=1), dict(min_samples_leaf=0), dict(lambda_l2=-1),
                dict(drop_rate=1.0), dict(num_iterations=-1)):
        with pytest.raises(ValueError):
            BoostConfig(**bad)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 5]), st.booleans())
def test_training_loss_monotone_property(seed, msl, gaussian):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 3))
    y = X[:, 0] + rng.normal(0, 0.5 + np.abs(X[:, 1]), 120)
    cfg = BoostConfig(num_iterations=15, learning_rate=0.3, min_samples_leaf=msl, max_leaves=6)
    fit = fit_gbm_lss if gaussian else fit_gbm
    _, hist = fit(X, y, cfg)
    if not gaussian:
        assert np.all(np.diff(hist) <= 1e-12)
    assert np.all(np.isfinite(hist))
