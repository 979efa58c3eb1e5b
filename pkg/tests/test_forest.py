import numpy as np
import pytest

from causaltarget.dgp import Dataset, DgpConfig, generate_synthetic
from causaltarget.errors import ConfigError, MissingSupportError
from causaltarget.forest import (ForestParams, dump_model, fit_causal_forest,
                                 fit_regression_forest, oob_estimates,
                                 predict_cate, predict_regression,
                                 predict_weights, variable_importance)
from causaltarget.glm import AipwScoreSet, aipw_score, ate_aipw, make_folds


def manual_dataset(x, t, y):
    return Dataset(covariates=np.ascontiguousarray(x, dtype=np.float64),
                   treatment=np.asarray(t, dtype=np.int8),
                   outcome=np.asarray(y, dtype=np.int8),
                   batch=np.zeros(len(t), dtype=np.int16),
                   design_propensity=np.array([0.5]))


def test_constant_target_prediction():
    rng = np.random.default_rng(0)
    data = manual_dataset(rng.random((300, 2)), rng.integers(0, 2, 300),
                          rng.integers(0, 2, 300))
    m4 = fit_regression_forest(data, np.full(300, 0.4), None,
                               ForestParams(n_trees=25, seed=1))
    pred = predict_regression(m4, rng.random((20, 2)))
    assert np.max(np.abs(pred - 0.4)) < 1e-12
    m5 = fit_regression_forest(data, np.full(300, 0.5), None,
                               ForestParams(n_trees=25, seed=1))
    assert np.all(predict_regression(m5, rng.random((20, 2))) == 0.5)


def test_binary_covariate_recovers_group_means():
    rng = np.random.default_rng(1)
    n = 2000
    x = (rng.random(n) < 0.5).astype(np.float64)[:, None]
    y = rng.normal(0.3 + 0.4 * x[:, 0], 0.1)
    data = manual_dataset(x, np.zeros(n), np.zeros(n))
    model = fit_regression_forest(data, y, None,
                                  ForestParams(n_trees=150, seed=2))
    pred = predict_regression(model, np.array([[0.0], [1.0]]))
    oracle = np.array([y[x[:, 0] == v].mean() for v in (0.0, 1.0)])
    assert np.max(np.abs(pred - oracle)) < 0.01


def test_subset_too_small_errors():
    rng = np.random.default_rng(2)
    data = manual_dataset(rng.random((50, 2)), rng.integers(0, 2, 50),
                          rng.integers(0, 2, 50))
    with pytest.raises(ConfigError):
        fit_regression_forest(data, "outcome", np.arange(9),
                              ForestParams(n_trees=5, min_node_size=5, seed=0))


def test_causal_null_effect_within_aipw_se():
    cfg = DgpConfig(n_units=5000, n_covariates=3, covariate_law="uniform01",
                    baseline_spec={"name": "linear", "intercept": -0.4,
                                   "coefficients": [0.8, -0.5, 0.2]},
                    effect_spec={"name": "zero"},
                    batches=[(1.0, 0.5)], seed=31)
    data = generate_synthetic(cfg)
    model = fit_causal_forest(data, ForestParams(n_trees=150, min_node_size=10,
                                                 seed=5),
                              propensity=0.5, threads=2)
    tau_oob = oob_estimates(model)
    # SE from the AIPW ATE estimator on the same data, forest OOB nuisances
    f_oob = model.metadata["y_hat"] - 0.5 * tau_oob
    gamma = aipw_score(data.outcome, data.treatment, f_oob, tau_oob,
                       np.full(data.n, 0.5))
    folds = make_folds(data.n, 2, seed=1)
    _, se = ate_aipw(AipwScoreSet(gamma=gamma, f_hat=f_oob, tau_hat=tau_oob,
                                  p_hat=np.full(data.n, 0.5), fold=folds))
    assert abs(tau_oob.mean()) < 2.0 * se


def test_causal_two_level_covariate_matches_cell_oracle():
    rng = np.random.default_rng(3)
    n = 4000
    x = (rng.random(n) < 0.5).astype(np.float64)[:, None]
    t = (rng.random(n) < 0.5).astype(np.int8)
    p1 = np.where(x[:, 0] == 0, 0.40, 0.50)
    tau = np.where(x[:, 0] == 0, 0.05, 0.25)
    y = (rng.random(n) < p1 + tau * t).astype(np.int8)
    data = manual_dataset(x, t, y)
    model = fit_causal_forest(data, ForestParams(n_trees=200, min_node_size=10,
                                                 seed=6), propensity=0.5,
                              threads=2)
    pred = predict_cate(model, np.array([[0.0], [1.0]]))
    for v in (0, 1):
        mask = x[:, 0] == v
        oracle = (y[mask & (t == 1)].mean() - y[mask & (t == 0)].mean())
        assert abs(pred[v] - oracle) < 0.02


def test_single_arm_errors():
    rng = np.random.default_rng(4)
    data = manual_dataset(rng.random((100, 2)), np.ones(100),
                          rng.integers(0, 2, 100))
    with pytest.raises(ConfigError):
        fit_causal_forest(data, ForestParams(n_trees=5, seed=0),
                          propensity=0.5)


def test_predict_weights_uniform_leaf():
    rng = np.random.default_rng(5)
    n = 10
    data = manual_dataset(np.ones((n, 1)), rng.integers(0, 2, n),
                          rng.integers(0, 2, n))
    params = ForestParams(n_trees=1, subsample_fraction=1.0,
                          honesty_fraction=0.5, min_node_size=1, seed=7)
    model = fit_regression_forest(data, "outcome", None, params)
    w = predict_weights(model, np.array([1.0]))
    members = model.trees[0].est_idx
    assert len(members) == 5
    assert np.allclose(w[members], 0.2)
    assert np.all(w[np.setdiff1d(np.arange(n), members)] == 0.0)
    assert abs(w.sum() - 1.0) < 1e-10


def test_weights_sum_to_one_and_zero_off_support():
    rng = np.random.default_rng(6)
    n = 600
    x = (rng.random(n) < 0.5).astype(np.float64)[:, None]
    y = rng.normal(x[:, 0], 0.05)
    data = manual_dataset(x, np.zeros(n), np.zeros(n))
    model = fit_regression_forest(data, y, None,
                                  ForestParams(n_trees=40, seed=8))
    for q in (0.0, 1.0):
        w = predict_weights(model, np.array([q]))
        assert abs(w.sum() - 1.0) < 1e-10
        assert np.all(w[x[:, 0] != q] == 0.0)  # never co-leafed after splits


def test_predict_cate_extreme_and_arithmetic():
    rng = np.random.default_rng(9)
    n = 60
    t = np.tile([0, 1], n // 2)
    y = t.copy()  # treated all 1, control all 0
    data = manual_dataset(np.ones((n, 1)), t, y)
    params = ForestParams(n_trees=40, subsample_fraction=0.5,
                          honesty_fraction=0.5, min_node_size=2, seed=10)
    model = fit_causal_forest(data, params, propensity=0.5)
    assert predict_cate(model, np.array([1.0]))[0] == 1.0

    # stump leaf: prediction equals pooled weighted difference of leaf means
    y2 = (rng.random(n) < np.where(t == 1, 0.6, 0.5)).astype(np.int8)
    data2 = manual_dataset(np.ones((n, 1)), t, y2)
    model2 = fit_causal_forest(data2, params, propensity=0.5)
    s1 = w1 = s0 = w0 = 0.0
    for tree in model2.trees:
        st = tree.stats
        s1 += st["sum1"][0] / st["n"][0]
        w1 += st["n1"][0] / st["n"][0]
        s0 += st["sum0"][0] / st["n"][0]
        w0 += st["n0"][0] / st["n"][0]
    expected = s1 / w1 - s0 / w0
    assert abs(predict_cate(model2, np.array([1.0]))[0] - expected) < 1e-12


def test_honesty_oob_never_touches_own_outcome():
    rng = np.random.default_rng(11)
    n = 400
    x = rng.random((n, 2))
    y = (rng.random(n) < 0.5).astype(np.int8)
    data = manual_dataset(x, np.zeros(n), y)
    params = ForestParams(n_trees=60, seed=12)
    base = oob_estimates(fit_regression_forest(data, "outcome", None, params))
    flipped = y.copy()
    flipped[17] = 1 - flipped[17]
    data2 = manual_dataset(x, np.zeros(n), flipped)
    alt = oob_estimates(fit_regression_forest(data2, "outcome", None, params))
    assert alt[17] == base[17]
    assert not np.array_equal(alt, base)


def test_structure_and_estimation_halves_disjoint():
    rng = np.random.default_rng(13)
    data = manual_dataset(rng.random((300, 3)), rng.integers(0, 2, 300),
                          rng.integers(0, 2, 300))
    model = fit_regression_forest(data, "outcome", None,
                                  ForestParams(n_trees=30, seed=14))
    for tree in model.trees:
        assert not np.intersect1d(tree.struct_idx, tree.est_idx).size


def test_depth_zero_equals_estimation_half_mean():
    rng = np.random.default_rng(15)
    n = 500
    x = rng.random((n, 2))
    y = rng.random(n)
    data = manual_dataset(x, np.zeros(n), np.zeros(n))
    model = fit_regression_forest(data, y, None,
                                  ForestParams(n_trees=50, max_depth=0,
                                               seed=16))
    expected = np.mean([y[tree.est_idx].mean() for tree in model.trees])
    pred = predict_regression(model, x[:10])
    assert np.max(np.abs(pred - expected)) < 1e-10
    assert np.all(pred == pred[0])


def test_thread_count_does_not_change_results():
    cfg = DgpConfig(n_units=1500, n_covariates=3, covariate_law="uniform01",
                    baseline_spec={"name": "linear", "intercept": -0.4,
                                   "coefficients": [0.8, -0.5, 0.2]},
                    effect_spec={"name": "constant", "value": 0.4},
                    batches=[(1.0, 0.5)], seed=17)
    data = generate_synthetic(cfg)
    params = ForestParams(n_trees=40, min_node_size=10, seed=18)
    m1 = fit_causal_forest(data, params, propensity=0.5, threads=1)
    m2 = fit_causal_forest(data, params, propensity=0.5, threads=2)
    assert np.array_equal(oob_estimates(m1), oob_estimates(m2))
    q = data.covariates[:40]
    assert np.array_equal(predict_cate(m1, q), predict_cate(m2, q))


def test_variable_importance():
    rng = np.random.default_rng(19)
    n = 1500
    x1 = rng.random((n, 1))
    y1 = rng.normal(2.0 * x1[:, 0], 0.1)
    data1 = manual_dataset(x1, np.zeros(n), np.zeros(n))
    m1 = fit_regression_forest(data1, y1, None,
                               ForestParams(n_trees=30, seed=20))
    vi = variable_importance(m1)
    assert vi.has_splits
    assert vi.normalized.tolist() == [1.0]
    assert abs(vi.normalized.sum() - 1.0) < 1e-12

    stump = fit_regression_forest(data1, np.full(n, 0.5), None,
                                  ForestParams(n_trees=10, seed=21))
    vs = variable_importance(stump)
    assert not vs.has_splits
    assert np.all(vs.normalized == 0.0)


def test_signal_beats_noise_importance_across_seeds():
    wins = 0
    for s in range(10):
        rng = np.random.default_rng(100 + s)
        n = 5000
        x = rng.random((n, 2))  # column 0 signal, column 1 noise
        y = rng.normal(1.5 * x[:, 0], 0.3)
        data = manual_dataset(x, np.zeros(n), np.zeros(n))
        model = fit_regression_forest(data, y, None,
                                      ForestParams(n_trees=25, mtry=2,
                                                   seed=200 + s), threads=2)
        vi = variable_importance(model)
        wins += vi.normalized[0] > vi.normalized[1]
    assert wins >= 9


def test_oob_requires_out_of_sample_trees():
    rng = np.random.default_rng(22)
    data = manual_dataset(rng.random((60, 2)), np.zeros(60),
                          rng.integers(0, 2, 60))
    model = fit_regression_forest(data, "outcome", None,
                                  ForestParams(n_trees=3,
                                               subsample_fraction=1.0,
                                               seed=23))
    with pytest.raises(MissingSupportError):
        oob_estimates(model)


def test_params_validation_and_query_shape():
    with pytest.raises(ConfigError):
        ForestParams(n_trees=0).validate()
    with pytest.raises(ConfigError):
        ForestParams(honesty_fraction=1.0).validate()
    with pytest.raises(ConfigError):
        ForestParams(mtry=5).validate(d=3)
    rng = np.random.default_rng(24)
    data = manual_dataset(rng.random((100, 2)), np.zeros(100),
                          rng.integers(0, 2, 100))
    model = fit_regression_forest(data, "outcome", None,
                                  ForestParams(n_trees=5, seed=25))
    with pytest.raises(ConfigError):
        predict_regression(model, np.ones((4, 3)))


def test_model_dump(tmp_path):
    rng = np.random.default_rng(26)
    data = manual_dataset(rng.random((120, 2)), np.zeros(120),
                          rng.integers(0, 2, 120))
    model = fit_regression_forest(data, "outcome", None,
                                  ForestParams(n_trees=3, seed=27))
    path = tmp_path / "model.json"
    dump_model(model, path)
    import json
    payload = json.loads(path.read_text())
    assert payload["kind"] == "regression"
    assert len(payload["trees"]) == 3
