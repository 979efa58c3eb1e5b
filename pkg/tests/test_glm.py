import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causaltarget import _seeds
from causaltarget.dgp import Dataset, DgpConfig, generate_synthetic
from causaltarget.errors import CollinearityError, ConfigError, EstimationError
from causaltarget.forest import (ForestParams, fit_causal_forest,
                                 fit_regression_forest, predict_cate,
                                 predict_regression)
from causaltarget.glm import (AipwScoreSet, aipw_score, ate_aipw,
                              ate_mean_difference, crossfit_nuisances, expit,
                              fit_logistic, logit, make_folds)


# --- link functions ---

def test_link_trivials():
    assert logit(0.5) == 0.0
    assert expit(0.0) == 0.5
    assert abs(expit(logit(0.73)) - 0.73) < 1e-12


@given(st.floats(min_value=1e-5, max_value=1.0 - 1e-5))
@settings(max_examples=50, deadline=None)
def test_links_are_mutually_inverse(p):
    assert abs(expit(logit(p)) - p) < 1e-12


def test_logit_clips_outside_unit_interval():
    assert logit(0.0) == logit(1e-6)
    assert logit(1.0) == logit(1.0 - 1e-6)
    assert np.isfinite(logit(np.array([-0.2, 0.0, 0.5, 1.0, 1.3]))).all()


# --- logistic regression ---

def test_intercept_only_fits():
    y = np.concatenate([np.ones(50), np.zeros(50)])
    fit = fit_logistic(np.empty((100, 0)), y)
    assert abs(fit.coefficients[0]) < 1e-8
    y2 = np.concatenate([np.ones(75), np.zeros(25)])
    fit2 = fit_logistic(np.empty((100, 0)), y2)
    assert abs(fit2.coefficients[0] - math.log(3)) < 1e-6


def test_known_coefficients_recovered():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50000, 1))
    eta = 0.3 - 1.2 * x[:, 0]
    y = (rng.random(50000) < expit(eta)).astype(np.float64)
    fit = fit_logistic(x, y)
    assert fit.converged
    se = fit.standard_errors()
    assert abs(fit.coefficients[0] - 0.3) < 3 * se[0]
    assert abs(fit.coefficients[1] + 1.2) < 3 * se[1]


def test_loglik_nondecreasing():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2000, 3))
    y = (rng.random(2000) < expit(x @ [0.5, -1.0, 2.0])).astype(np.float64)
    fit = fit_logistic(x, y)
    path = np.array(fit.loglik_path)
    assert np.all(np.diff(path) >= -1e-10)


def test_collinearity_named():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 2))
    x = np.column_stack([x, x[:, 0] * 2.0])
    y = (rng.random(200) < 0.5).astype(np.float64)
    with pytest.raises(CollinearityError, match="column"):
        fit_logistic(x, y)


def test_perfect_separation_flagged_not_fatal():
    x = np.linspace(-1, 1, 80)[:, None]
    y = (x[:, 0] > 0).astype(np.float64)
    fit = fit_logistic(x, y)
    assert not fit.converged
    p = fit.predict_proba(x)
    assert np.all((p >= 0) & (p <= 1))


def test_sample_weights_replicate_duplication():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(300, 1))
    y = (rng.random(300) < expit(0.4 + x[:, 0])).astype(np.float64)
    w = rng.integers(1, 4, 300).astype(np.float64)
    fit_w = fit_logistic(x, y, sample_weights=w)
    xd = np.repeat(x, w.astype(int), axis=0)
    yd = np.repeat(y, w.astype(int))
    fit_d = fit_logistic(xd, yd)
    assert np.allclose(fit_w.coefficients, fit_d.coefficients, atol=1e-6)


# --- folds ---

def test_make_folds_shapes_and_determinism():
    f = make_folds(100, 10, seed=5)
    sizes = np.bincount(f.fold_of)
    assert sizes.tolist() == [10] * 10
    g = make_folds(100, 10, seed=5)
    assert np.array_equal(f.fold_of, g.fold_of)
    assert not np.array_equal(f.fold_of, make_folds(100, 10, seed=6).fold_of)


@given(st.integers(min_value=2, max_value=12), st.integers(min_value=12, max_value=200))
@settings(max_examples=30, deadline=None)
def test_folds_partition_property(k, n):
    f = make_folds(n, k, seed=7)
    sizes = np.bincount(f.fold_of, minlength=k)
    assert sizes.sum() == n
    assert sizes.max() - sizes.min() <= 1


def test_folds_errors():
    with pytest.raises(ConfigError):
        make_folds(5, 6, seed=0)
    with pytest.raises(ConfigError):
        make_folds(10, 1, seed=0)


# --- AIPW scores ---

def test_score_reduces_to_ipw_with_zero_nuisances():
    y = np.array([1, 1, 0, 0], dtype=np.float64)
    t = np.array([1, 0, 1, 0], dtype=np.float64)
    zeros = np.zeros(4)
    g = aipw_score(y, t, zeros, zeros, np.full(4, 0.5))
    assert g.tolist() == [2.0, -2.0, 0.0, 0.0]


def test_score_equals_tau_under_exact_nuisances():
    rng = np.random.default_rng(8)
    n = 200
    f = rng.uniform(0.2, 0.6, n)
    tau = rng.uniform(-0.1, 0.2, n)
    p = rng.uniform(0.3, 0.7, n)
    t = (rng.random(n) < p).astype(np.float64)
    y = np.where(t == 1, f + (1 - p) * tau, f - p * tau)  # y == fhat_T
    g = aipw_score(y, t, f, tau, p)
    assert np.array_equal(g, tau)


def test_ate_aipw_hand_computed():
    gamma = np.array([0.2, -0.1, 0.4, 0.3])
    folds = make_folds(4, 2, seed=0)
    scores = AipwScoreSet(gamma=gamma, f_hat=np.zeros(4), tau_hat=np.zeros(4),
                          p_hat=np.full(4, 0.5), fold=folds)
    est, se = ate_aipw(scores)
    assert abs(est - 0.2) < 1e-15
    # plug-in variance: mean squared deviation [0, .09, .04, .01] -> 0.035
    assert abs(se - math.sqrt(0.035 / 4.0)) < 1e-15


def test_constant_scores_zero_se():
    folds = make_folds(6, 2, seed=0)
    scores = AipwScoreSet(gamma=np.full(6, 0.25), f_hat=np.zeros(6),
                          tau_hat=np.zeros(6), p_hat=np.full(6, 0.5),
                          fold=folds)
    est, se = ate_aipw(scores)
    assert est == 0.25 and se == 0.0


def test_unbiasedness_and_coverage(aipw_replications):
    ests = aipw_replications["estimates"]
    ses = aipw_replications["ses"]
    truth = aipw_replications["truth"]
    se_mean = ests.std(ddof=1) / math.sqrt(len(ests))
    assert abs(ests.mean() - truth) < 3 * se_mean
    cover = np.mean(np.abs(ests - truth) <= 1.96 * ses)
    assert 0.90 <= cover <= 0.98


# --- cross-fitting ---

def _small_data(seed=21, n=600):
    cfg = DgpConfig(n_units=n, n_covariates=2, covariate_law="uniform01",
                    baseline_spec={"name": "linear", "intercept": -0.4,
                                   "coefficients": [0.8, -0.5]},
                    effect_spec={"name": "constant", "value": 0.45},
                    batches=[(1.0, 0.5)], seed=seed)
    return generate_synthetic(cfg)


def test_crossfit_hygiene_recomputation():
    data = _small_data()
    folds = make_folds(data.n, 3, seed=9)
    params = ForestParams(n_trees=20, min_node_size=10, seed=10)
    scores = crossfit_nuisances(data, folds, params, "known")

    k = 0
    train = folds.train_mask(k)
    test = folds.test_mask(k)
    from dataclasses import replace
    bp = replace(params, min_node_size=5,
                 seed=_seeds.derive_seed(params.seed,
                                         _seeds.NUISANCE_BASELINE, k))
    bmodel = fit_regression_forest(data, "outcome",
                                   train & (data.treatment == 0), bp)
    assert np.array_equal(scores.f_hat[test],
                          predict_regression(bmodel, data.covariates[test]))
    cp = replace(params, seed=_seeds.derive_seed(params.seed,
                                                 _seeds.NUISANCE_CAUSAL, k))
    train_idx = np.nonzero(train)[0]
    cmodel = fit_causal_forest(data, cp,
                               propensity=data.unit_propensity()[train_idx],
                               subset=train_idx, compute_oob=False)
    assert np.array_equal(scores.tau_hat[test],
                          predict_cate(cmodel, data.covariates[test]))


def test_crossfit_estimated_propensity_mode():
    data = _small_data(seed=22, n=800)
    folds = make_folds(data.n, 3, seed=11)
    scores = crossfit_nuisances(data, folds,
                                ForestParams(n_trees=20, min_node_size=10,
                                             seed=12),
                                propensity_mode="estimated")
    assert np.all((scores.p_hat >= 0.01) & (scores.p_hat <= 0.99))
    est, se = ate_aipw(scores)
    assert abs(est - data.tau_true.mean()) < 5 * se


def test_crossfit_requires_both_arms():
    data = _small_data(seed=23, n=300)
    data.treatment[:] = 1
    folds = make_folds(data.n, 3, seed=13)
    with pytest.raises(EstimationError):
        crossfit_nuisances(data, folds, ForestParams(n_trees=5, seed=0))


def test_scores_csv_roundtrip(tmp_path):
    data = _small_data(seed=24, n=300)
    folds = make_folds(data.n, 3, seed=14)
    scores = crossfit_nuisances(data, folds,
                                ForestParams(n_trees=10, min_node_size=10,
                                             seed=15))
    path = tmp_path / "scores.csv"
    scores.save_csv(path)
    back = AipwScoreSet.load_csv(path)
    assert np.array_equal(back.gamma, scores.gamma)
    assert np.array_equal(back.tau_hat, scores.tau_hat)
    assert np.array_equal(back.fold.fold_of, scores.fold.fold_of)


# --- mean-difference ATE ---

def _batch_dataset(blocks):
    """blocks: list of (n1, ones1, n0, ones0) per batch."""
    t, y, batch = [], [], []
    for b, (n1, k1, n0, k0) in enumerate(blocks):
        t += [1] * n1 + [0] * n0
        y += [1] * k1 + [0] * (n1 - k1) + [1] * k0 + [0] * (n0 - k0)
        batch += [b] * (n1 + n0)
    n = len(t)
    return Dataset(covariates=np.zeros((n, 1)), treatment=np.array(t, np.int8),
                   outcome=np.array(y, np.int8),
                   batch=np.array(batch, np.int16),
                   design_propensity=np.full(len(blocks), 0.5))


def test_mean_difference_toy_arithmetic():
    data = _batch_dataset([(100, 43, 100, 37)])
    est, se = ate_mean_difference(data)
    assert abs(est - 0.06) < 1e-12
    assert se > 0


def test_mean_difference_two_equal_batches():
    data = _batch_dataset([(100, 50, 100, 40), (200, 100, 200, 80)])
    est, _ = ate_mean_difference(data)
    assert abs(est - 0.1) < 1e-12


def test_mean_difference_empty_arm_errors():
    data = _batch_dataset([(100, 43, 100, 37)])
    data.treatment[:] = 1
    with pytest.raises(EstimationError):
        ate_mean_difference(data)


def test_mean_difference_permutation_null():
    data = _small_data(seed=25, n=1000)
    rng = np.random.default_rng(26)
    hits = 0
    for _ in range(100):
        data.treatment = rng.permutation(data.treatment)
        est, se = ate_mean_difference(data)
        hits += abs(est) <= 3 * se
    assert hits >= 98
