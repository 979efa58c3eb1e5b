"""Shared fixtures.

The heavy Monte-Carlo sweeps are session-scoped so the module tests and the
acceptance suite share one computation. Seeds are fixed; results are
deterministic regardless of kernel backend or thread count.
"""

import numpy as np
import pytest

from causaltarget.dgp import DgpConfig, RedrawSpec, generate_synthetic, semisynthetic_redraw
from causaltarget.forest import ForestParams
from causaltarget.glm import (AipwScoreSet, aipw_score, ate_aipw,
                              crossfit_nuisances, make_folds)
from causaltarget.heterogeneity import calibration_regression, gates
from causaltarget.targeting import (build_policy, effect_log_odds,
                                    policy_value_curve, rate_autoc,
                                    simulation_study)

THREADS = 2

# population ATE of the known-ATE DGP below, from a 64-node Gauss-Legendre
# tensor quadrature (cross-checked by 2e6-draw Monte Carlo before the build)
KNOWN_ATE_TRUTH = 0.11001569198132843


def known_ate_config(seed):
    return DgpConfig(n_units=2000, n_covariates=2, covariate_law="uniform01",
                     baseline_spec={"name": "linear", "intercept": -0.4,
                                    "coefficients": [0.8, -0.5]},
                     effect_spec={"name": "constant", "value": 0.45},
                     batches=[(1.0, 0.5)], seed=seed)


@pytest.fixture(scope="session")
def aipw_replications():
    """300 cross-fitted AIPW estimates on the known-ATE design (criterion 1)."""
    ests, ses = [], []
    for rep in range(300):
        data = generate_synthetic(known_ate_config(100000 + rep))
        folds = make_folds(data.n, 5, seed=101000 + rep)
        scores = crossfit_nuisances(
            data, folds,
            ForestParams(n_trees=40, min_node_size=10, seed=102000 + rep),
            threads=THREADS)
        e, s = ate_aipw(scores)
        ests.append(e)
        ses.append(s)
    return {"estimates": np.array(ests), "ses": np.array(ses),
            "truth": KNOWN_ATE_TRUTH}


@pytest.fixture(scope="session")
def zeroed_nuisance_replications():
    """Same design with f-hat and tau-hat forced to zero (criterion 2)."""
    ests, ses = [], []
    for rep in range(300):
        data = generate_synthetic(known_ate_config(100000 + rep))
        folds = make_folds(data.n, 5, seed=101000 + rep)
        zeros = np.zeros(data.n)
        gamma = aipw_score(data.outcome, data.treatment, zeros, zeros,
                           data.unit_propensity())
        scores = AipwScoreSet(gamma=gamma, f_hat=zeros, tau_hat=zeros,
                              p_hat=data.unit_propensity(), fold=folds)
        e, s = ate_aipw(scores)
        ests.append(e)
        ses.append(s)
    return {"estimates": np.array(ests), "ses": np.array(ses),
            "truth": KNOWN_ATE_TRUTH}


@pytest.fixture(scope="session")
def null_random_sweep():
    """Random-policy curves and AUTOC tests on 50 null seeds (criterion 4)."""
    base = 60000
    deltas, ses, pvals = [], [], []
    q_grid = None
    for s in range(50):
        cfg = DgpConfig(n_units=2000, n_covariates=3, covariate_law="uniform01",
                        baseline_spec={"name": "linear", "intercept": -0.5,
                                       "coefficients": [1.0, 0.4, 0.0]},
                        effect_spec={"name": "constant", "value": 0.4},
                        batches=[(1.0, 0.5)], seed=base + s)
        data = generate_synthetic(cfg)
        folds = make_folds(data.n, 5, seed=base + 1000 + s)
        scores = crossfit_nuisances(
            data, folds,
            ForestParams(n_trees=50, min_node_size=10, seed=base + 2000 + s),
            threads=THREADS)
        policy = build_policy("Random", data, scores, seed=base + 3000 + s)
        curve = policy_value_curve(policy, scores, data)
        q_grid = curve.q_grid
        deltas.append(curve.delta_vs_random)
        ses.append(curve.se_delta)
        pvals.append(rate_autoc(policy, scores, seed=base + 4000 + s).p_one_sided)
    return {"q_grid": q_grid, "delta": np.array(deltas), "se": np.array(ses),
            "autoc_p": np.array(pvals)}


@pytest.fixture(scope="session")
def dominance_sweep():
    """Oracle vs CATE vs Random at q=0.5 on 20 heterogeneous seeds (criterion 5)."""
    rows = []
    q = np.asarray([0.5])
    for s in range(20):
        cfg = DgpConfig(n_units=10000, n_covariates=4, covariate_law="uniform01",
                        baseline_spec={"name": "linear", "intercept": -0.6,
                                       "coefficients": [0.8, 0.0, 0.3, 0.0]},
                        effect_spec={"name": "linear", "intercept": 0.0,
                                     "slope": 1.8, "feature": 1},
                        batches=[(1.0, 0.5)], seed=95000 + s)
        data = generate_synthetic(cfg)
        folds = make_folds(data.n, 5, seed=95100 + s)
        scores = crossfit_nuisances(
            data, folds,
            ForestParams(n_trees=80, min_node_size=10, seed=95200 + s),
            threads=THREADS)
        row = {"tau_spread": float(np.quantile(data.tau_true, 0.9)
                                   - np.quantile(data.tau_true, 0.1))}
        for name in ("Oracle", "NonParametricCATE", "Random"):
            policy = build_policy(name, data, scores, seed=95300 + s)
            curve = policy_value_curve(policy, scores, data, q)
            row[name] = float(curve.value[0])
            if name == "Oracle":
                row["oracle_z"] = float(curve.delta_vs_random[0]
                                        / curve.se_delta[0])
                row["oracle_p"] = rate_autoc(policy, scores,
                                             seed=95400 + s).p_one_sided
        rows.append(row)
    return rows


@pytest.fixture(scope="session")
def calibration_sweep():
    """Calibration slopes under a lambda=1 redraw and permuted scores (criterion 7)."""
    cfg = DgpConfig(n_units=4000, n_covariates=3, covariate_law="uniform01",
                    baseline_spec={"name": "linear", "intercept": -0.7,
                                   "coefficients": [1.1, 0.4, 0.0]},
                    effect_spec={"name": "linear", "intercept": -0.2,
                                 "slope": 1.6, "feature": 1},
                    batches=[(1.0, 0.5)], seed=81000)
    base = generate_synthetic(cfg)
    f_tilde, g_tilde, _ = effect_log_odds(base.f_true, base.tau_true)
    mean_g = float(np.mean(g_tilde))
    redrawn_results, permuted_results = [], []
    for s in range(20):
        spec = RedrawSpec(lam=1.0, base_f_tilde=f_tilde, base_g_tilde=g_tilde,
                          mean_g_tilde=mean_g, seed=82000 + s)
        dd = semisynthetic_redraw(base, spec)
        folds = make_folds(dd.n, 5, seed=83000 + s)
        scores = crossfit_nuisances(
            dd, folds,
            ForestParams(n_trees=100, min_node_size=10, seed=84000 + s),
            threads=THREADS)
        cal = calibration_regression(dd, scores)
        redrawn_results.append((cal.slope, cal.se))

        rng = np.random.default_rng(85000 + s)
        tau_perm = scores.tau_hat[rng.permutation(dd.n)]
        gamma_perm = aipw_score(dd.outcome, dd.treatment, scores.f_hat,
                                tau_perm, scores.p_hat)
        perm_scores = AipwScoreSet(gamma=gamma_perm, f_hat=scores.f_hat,
                                   tau_hat=tau_perm, p_hat=scores.p_hat,
                                   fold=scores.fold)
        cal_p = calibration_regression(dd, perm_scores)
        permuted_results.append((cal_p.slope, cal_p.se))
    return {"redrawn": redrawn_results, "permuted": permuted_results}


@pytest.fixture(scope="session")
def gates_null_sweep():
    """GATES pairwise z-statistics on 50 constant-effect seeds (criterion 8)."""
    base = 70000
    zs = []
    for s in range(50):
        cfg = DgpConfig(n_units=2000, n_covariates=3, covariate_law="uniform01",
                        baseline_spec={"name": "linear", "intercept": -0.4,
                                       "coefficients": [0.5, -0.3, 0.2]},
                        effect_spec={"name": "zero"},
                        batches=[(1.0, 0.5)], seed=base + s)
        data = generate_synthetic(cfg)
        folds = make_folds(data.n, 5, seed=base + 1000 + s)
        scores = crossfit_nuisances(
            data, folds,
            ForestParams(n_trees=150, min_node_size=25,
                         subsample_fraction=0.35, seed=base + 2000 + s),
            threads=THREADS)
        g = gates(data, scores, 4)
        zs.append(np.abs(g.pairwise_diff / g.pairwise_se))
    return np.array(zs)  # (50, 4, 4) with NaN above the diagonal


@pytest.fixture(scope="session")
def simulation_run():
    """Heterogeneity-dial study at desk scale (criterion 9)."""
    coefs = [1.2] + [0.0] * 9
    cfg = DgpConfig(n_units=5000, n_covariates=10, covariate_law="uniform01",
                    baseline_spec={"name": "linear", "intercept": -1.55,
                                   "coefficients": coefs},
                    effect_spec={"name": "linear", "intercept": 0.15,
                                 "slope": 0.4, "feature": 1},
                    batches=[(1.0, 0.5)], seed=90001)
    data = generate_synthetic(cfg)
    return simulation_study(
        data, data.f_true, data.tau_true, lambdas=[0.0, 0.5, 3.0], n_draws=20,
        policies=("LogitFromBaseline", "NonParametricCATE", "HybridLogit"),
        n_folds=10, forest_params=ForestParams(n_trees=80, min_node_size=10,
                                               seed=1),
        seed=90002, threads=THREADS)
