"""Scoring policies, AIPW policy-value curves, RATE tests, and the
heterogeneity-dial simulation study.

A policy is a per-unit priority score (higher treated first). Curves report,
per treated fraction q, the estimated population outcome
    U(pi) = U(random at q) + mean((pi_i - q) * gamma_i)
with U(random at q) = control-mean + q * mean(gamma), all computed per fold
on within-fold rankings and aggregated across folds.

The simulation study re-draws outcomes under
    logit P(Y=1 | x, t) = f~ + (lambda (g~ - mean g~) + mean g~) t,
re-runs the full cross-fitted pipeline per draw, and evaluates policies
against the known simulated effects.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from . import _seeds
from .dgp import Dataset, RedrawSpec, semisynthetic_redraw
from .errors import ConfigError, EstimationError
from .forest import (ForestParams, fit_causal_forest, fit_regression_forest,
                     predict_cate, predict_regression)
from .glm import (LOGIT_EPS, AipwScoreSet, clip_probabilities,
                  crossfit_nuisances, expit, fit_logistic, logit, make_folds)

POLICY_NAMES = (
    "NonParametricCATE",
    "NegativeBaseline",
    "PositiveBaseline",
    "LogitFromBaseline",
    "HybridLogit",
    "CateFromBaseline",
    "CateFromBaselineAndCate",
    "PredictedFlag",
    "Oracle",
    "Random",
)

DEFAULT_Q_GRID = tuple(j / 20 for j in range(21))


@dataclass
class ScoringPolicy:
    name: str
    score: np.ndarray          # higher = treated earlier
    metadata: dict = field(default_factory=dict)

    def validate(self):
        if not np.isfinite(self.score).all():
            raise EstimationError(f"policy {self.name} has non-finite scores")


@dataclass
class PolicyCurve:
    policy_name: str
    q_grid: np.ndarray
    value: np.ndarray
    value_random: np.ndarray
    delta_vs_random: np.ndarray
    se_delta: np.ndarray
    per_fold_values: np.ndarray        # (k, len(q_grid))
    per_fold_control_mean: np.ndarray
    per_fold_gamma_mean: np.ndarray
    metadata: dict = field(default_factory=dict)


@dataclass
class RateResult:
    autoc: float
    se: float
    p_one_sided: float
    toc_grid: np.ndarray
    toc_curve: np.ndarray
    metadata: dict = field(default_factory=dict)


# --- policy construction ---

def logit_probability_difference(coef, f_tilde):
    """Implied effect of the baseline-only logit: coef = [a, a_f, b]."""
    a, a_f, b = coef
    eta0 = a + a_f * f_tilde
    return expit(eta0 + b) - expit(eta0)


def hybrid_probability_difference(coef, f_tilde, g_tilde):
    """Implied effect of the hybrid logit: coef = [a, a_f, a_g, b, b_f, b_g]."""
    a, a_f, a_g, b, b_f, b_g = coef
    eta0 = a + a_f * f_tilde + a_g * g_tilde
    eta1 = eta0 + b + b_f * f_tilde + b_g * g_tilde
    return expit(eta1) - expit(eta0)


def effect_log_odds(f_hat, tau_hat, eps=LOGIT_EPS):
    """g~ = logit(f + tau) - logit(f) with unit-interval clipping.

    Returns (f_tilde, g_tilde, n_clipped).
    """
    f0, c0 = clip_probabilities(f_hat, eps, 1.0 - eps)
    f1, c1 = clip_probabilities(f_hat + tau_hat, eps, 1.0 - eps)
    f_tilde = logit(f0, eps)
    g_tilde = logit(f1, eps) - f_tilde
    return f_tilde, g_tilde, c0 + c1


def _fold_logit_scores(data, folds, design_fn, score_fn):
    """Fit a treatment-interacted logit per training complement, score the fold."""
    n = data.n
    out = np.empty(n)
    fits = []
    for k in range(folds.k):
        train = folds.train_mask(k)
        test = folds.test_mask(k)
        x = design_fn(train)
        fit = fit_logistic(x, data.outcome[train].astype(np.float64))
        fits.append({"coefficients": fit.coefficients.tolist(),
                     "converged": fit.converged})
        out[test] = score_fn(fit.coefficients, test)
    return out, fits


def _strong_forest_params(n, seed):
    return ForestParams(n_trees=500, subsample_fraction=0.5,
                        honesty_fraction=0.5,
                        min_node_size=max(200, n // 50), max_depth=None,
                        mtry=None, seed=seed)


def _fold_cate_forest_scores(data, scores, folds, feature_cols, params, seed,
                             tag, threads):
    """Cross-fitted causal forest on derived features (strong regularization)."""
    n = data.n
    feats = np.ascontiguousarray(np.column_stack(feature_cols))
    out = np.empty(n)
    for k in range(folds.k):
        train = np.nonzero(folds.train_mask(k))[0]
        test = folds.test_mask(k)
        sub = Dataset(covariates=np.ascontiguousarray(feats[train]),
                      treatment=data.treatment[train],
                      outcome=data.outcome[train],
                      batch=data.batch[train],
                      design_propensity=data.design_propensity)
        p = params if params is not None else _strong_forest_params(
            n, _seeds.derive_seed(seed, _seeds.POLICY_FOREST, tag, k))
        if params is not None:
            p = replace(params, seed=_seeds.derive_seed(
                params.seed, _seeds.POLICY_FOREST, tag, k))
        model = fit_causal_forest(sub, p, propensity=scores.p_hat[train],
                                  compute_oob=False, threads=threads)
        out[test] = predict_cate(model, feats[test])
    return out, p


def build_policy(name, data: Dataset, scores: AipwScoreSet, folds=None,
                 seed=0, aux_flag=None, forest_params=None,
                 threads=1) -> ScoringPolicy:
    """Construct one of the named scoring policies from cross-fitted nuisances.

    Every unit's score derives only from models fitted without its fold.
    """
    if name not in POLICY_NAMES:
        raise ConfigError(f"unknown policy {name!r}; choose from {POLICY_NAMES}")
    if folds is None:
        folds = scores.fold
    meta = {"policy": name}

    if name == "NonParametricCATE":
        score = scores.tau_hat.copy()
    elif name == "NegativeBaseline":
        score = -scores.f_hat
    elif name == "PositiveBaseline":
        score = scores.f_hat.copy()
    elif name == "Oracle":
        if not data.has_truth:
            raise ConfigError("Oracle policy requires ground-truth effects")
        score = data.tau_true.copy()
    elif name == "Random":
        rng = _seeds.generator(seed, _seeds.POLICY_RANDOM)
        score = rng.permutation(data.n).astype(np.float64)
        meta["seed"] = seed
    elif name == "LogitFromBaseline":
        clipped, n_clip = clip_probabilities(scores.f_hat, LOGIT_EPS,
                                             1.0 - LOGIT_EPS)
        f_tilde = logit(clipped)
        meta["clipped"] = n_clip

        def design(train):
            return np.column_stack([f_tilde[train],
                                    data.treatment[train].astype(np.float64)])

        def score_fn(coef, test):
            return logit_probability_difference(coef, f_tilde[test])

        score, fits = _fold_logit_scores(data, folds, design, score_fn)
        meta["fold_fits"] = fits
    elif name == "HybridLogit":
        f_tilde, g_tilde, n_clip = effect_log_odds(scores.f_hat, scores.tau_hat)
        meta["clipped"] = n_clip

        def design(train):
            t = data.treatment[train].astype(np.float64)
            f = f_tilde[train]
            g = g_tilde[train]
            return np.column_stack([f, g, t, t * f, t * g])

        def score_fn(coef, test):
            return hybrid_probability_difference(coef, f_tilde[test],
                                                 g_tilde[test])

        score, fits = _fold_logit_scores(data, folds, design, score_fn)
        meta["fold_fits"] = fits
    elif name == "CateFromBaseline":
        score, used = _fold_cate_forest_scores(
            data, scores, folds, [scores.f_hat], forest_params, seed, 1, threads)
        meta["forest_min_node_size"] = used.min_node_size
        meta["forest_n_trees"] = used.n_trees
    elif name == "CateFromBaselineAndCate":
        score, used = _fold_cate_forest_scores(
            data, scores, folds, [scores.f_hat, scores.tau_hat],
            forest_params, seed, 2, threads)
        meta["forest_min_node_size"] = used.min_node_size
        meta["forest_n_trees"] = used.n_trees
    elif name == "PredictedFlag":
        if aux_flag is None:
            raise ConfigError("PredictedFlag policy requires an auxiliary flag")
        flag = np.asarray(aux_flag, dtype=np.float64)
        if flag.shape != (data.n,):
            raise ConfigError("aux_flag must have one value per unit")
        score = np.empty(data.n)
        for k in range(folds.k):
            train = np.nonzero(folds.train_mask(k))[0]
            test = folds.test_mask(k)
            p = forest_params if forest_params is not None else ForestParams(
                n_trees=500, seed=0)
            p = replace(p, seed=_seeds.derive_seed(
                p.seed if forest_params is not None else seed,
                _seeds.POLICY_FOREST, 3, k))
            model = fit_regression_forest(data, flag, train, p,
                                          compute_oob=False, threads=threads)
            score[test] = predict_regression(model, data.covariates[test])
    else:  # pragma: no cover
        raise ConfigError(name)

    policy = ScoringPolicy(name=name, score=score, metadata=meta)
    policy.validate()
    return policy


def make_aux_flag(data: Dataset, prevalence=0.5, noise=0.1, seed=0):
    """Synthetic binary flag correlated with the true effect.

    Flags the top `prevalence` fraction by true tau, then flips each label
    with probability `noise`.
    """
    if not data.has_truth:
        raise ConfigError("aux flag construction requires ground truth")
    n = data.n
    m = int(np.floor(prevalence * n + 0.5))
    order = np.lexsort((np.arange(n), -data.tau_true))
    flag = np.zeros(n, dtype=np.int64)
    flag[order[:m]] = 1
    rng = _seeds.generator(seed, _seeds.AUX_FLAG)
    flips = rng.random(n) < noise
    flag[flips] = 1 - flag[flips]
    return flag


# --- policy value curves ---

def _treated_at_fraction(score, unit_ids, q):
    """Indices (into the fold arrays) of the round(q * n_fold) top-ranked units."""
    m = int(np.floor(q * score.shape[0] + 0.5))
    order = np.lexsort((unit_ids, -score))
    return order[:m]


def _hajek_control_mean(y, t, p_hat):
    w = (1.0 - t) / (1.0 - p_hat)
    denom = float(np.sum(w))
    if denom == 0.0:
        raise EstimationError("no control units in fold")
    return float(np.sum(w * y) / denom)


def policy_value_curve(policy: ScoringPolicy, scores: AipwScoreSet,
                       data: Dataset, q_grid=None) -> PolicyCurve:
    """AIPW policy-value curve vs the random benchmark, per-fold rankings.

    Fold estimates are averaged unweighted; variances combine with fold-size
    weights. The random benchmark is computed analytically (no extra
    randomization).
    """
    if q_grid is None:
        q_grid = DEFAULT_Q_GRID
    q_grid = np.asarray(q_grid, dtype=np.float64)
    if (q_grid < 0).any() or (q_grid > 1).any():
        raise ConfigError("q_grid values must lie in [0, 1]")
    folds = scores.fold
    if policy.score.shape != (scores.n,):
        raise ConfigError("policy and scores cover different units")

    nq = q_grid.shape[0]
    k = folds.k
    per_fold_values = np.empty((k, nq))
    per_fold_random = np.empty((k, nq))
    per_fold_delta = np.empty((k, nq))
    per_fold_var = np.empty((k, nq))
    fold_sizes = np.empty(k)
    per_fold_cmean = np.empty(k)
    per_fold_gmean = np.empty(k)

    for kk in range(k):
        mask = folds.test_mask(kk)
        idx = np.nonzero(mask)[0]
        n_k = idx.size
        if n_k == 0:
            raise EstimationError(f"fold {kk} is empty")
        fold_sizes[kk] = n_k
        y = data.outcome[idx].astype(np.float64)
        t = data.treatment[idx].astype(np.float64)
        g = scores.gamma[idx]
        s = policy.score[idx]
        cmean = _hajek_control_mean(y, t, scores.p_hat[idx])
        gmean = float(np.mean(g))
        per_fold_cmean[kk] = cmean
        per_fold_gmean[kk] = gmean
        for j, q in enumerate(q_grid):
            pi = np.zeros(n_k)
            pi[_treated_at_fraction(s, idx, q)] = 1.0
            contrib = (pi - q) * g
            delta = float(np.mean(contrib))
            per_fold_random[kk, j] = cmean + q * gmean
            per_fold_delta[kk, j] = delta
            per_fold_values[kk, j] = per_fold_random[kk, j] + delta
            per_fold_var[kk, j] = float(np.mean((contrib - delta) ** 2) / n_k)

    value_random = per_fold_random.mean(axis=0)
    delta = per_fold_delta.mean(axis=0)
    value = value_random + delta
    w = (fold_sizes / fold_sizes.sum()) ** 2
    se = np.sqrt((per_fold_var * w[:, None]).sum(axis=0))
    return PolicyCurve(policy_name=policy.name, q_grid=q_grid, value=value,
                       value_random=value_random, delta_vs_random=delta,
                       se_delta=se, per_fold_values=per_fold_values,
                       per_fold_control_mean=per_fold_cmean,
                       per_fold_gamma_mean=per_fold_gmean,
                       metadata={"folds": k, "policy": policy.name})


def simple_difference_value(policy: ScoringPolicy, data: Dataset, q):
    """Arm-mean cross-check of the policy value at fraction q.

    U = sum(T pi Y) / sum(T) + sum((1-T)(1-pi) Y) / sum(1-T); equals the AIPW
    estimator when the nuisances are zeroed and the propensity is the treated
    share.
    """
    if not (0.0 <= q <= 1.0):
        raise ConfigError("q must lie in [0, 1]")
    n = data.n
    pi = np.zeros(n)
    pi[_treated_at_fraction(policy.score, np.arange(n), q)] = 1.0
    t = data.treatment.astype(np.float64)
    y = data.outcome.astype(np.float64)
    n1 = float(t.sum())
    n0 = float(n - n1)
    if n1 == 0 or n0 == 0:
        raise EstimationError("need both treatment arms")
    return float(np.sum(t * pi * y) / n1 + np.sum((1.0 - t) * (1.0 - pi) * y) / n0)


# --- RATE / AUTOC ---

def _ranked_gamma(score, gamma, unit_ids):
    order = np.lexsort((unit_ids, -score))
    return gamma[order]


def _autoc_from_ranked(g_sorted):
    n = g_sorted.shape[0]
    csum = np.cumsum(g_sorted)
    top_means = csum / np.arange(1.0, n + 1.0)
    return float(np.mean(top_means - csum[-1] / n))


def autoc_rank_weights(n):
    """Per-rank weights w with AUTOC = mean(w * gamma_ranked)."""
    rev_inv_rank = 1.0 / np.arange(n, 0, -1)
    return np.flip(np.cumsum(rev_inv_rank)) - 1.0


def toc_curve(policy: ScoringPolicy, scores: AipwScoreSet, q_grid=None):
    """TOC(q) = mean of gamma over the top-q ranked units minus mean(gamma)."""
    if q_grid is None:
        q_grid = DEFAULT_Q_GRID
    q_grid = np.asarray(q_grid, dtype=np.float64)
    n = scores.n
    g_sorted = _ranked_gamma(policy.score, scores.gamma, np.arange(n))
    gbar = float(np.mean(g_sorted))
    out = np.empty(q_grid.shape[0])
    for j, q in enumerate(q_grid):
        k = min(n, max(1, int(np.floor(q * n + 0.5))))
        out[j] = float(np.mean(g_sorted[:k])) - gbar
    return out


def rate_autoc(policy: ScoringPolicy, scores: AipwScoreSet, n_boot=200,
               seed=0, q_grid=None) -> RateResult:
    """AUTOC omnibus test with a half-sample bootstrap standard error."""
    n = scores.n
    if float(np.var(policy.score)) == 0.0:
        raise EstimationError(f"policy {policy.name} has constant scores")
    units = np.arange(n)
    autoc = _autoc_from_ranked(_ranked_gamma(policy.score, scores.gamma, units))

    rng = _seeds.generator(seed, _seeds.RATE_BOOTSTRAP)
    half = n // 2
    reps = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.choice(n, size=half, replace=False)
        reps[b] = _autoc_from_ranked(
            _ranked_gamma(policy.score[idx], scores.gamma[idx], idx))
    se = float(np.std(reps, ddof=1))
    p = float(1.0 - ndtr(autoc / se)) if se > 0 else float(autoc <= 0)
    if q_grid is None:
        q_grid = DEFAULT_Q_GRID
    q_grid = np.asarray(q_grid, dtype=np.float64)
    return RateResult(autoc=autoc, se=se, p_one_sided=p, toc_grid=q_grid,
                      toc_curve=toc_curve(policy, scores, q_grid),
                      metadata={"n_boot": n_boot, "seed": seed,
                                "se_method": "half-sample bootstrap"})


# --- simulation study ---

@dataclass
class SimulationResult:
    lambdas: list
    q_grid: np.ndarray
    policies: list
    draw_values: dict      # lambda -> policy -> (n_draws, nq) true-value array
    metadata: dict = field(default_factory=dict)

    def mean_values(self, lam, policy):
        return self.draw_values[lam][policy].mean(axis=0)

    def median_values(self, lam, policy):
        return np.median(self.draw_values[lam][policy], axis=0)


def _true_policy_value(score, fold, q_grid, f_true, tau_true):
    """Population value under known effects, pi from within-fold rankings."""
    n = score.shape[0]
    base = float(np.mean(f_true))
    out = np.empty(q_grid.shape[0])
    for j, q in enumerate(q_grid):
        pi = np.zeros(n)
        for k in range(fold.k):
            idx = np.nonzero(fold.test_mask(k))[0]
            pi[idx[_treated_at_fraction(score[idx], idx, q)]] = 1.0
        out[j] = base + float(np.mean(pi * tau_true))
    return out


def simulation_study(data: Dataset, f_hat, tau_hat, lambdas, n_draws=20,
                     policies=("LogitFromBaseline", "NonParametricCATE",
                               "HybridLogit"),
                     q_grid=None, n_folds=10, forest_params=None,
                     baseline_params=None, seed=0, threads=1,
                     evaluation="truth", include_oracle=True,
                     include_random=True) -> SimulationResult:
    """Re-draw outcomes per lambda, re-run the pipeline, evaluate vs truth.

    `f_hat`/`tau_hat` are the plug-in redraw inputs (forest estimates or, on
    synthetic data, the true functions). With evaluation="truth" (the
    default) policy values are computed from the known simulated effects;
    "aipw" evaluates with the estimated scores instead.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ConfigError("lambdas must be a non-empty list")
    if n_draws < 1:
        raise ConfigError("n_draws must be >= 1")
    if evaluation not in ("truth", "aipw"):
        raise ConfigError(f"unknown evaluation mode {evaluation!r}")
    for name in policies:
        if name in ("Oracle", "Random"):
            continue
        if name == "PredictedFlag":
            raise ConfigError("PredictedFlag is not available in the "
                              "simulation study (no auxiliary flag)")
        if name not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {name!r}")
    if q_grid is None:
        q_grid = DEFAULT_Q_GRID
    q_grid = np.asarray(q_grid, dtype=np.float64)
    if forest_params is None:
        forest_params = ForestParams(n_trees=500, min_node_size=10, seed=seed)

    f_hat = np.asarray(f_hat, dtype=np.float64)
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    f_tilde, g_tilde, n_clip = effect_log_odds(f_hat, tau_hat)
    mean_g = float(np.mean(g_tilde))

    all_policies = [p for p in policies if p not in ("Oracle", "Random")]
    if include_oracle or "Oracle" in policies:
        all_policies.append("Oracle")
    if include_random or "Random" in policies:
        all_policies.append("Random")

    folds = make_folds(data.n, n_folds, _seeds.derive_seed(seed, _seeds.SIM_FOLDS))
    draw_values = {lam: {p: np.empty((n_draws, q_grid.shape[0]))
                         for p in all_policies} for lam in lambdas}

    for i, lam in enumerate(lambdas):
        for j in range(n_draws):
            spec = RedrawSpec(lam=float(lam), base_f_tilde=f_tilde,
                              base_g_tilde=g_tilde, mean_g_tilde=mean_g,
                              seed=_seeds.derive_seed(seed, _seeds.REDRAW, i, j))
            redrawn = semisynthetic_redraw(data, spec)
            fp = replace(forest_params,
                         seed=_seeds.derive_seed(seed, _seeds.REDRAW, i, j, 1))
            scores = crossfit_nuisances(redrawn, folds, fp,
                                        propensity_mode="known",
                                        baseline_params=baseline_params,
                                        threads=threads)
            for name in all_policies:
                if name == "Random" and evaluation == "truth":
                    # analytic benchmark line, no extra randomization
                    draw_values[lam][name][j] = (
                        float(np.mean(redrawn.f_true))
                        + q_grid * float(np.mean(redrawn.tau_true)))
                    continue
                pol = build_policy(name, redrawn, scores, folds,
                                   seed=_seeds.derive_seed(seed, _seeds.REDRAW,
                                                           i, j, 2),
                                   threads=threads)
                if evaluation == "truth":
                    vals = _true_policy_value(pol.score, folds, q_grid,
                                              redrawn.f_true, redrawn.tau_true)
                else:
                    curve = policy_value_curve(pol, scores, redrawn, q_grid)
                    vals = curve.value
                draw_values[lam][name][j] = vals

    return SimulationResult(
        lambdas=lambdas, q_grid=q_grid, policies=all_policies,
        draw_values=draw_values,
        metadata={"n_draws": n_draws, "evaluation": evaluation,
                  "redraw_propensity": 0.5, "clipped_inputs": n_clip,
                  "seed": seed, "n_folds": n_folds})
