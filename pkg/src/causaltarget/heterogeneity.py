"""Diagnostics for estimated CATE heterogeneity.

Calibration: per fold, regress y on
    {1, tau_i, (t_i - p) * mean(tau), (t_i - p) * (tau_i - mean(tau))}
and read the slope off the demeaned interaction; 1 under perfect calibration,
0 for pure noise. Fold slopes and robust SEs are aggregated by simple means.

GATES: within-fold quantile groups of the cross-fitted tau, group ATEs by
pooled means of the doubly-robust scores, pairwise one-sided tests.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .dgp import Dataset
from .errors import ConfigError, DegenerateScores, EstimationError
from .glm import AipwScoreSet

MIN_GROUP_PER_FOLD = 20


@dataclass
class CalibrationResult:
    slope: float
    se: float
    p_value_one_sided: float   # H0: slope <= 0
    per_fold: list             # of (slope, se)
    metadata: dict = field(default_factory=dict)


def _ols_robust(x, y, coef_index):
    """OLS coefficient and HC1 standard error for one regressor."""
    xtx = x.T @ x
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("singular calibration design") from exc
    beta = xtx_inv @ (x.T @ y)
    resid = y - x @ beta
    n, k = x.shape
    meat = (x * (resid ** 2)[:, None]).T @ x
    cov = xtx_inv @ meat @ xtx_inv * (n / max(n - k, 1))
    return float(beta[coef_index]), float(np.sqrt(cov[coef_index, coef_index]))


def calibration_regression(data: Dataset, scores: AipwScoreSet,
                           p=None) -> CalibrationResult:
    """Per-fold calibration slope of outcomes on demeaned CATE interactions."""
    if p is None:
        p = float(data.treatment.mean())
    folds = scores.fold
    per_fold = []
    for k in range(folds.k):
        mask = folds.test_mask(k)
        tau = scores.tau_hat[mask]
        if float(np.ptp(tau)) == 0.0:
            raise DegenerateScores(
                f"cross-fitted CATE estimates are constant in fold {k}")
        y = data.outcome[mask].astype(np.float64)
        t = data.treatment[mask].astype(np.float64)
        tau_bar = float(tau.mean())
        design = np.column_stack([
            np.ones(tau.shape[0]),
            tau,
            (t - p) * tau_bar,
            (t - p) * (tau - tau_bar),
        ])
        per_fold.append(_ols_robust(design, y, 3))

    slope = float(np.mean([s for s, _ in per_fold]))
    se = float(np.mean([e for _, e in per_fold]))
    pval = float(1.0 - ndtr(slope / se)) if se > 0 else float(slope <= 0)
    return CalibrationResult(
        slope=slope, se=se, p_value_one_sided=pval, per_fold=per_fold,
        metadata={"treatment_share": p,
                  "regression": "y ~ 1 + tau + (t-p)*tau_mean + (t-p)*(tau-tau_mean)",
                  "aggregation": "simple mean of per-fold slopes and SEs"})


@dataclass
class GatesResult:
    n_groups: int
    group_ate: list            # of (estimate, se)
    group_n: np.ndarray
    group_bounds: list         # per fold, the (n_groups - 1) interior cutoffs
    pairwise_diff: np.ndarray  # [hi, lo] filled for hi > lo
    pairwise_se: np.ndarray
    pairwise_p: np.ndarray     # one-sided, H0: ate_hi - ate_lo <= 0
    group_of: np.ndarray


def _group_ranks(tau, n_groups):
    # stable rank by (tau, position): sizes differ by at most one
    order = np.lexsort((np.arange(tau.shape[0]), tau))
    rank = np.empty(tau.shape[0], dtype=np.int64)
    rank[order] = np.arange(tau.shape[0])
    return (rank * n_groups) // tau.shape[0]


def gates(data: Dataset, scores: AipwScoreSet, n_groups=4) -> GatesResult:
    """Sorted group ATEs over within-fold quantiles of the cross-fitted CATE."""
    if n_groups < 1:
        raise ConfigError("n_groups must be >= 1")
    folds = scores.fold
    n = scores.n
    group_of = np.empty(n, dtype=np.int64)
    group_bounds = []
    for k in range(folds.k):
        mask = folds.test_mask(k)
        tau = scores.tau_hat[mask]
        if n_groups > 1 and tau.shape[0] // n_groups < MIN_GROUP_PER_FOLD:
            raise ConfigError(
                f"fold {k} allows only {tau.shape[0] // n_groups} units per "
                f"group; need at least {MIN_GROUP_PER_FOLD}")
        g = _group_ranks(tau, n_groups)
        group_of[mask] = g
        cutoffs = [float(np.max(tau[g == i])) for i in range(n_groups - 1)]
        group_bounds.append(cutoffs)

    group_ate = []
    group_n = np.zeros(n_groups, dtype=np.int64)
    for g in range(n_groups):
        gam = scores.gamma[group_of == g]
        group_n[g] = gam.shape[0]
        est = float(np.mean(gam))
        se = float(np.sqrt(np.mean((gam - est) ** 2) / gam.shape[0]))
        group_ate.append((est, se))

    diff = np.full((n_groups, n_groups), np.nan)
    dse = np.full((n_groups, n_groups), np.nan)
    dp = np.full((n_groups, n_groups), np.nan)
    for hi in range(n_groups):
        for lo in range(hi):
            d = group_ate[hi][0] - group_ate[lo][0]
            s = float(np.sqrt(group_ate[hi][1] ** 2 + group_ate[lo][1] ** 2))
            diff[hi, lo] = d
            dse[hi, lo] = s
            dp[hi, lo] = float(1.0 - ndtr(d / s)) if s > 0 else float(d <= 0)
    return GatesResult(n_groups=n_groups, group_ate=group_ate, group_n=group_n,
                       group_bounds=group_bounds, pairwise_diff=diff,
                       pairwise_se=dse, pairwise_p=dp, group_of=group_of)


@dataclass
class GroupComparison:
    by_flag: dict      # {1: (est, se), 0: (est, se)}
    by_cate: dict      # {"above": (est, se), "below": (est, se)}
    cutoff: float
    n_flagged: int


def _aipw_group(gamma, mask):
    g = gamma[mask]
    if g.shape[0] == 0:
        raise EstimationError("empty comparison group")
    est = float(np.mean(g))
    return est, float(np.sqrt(np.mean((g - est) ** 2) / g.shape[0]))


def group_comparison(data: Dataset, scores: AipwScoreSet,
                     flag) -> GroupComparison:
    """Group ATEs by a binary covariate vs by tau above/below its prevalence.

    The CATE split selects exactly as many top-tau units as there are flagged
    units (ties broken by unit index), matching the two group sizes.
    """
    flag = np.asarray(flag).astype(np.int64)
    if flag.shape != (scores.n,):
        raise ConfigError("flag must have one value per unit")
    if not np.isin(flag, (0, 1)).all():
        raise ConfigError("flag must be binary")
    n1 = int(flag.sum())
    if n1 == 0 or n1 == flag.shape[0]:
        raise ConfigError("flag is constant")

    tau = scores.tau_hat
    order = np.lexsort((np.arange(tau.shape[0]), -tau))
    top = order[:n1]
    above = np.zeros(tau.shape[0], dtype=bool)
    above[top] = True
    cutoff = float(tau[top].min())

    return GroupComparison(
        by_flag={1: _aipw_group(scores.gamma, flag == 1),
                 0: _aipw_group(scores.gamma, flag == 0)},
        by_cate={"above": _aipw_group(scores.gamma, above),
                 "below": _aipw_group(scores.gamma, ~above)},
        cutoff=cutoff,
        n_flagged=n1,
    )
