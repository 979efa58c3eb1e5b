"""Link functions, IRLS logistic regression, folds, AIPW scores, and ATEs.

The doubly-robust score for unit i is
    gamma_i = tau(x_i) + (t_i - p_i) / (p_i (1 - p_i)) * (y_i - fhat_{t_i}(x_i))
with fhat_1 = f + (1-p) tau and fhat_0 = f - p tau built from the cross-fitted
baseline f and effect tau. With a known propensity the score is exactly
unbiased for the ATE no matter how poor f and tau are.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.special

from . import _seeds
from .dgp import Dataset
from .errors import CollinearityError, ConfigError, EstimationError
from .forest import (DEFAULT_REGRESSION_MIN_NODE, ForestParams,
                     fit_causal_forest, fit_regression_forest, predict_cate,
                     predict_regression)

LOGIT_EPS = 1e-6
PROPENSITY_BOUNDS = (0.01, 0.99)


def expit(z):
    """Inverse logit."""
    return scipy.special.expit(z)


def logit(p, eps=LOGIT_EPS):
    """Log odds of p after clipping to [eps, 1-eps]."""
    return scipy.special.logit(np.clip(p, eps, 1.0 - eps))


def clip_probabilities(p, lo, hi):
    """Clip into [lo, hi]; returns (clipped, number of values moved)."""
    p = np.asarray(p, dtype=np.float64)
    clipped = np.clip(p, lo, hi)
    return clipped, int((clipped != p).sum())


@dataclass
class FoldAssignment:
    n: int
    k: int
    fold_of: np.ndarray
    seed: int

    def validate(self):
        if self.fold_of.shape != (self.n,):
            raise ConfigError("fold_of must assign every unit")
        sizes = np.bincount(self.fold_of, minlength=self.k)
        if sizes.max() - sizes.min() > 1:
            raise ConfigError("fold sizes differ by more than 1")

    def test_mask(self, k):
        return self.fold_of == k

    def train_mask(self, k):
        return self.fold_of != k


def make_folds(n, k, seed) -> FoldAssignment:
    """Uniform random partition into k folds of near-equal size."""
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if k > n:
        raise ConfigError(f"cannot split {n} units into {k} folds")
    rng = _seeds.generator(seed, _seeds.FOLDS)
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int32)
    fold_of[perm] = np.arange(n) % k
    return FoldAssignment(n=n, k=k, fold_of=fold_of, seed=seed)


@dataclass
class LogitFit:
    coefficients: np.ndarray   # [intercept, beta_1, ..., beta_m]
    converged: bool
    iterations: int
    covariance: np.ndarray
    loglik_path: list = field(default_factory=list)

    def linear_predictor(self, features):
        x = _augment(np.asarray(features, dtype=np.float64))
        return x @ self.coefficients

    def predict_proba(self, features):
        return expit(self.linear_predictor(features))

    def standard_errors(self):
        return np.sqrt(np.diag(self.covariance))


def _augment(x):
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


def _check_rank(x):
    # SVD-based rank check; names the most involved columns on failure
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    if s[0] == 0.0 or s[-1] < 1e-10 * s[0]:
        v = np.abs(vt[-1])
        cols = np.argsort(v)[::-1][:2]
        names = ["intercept" if c == 0 else f"column {c - 1}" for c in sorted(cols)]
        raise CollinearityError(
            "design matrix is rank deficient; collinearity involves "
            + " and ".join(names))


def _log_likelihood(eta, y, w):
    p = np.clip(expit(eta), 1e-12, 1.0 - 1e-12)
    return float(np.sum(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def fit_logistic(features, y, sample_weights=None, max_iter=100, tol=1e-8) -> LogitFit:
    """Logistic regression by IRLS with step halving.

    Raises CollinearityError on rank-deficient designs; perfect separation
    surfaces as a non-converged fit (predictions are clipped by expit anyway).
    """
    y = np.asarray(y, dtype=np.float64)
    x = _augment(np.asarray(features, dtype=np.float64))
    n, m = x.shape
    if n <= m - 1:
        raise ConfigError(f"need more observations ({n}) than features ({m - 1})")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ConfigError("non-finite values in logistic regression inputs")
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights,
                                                             dtype=np.float64)
    _check_rank(x * np.sqrt(w)[:, None])

    beta = np.zeros(m)
    eta = x @ beta
    ll = _log_likelihood(eta, y, w)
    ll_path = [ll]
    converged = False
    it = 0
    ridge = 1e-8 * np.eye(m)
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = x.T @ (w * (y - p))
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        wt = w * p * (1.0 - p)
        hess = x.T @ (x * wt[:, None]) + ridge
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            eta_c = x @ cand
            ll_c = _log_likelihood(eta_c, y, w)
            if ll_c >= ll - 1e-10:
                beta, eta, ll = cand, eta_c, ll_c
                ll_path.append(ll)
                break
            scale *= 0.5
        else:
            break

    p = expit(eta)
    wt = w * p * (1.0 - p)
    info = x.T @ (x * wt[:, None]) + ridge
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((m, m), np.nan)
    return LogitFit(coefficients=beta, converged=converged, iterations=it,
                    covariance=cov, loglik_path=ll_path)


@dataclass
class AipwScoreSet:
    """Per-unit doubly-robust scores plus the nuisances that produced them."""

    gamma: np.ndarray
    f_hat: np.ndarray
    tau_hat: np.ndarray
    p_hat: np.ndarray
    fold: FoldAssignment
    propensity_mode: str = "known"
    clip_count: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.gamma.shape[0]

    def validate(self):
        for name in ("gamma", "f_hat", "tau_hat", "p_hat"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise EstimationError(f"{name} contains non-finite values")
        if ((self.p_hat <= 0) | (self.p_hat >= 1)).any():
            raise EstimationError("p_hat outside (0,1)")

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit", "gamma", "f_hat", "tau_hat", "p_hat", "fold"])
            for i in range(self.n):
                w.writerow([i,
                            format(self.gamma[i], ".17g"),
                            format(self.f_hat[i], ".17g"),
                            format(self.tau_hat[i], ".17g"),
                            format(self.p_hat[i], ".17g"),
                            int(self.fold.fold_of[i])])

    @classmethod
    def load_csv(cls, path, seed=0):
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != ["unit", "gamma", "f_hat", "tau_hat", "p_hat", "fold"]:
                raise ConfigError(f"unexpected score header in {path}")
            arr = np.array(list(r), dtype=np.float64)
        fold_of = arr[:, 5].astype(np.int32)
        fold = FoldAssignment(n=arr.shape[0], k=int(fold_of.max()) + 1,
                              fold_of=fold_of, seed=seed)
        return cls(gamma=arr[:, 1], f_hat=arr[:, 2], tau_hat=arr[:, 3],
                   p_hat=arr[:, 4], fold=fold)


def aipw_score(y, t, f_hat, tau_hat, p_hat):
    """The doubly-robust score display (see module docstring)."""
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    f1 = f_hat + (1.0 - p_hat) * tau_hat
    f0 = f_hat - p_hat * tau_hat
    f_t = np.where(t == 1.0, f1, f0)
    return tau_hat + (t - p_hat) / (p_hat * (1.0 - p_hat)) * (y - f_t)


def crossfit_nuisances(data: Dataset, folds: FoldAssignment,
                       params: ForestParams, propensity_mode="known",
                       baseline_params: ForestParams = None,
                       threads=1) -> AipwScoreSet:
    """Cross-fitted baseline, CATE, and propensity, assembled into AIPW scores.

    Per fold: the baseline forest is fitted on the control units of the other
    folds, the causal forest on all units of the other folds, and the
    propensity is either the batch design value ("known") or a logistic
    regression on covariates fitted on the other folds ("estimated").
    """
    if propensity_mode not in ("known", "estimated"):
        raise ConfigError(f"unknown propensity_mode {propensity_mode!r}")
    folds.validate()
    if folds.n != data.n:
        raise ConfigError("fold assignment does not match dataset size")
    if baseline_params is None:
        baseline_params = replace(params,
                                  min_node_size=DEFAULT_REGRESSION_MIN_NODE)

    n = data.n
    f_hat = np.empty(n)
    tau_hat = np.empty(n)
    p_hat = np.empty(n)
    clip_count = 0
    design = data.unit_propensity()

    for k in range(folds.k):
        train = folds.train_mask(k)
        test = folds.test_mask(k)
        t_train = data.treatment[train]
        if t_train.sum() == 0 or t_train.sum() == t_train.size:
            raise EstimationError(f"training complement of fold {k} lacks an arm")
        x_test = data.covariates[test]

        control_train = train & (data.treatment == 0)
        bp = replace(baseline_params,
                     seed=_seeds.derive_seed(params.seed,
                                             _seeds.NUISANCE_BASELINE, k))
        bmodel = fit_regression_forest(data, "outcome", control_train, bp,
                                       compute_oob=False, threads=threads)
        f_hat[test] = predict_regression(bmodel, x_test)

        cp = replace(params, seed=_seeds.derive_seed(params.seed,
                                                     _seeds.NUISANCE_CAUSAL, k))
        train_idx = np.nonzero(train)[0]
        cmodel = fit_causal_forest(data, cp, propensity=design[train_idx],
                                   subset=train_idx, compute_oob=False,
                                   threads=threads)
        tau_hat[test] = predict_cate(cmodel, x_test)

        if propensity_mode == "known":
            p_hat[test] = design[test]
        else:
            fit = fit_logistic(data.covariates[train], data.treatment[train])
            raw = fit.predict_proba(x_test)
            clipped, c = clip_probabilities(raw, *PROPENSITY_BOUNDS)
            p_hat[test] = clipped
            clip_count += c

    gamma = aipw_score(data.outcome, data.treatment, f_hat, tau_hat, p_hat)
    scores = AipwScoreSet(gamma=gamma, f_hat=f_hat, tau_hat=tau_hat,
                          p_hat=p_hat, fold=folds,
                          propensity_mode=propensity_mode,
                          clip_count=clip_count)
    scores.validate()
    return scores


def ate_mean_difference(data: Dataset):
    """Within-batch difference of arm means, batch-size weighted; unpooled SE."""
    n = data.n
    est = 0.0
    var = 0.0
    for b in range(len(data.design_propensity)):
        mask = data.batch == b
        nb = int(mask.sum())
        if nb == 0:
            continue
        t = data.treatment[mask]
        y = data.outcome[mask].astype(np.float64)
        n1 = int(t.sum())
        n0 = nb - n1
        if n1 == 0 or n0 == 0:
            raise EstimationError(f"batch {b} lacks a treatment arm")
        y1 = y[t == 1]
        y0 = y[t == 0]
        diff = y1.mean() - y0.mean()
        v1 = y1.var(ddof=1) if n1 > 1 else 0.0
        v0 = y0.var(ddof=1) if n0 > 1 else 0.0
        w = nb / n
        est += w * diff
        var += w * w * (v1 / n1 + v0 / n0)
    return est, float(np.sqrt(var))


def ate_aipw(scores: AipwScoreSet):
    """Mean of the doubly-robust scores with its plug-in standard error."""
    scores.validate()
    g = scores.gamma
    est = float(np.mean(g))
    sigma2 = float(np.mean((g - est) ** 2))
    return est, float(np.sqrt(sigma2 / g.shape[0]))
