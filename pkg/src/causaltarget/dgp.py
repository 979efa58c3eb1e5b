"""Synthetic trial data with known ground truth, plus the semi-synthetic redraw.

Outcomes follow logit P(Y=1 | x, t) = a(x) + b(x) * t, with a and b drawn
from small named catalogs, so every generated unit carries its true baseline
probability f(x) = expit(a(x)) and true effect tau(x) = expit(a+b) - expit(a).

The redraw keeps a sample's covariates, re-randomizes treatment with
probability 0.5, and re-draws outcomes from
logit P(Y=1 | x, t) = f~(x) + (lambda * (g~(x) - mean g~) + mean g~) * t,
where lambda scales treatment-effect heterogeneity on the log-odds scale.

All randomness is counter-based (numpy Philox keyed by the seed, one row of
uniform draws per unit), so generation is deterministic and order-independent.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtri

from .errors import ConfigError

COVARIATE_LAWS = ("uniform01", "standard_normal", "mixed_binary_continuous")

_SEED_MASK = (1 << 63) - 1


# --- baseline catalog: a(x) on the logit scale ---

def _baseline_linear(x, p):
    coef = np.asarray(p["coefficients"], dtype=np.float64)
    if coef.shape != (x.shape[1],):
        raise ConfigError(
            f"baseline 'linear' needs {x.shape[1]} coefficients, got {coef.shape}")
    return p["intercept"] + x @ coef


def _baseline_step(x, p):
    f = int(p.get("feature", 0))
    return p["intercept"] + p["jump"] * (x[:, f] > p["threshold"])


def _baseline_sinusoidal(x, p):
    f = int(p.get("feature", 0))
    return p["intercept"] + p["amplitude"] * np.sin(p["frequency"] * x[:, f])


def _baseline_interaction(x, p):
    i, j = (int(v) for v in p.get("features", (0, 1)))
    return p["intercept"] + p["scale"] * x[:, i] * x[:, j]


_BASELINE_CATALOG = {
    "linear": (_baseline_linear, {"intercept", "coefficients"}),
    "step": (_baseline_step, {"intercept", "jump", "threshold", "feature"}),
    "sinusoidal": (_baseline_sinusoidal,
                   {"intercept", "amplitude", "frequency", "feature"}),
    "interaction": (_baseline_interaction, {"intercept", "scale", "features"}),
}


# --- effect catalog: b(x) on the logit scale, may depend on a(x) ---

def _effect_zero(x, a, p):
    return np.zeros(x.shape[0])


def _effect_constant(x, a, p):
    return np.full(x.shape[0], float(p["value"]))


def _effect_linear(x, a, p):
    f = int(p.get("feature", 0))
    return p["intercept"] + p["slope"] * x[:, f]


def _effect_u_shape(x, a, p):
    # log-odds effect largest at intermediate baselines: 4 f (1-f) peaks at 1
    f = expit(a)
    return p["base"] + p["scale"] * 4.0 * f * (1.0 - f)


_EFFECT_CATALOG = {
    "zero": (_effect_zero, set()),
    "constant": (_effect_constant, {"value"}),
    "linear": (_effect_linear, {"intercept", "slope", "feature"}),
    "u_shape_in_baseline": (_effect_u_shape, {"base", "scale"}),
}


def _eval_spec(catalog, spec, kind):
    name = spec.get("name")
    if name not in catalog:
        raise ConfigError(f"unknown {kind} spec {name!r}; catalog: "
                          + ", ".join(sorted(catalog)))
    fn, allowed = catalog[name]
    extra = set(spec) - allowed - {"name"}
    if extra:
        raise ConfigError(f"{kind} spec {name!r}: unknown keys {sorted(extra)}")
    return fn


@dataclass
class DgpConfig:
    """Generator configuration; see module docstring for the outcome model."""

    n_units: int
    n_covariates: int
    covariate_law: str
    baseline_spec: dict
    effect_spec: dict
    batches: list  # of (size_fraction, treat_propensity)
    seed: int

    def __post_init__(self):
        self.batches = [
            (float(b["fraction"]), float(b["propensity"])) if isinstance(b, dict)
            else (float(b[0]), float(b[1]))
            for b in self.batches
        ]

    def validate(self):
        if self.n_units <= 0:
            raise ConfigError("n_units must be positive")
        if self.n_covariates <= 0:
            raise ConfigError("n_covariates must be positive")
        if self.covariate_law not in COVARIATE_LAWS:
            raise ConfigError(f"unknown covariate_law {self.covariate_law!r}")
        if not self.batches:
            raise ConfigError("at least one batch required")
        total = sum(f for f, _ in self.batches)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"batch size_fractions sum to {total!r}, expected 1")
        for _, p in self.batches:
            if not (0.0 < p < 1.0):
                raise ConfigError(f"treat_propensity {p!r} outside (0,1)")
        _eval_spec(_BASELINE_CATALOG, self.baseline_spec, "baseline")
        _eval_spec(_EFFECT_CATALOG, self.effect_spec, "effect")

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({
                "n_units": self.n_units,
                "n_covariates": self.n_covariates,
                "covariate_law": self.covariate_law,
                "baseline_spec": self.baseline_spec,
                "effect_spec": self.effect_spec,
                "batches": [{"fraction": f, "propensity": p}
                            for f, p in self.batches],
                "seed": self.seed,
            }, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {"n_units", "n_covariates", "covariate_law", "baseline_spec",
                 "effect_spec", "batches", "seed"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown DgpConfig keys: {sorted(extra)}")
        return cls(**raw)


@dataclass
class Dataset:
    """One analysis sample: covariates, binary treatment/outcome, batch ids.

    `design_propensity[b]` is the probability of treatment in batch b. Truth
    columns are present iff the data were generated synthetically.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    batch: np.ndarray
    design_propensity: np.ndarray
    f_true: np.ndarray = None
    tau_true: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def d(self):
        return self.covariates.shape[1]

    @property
    def has_truth(self):
        return self.f_true is not None and self.tau_true is not None

    def unit_propensity(self):
        """Per-unit design propensity (batch lookup)."""
        return self.design_propensity[self.batch]

    def validate(self):
        n = self.n
        for name in ("treatment", "outcome", "batch"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ConfigError(f"{name} has shape {arr.shape}, expected ({n},)")
        if not np.isfinite(self.covariates).all():
            raise ConfigError("covariates contain non-finite values")
        for name in ("treatment", "outcome"):
            arr = getattr(self, name)
            if not np.isin(arr, (0, 1)).all():
                raise ConfigError(f"{name} must be binary")
        if self.batch.min() < 0 or self.batch.max() >= len(self.design_propensity):
            raise ConfigError("batch ids out of range of design_propensity")
        if not ((self.design_propensity > 0) & (self.design_propensity < 1)).all():
            raise ConfigError("design propensities must lie strictly in (0,1)")
        if self.has_truth:
            f, tau = self.f_true, self.tau_true
            if (f < 0).any() or (f > 1).any():
                raise ConfigError("f_true outside [0,1]")
            if ((f + tau) < -1e-12).any() or ((f + tau) > 1 + 1e-12).any():
                raise ConfigError("f_true + tau_true outside [0,1]")

    def take(self, idx):
        """Row subset (keeps batch ids and design propensities)."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        return Dataset(
            covariates=np.ascontiguousarray(self.covariates[idx]),
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            batch=self.batch[idx],
            design_propensity=self.design_propensity,
            f_true=None if self.f_true is None else self.f_true[idx],
            tau_true=None if self.tau_true is None else self.tau_true[idx],
            metadata=dict(self.metadata),
        )


@dataclass
class RedrawSpec:
    """Inputs of the semi-synthetic redraw (all on the logit scale)."""

    lam: float
    base_f_tilde: np.ndarray
    base_g_tilde: np.ndarray
    mean_g_tilde: float
    seed: int

    def validate(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not np.isfinite(self.base_f_tilde).all():
            raise ConfigError("base_f_tilde contains non-finite values")
        if not np.isfinite(self.base_g_tilde).all():
            raise ConfigError("base_g_tilde contains non-finite values")
        if abs(self.mean_g_tilde - float(np.mean(self.base_g_tilde))) > 1e-10:
            raise ConfigError("mean_g_tilde does not match mean of base_g_tilde")


def _uniform_matrix(seed, n, cols):
    """(n, cols) uniforms from a Philox stream keyed by the seed.

    Row i always consumes the same counter positions, so the draw for a unit
    does not depend on how many units come before it being generated in
    parallel chunks.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed) & _SEED_MASK))
    return gen.random((n, cols))


def _draw_covariates(u, law):
    if law == "uniform01":
        return u.copy()
    if law == "standard_normal":
        return ndtri(np.clip(u, 1e-15, 1.0 - 1e-15))
    # mixed: even columns binary, odd columns continuous
    x = u.copy()
    x[:, 0::2] = (u[:, 0::2] < 0.5).astype(np.float64)
    return x


def _batch_assignment(fractions, n):
    cum = np.cumsum(fractions)
    edges = np.round(cum * n).astype(np.int64)
    edges[-1] = n
    sizes = np.diff(np.concatenate([[0], edges]))
    return np.repeat(np.arange(len(fractions), dtype=np.int16), sizes)


def generate_synthetic(config: DgpConfig) -> Dataset:
    """Draw a fully synthetic randomized sample with truth columns filled."""
    config.validate()
    n, d = config.n_units, config.n_covariates
    u = _uniform_matrix(config.seed, n, d + 2)
    x = np.ascontiguousarray(_draw_covariates(u[:, :d], config.covariate_law))

    fractions = [f for f, _ in config.batches]
    propensities = np.array([p for _, p in config.batches], dtype=np.float64)
    batch = _batch_assignment(fractions, n)
    p_unit = propensities[batch]

    t = (u[:, d] < p_unit).astype(np.int8)

    a = np.asarray(_eval_spec(_BASELINE_CATALOG, config.baseline_spec,
                              "baseline")(x, config.baseline_spec),
                   dtype=np.float64)
    b = np.asarray(_eval_spec(_EFFECT_CATALOG, config.effect_spec,
                              "effect")(x, a, config.effect_spec),
                   dtype=np.float64)
    p_outcome = expit(a + b * t)
    y = (u[:, d + 1] < p_outcome).astype(np.int8)

    data = Dataset(
        covariates=x,
        treatment=t,
        outcome=y,
        batch=batch,
        design_propensity=propensities,
        f_true=expit(a),
        tau_true=expit(a + b) - expit(a),
        metadata={"seed": config.seed, "covariate_law": config.covariate_law,
                  "baseline_spec": config.baseline_spec,
                  "effect_spec": config.effect_spec},
    )
    data.validate()
    return data


def semisynthetic_redraw(data: Dataset, spec: RedrawSpec) -> Dataset:
    """Re-randomize treatment at 0.5 and re-draw outcomes from the lambda model."""
    spec.validate()
    n = data.n
    if spec.base_f_tilde.shape != (n,) or spec.base_g_tilde.shape != (n,):
        raise ConfigError("redraw inputs must have one value per unit")

    u = _uniform_matrix(spec.seed, n, 2)
    t = (u[:, 0] < 0.5).astype(np.int8)
    effect_logit = spec.lam * (spec.base_g_tilde - spec.mean_g_tilde) + spec.mean_g_tilde
    p_outcome = expit(spec.base_f_tilde + effect_logit * t)
    y = (u[:, 1] < p_outcome).astype(np.int8)

    f_true = expit(spec.base_f_tilde)
    tau_true = expit(spec.base_f_tilde + effect_logit) - f_true
    out = Dataset(
        covariates=data.covariates,
        treatment=t,
        outcome=y,
        batch=np.zeros(n, dtype=np.int16),
        design_propensity=np.array([0.5]),
        f_true=f_true,
        tau_true=tau_true,
        metadata={"redraw_lambda": spec.lam, "redraw_propensity": 0.5,
                  "redraw_seed": spec.seed},
    )
    out.validate()
    return out


# --- CSV / metadata serialization ---

def _fmt(v):
    return format(float(v), ".17g")


def save_dataset(data: Dataset, path, include_truth=False):
    """Write `x0..x{d-1},t,y,batch` rows; truth columns appended on request."""
    d = data.d
    header = [f"x{j}" for j in range(d)] + ["t", "y", "batch"]
    truth = include_truth and data.has_truth
    if truth:
        header += ["f_true", "tau_true"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            row = [_fmt(v) for v in data.covariates[i]]
            row += [str(int(data.treatment[i])), str(int(data.outcome[i])),
                    str(int(data.batch[i]))]
            if truth:
                row += [_fmt(data.f_true[i]), _fmt(data.tau_true[i])]
            w.writerow(row)


def save_truth(data: Dataset, path):
    """Truth sidecar: `f_true,tau_true` aligned with the dataset rows."""
    if not data.has_truth:
        raise ConfigError("dataset carries no truth columns")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f_true", "tau_true"])
        for i in range(data.n):
            w.writerow([_fmt(data.f_true[i]), _fmt(data.tau_true[i])])


def save_meta(data: Dataset, path):
    with open(path, "w") as fh:
        json.dump({
            "design_propensity": [float(p) for p in data.design_propensity],
            "metadata": {k: v for k, v in data.metadata.items()
                         if isinstance(v, (int, float, str, list, dict, bool))},
        }, fh, indent=2)
        fh.write("\n")


def load_dataset(path, truth_path=None, meta_path=None) -> Dataset:
    """Read a dataset CSV; truth may be inline or in a sidecar CSV.

    Without a meta sidecar the design propensities default to the empirical
    per-batch treated shares.
    """
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    if not rows:
        raise ConfigError(f"dataset {path} is empty")
    xcols = [c for c in header if c.startswith("x")]
    d = len(xcols)
    expected = [f"x{j}" for j in range(d)] + ["t", "y", "batch"]
    if header[:d + 3] != expected:
        raise ConfigError(f"unexpected dataset header in {path}: {header}")
    arr = np.array(rows, dtype=np.float64)
    x = np.ascontiguousarray(arr[:, :d])
    t = arr[:, d].astype(np.int8)
    y = arr[:, d + 1].astype(np.int8)
    batch = arr[:, d + 2].astype(np.int16)
    f_true = tau_true = None
    if header[d + 3:d + 5] == ["f_true", "tau_true"]:
        f_true = arr[:, d + 3]
        tau_true = arr[:, d + 4]
    if truth_path is not None:
        with open(truth_path, newline="") as fh:
            r = csv.reader(fh)
            thead = next(r)
            tarr = np.array(list(r), dtype=np.float64)
        if thead != ["f_true", "tau_true"] or tarr.shape[0] != arr.shape[0]:
            raise ConfigError(f"truth sidecar {truth_path} does not match dataset")
        f_true, tau_true = tarr[:, 0], tarr[:, 1]

    metadata = {}
    if meta_path is not None:
        with open(meta_path) as fh:
            meta = json.load(fh)
        design = np.asarray(meta["design_propensity"], dtype=np.float64)
        metadata = meta.get("metadata", {})
    else:
        n_batches = int(batch.max()) + 1
        design = np.array([
            t[batch == b].mean() if (batch == b).any() else 0.5
            for b in range(n_batches)
        ])
    data = Dataset(covariates=x, treatment=t, outcome=y, batch=batch,
                   design_propensity=design, f_true=f_true, tau_true=tau_true,
                   metadata=metadata)
    data.validate()
    return data
