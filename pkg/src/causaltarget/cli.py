"""Command-line surface of the toolkit.

Verbs: gen, evaluate, gates, calibrate, rate, sweep, simulate. Every run
writes a resolved-config copy next to its outputs and derives all randomness
from one master seed, so re-runs produce byte-identical CSVs regardless of
--threads.

Exit codes: 0 success, 2 configuration/validation error, 3 estimation error.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import _seeds
from .dgp import (Dataset, DgpConfig, generate_synthetic, load_dataset,
                  save_dataset, save_meta, save_truth)
from .errors import CausalTargetError, ConfigError
from .forest import ForestParams
from .glm import ate_aipw, ate_mean_difference, crossfit_nuisances, make_folds
from .heterogeneity import calibration_regression, gates
from .svgplot import Panel, write_chart
from .targeting import (DEFAULT_Q_GRID, build_policy, make_aux_flag,
                        policy_value_curve, rate_autoc, simulation_study)

# seed-derivation domains used only at the CLI layer
_CLI_NUISANCE = 14
_CLI_POLICY = 15
_CLI_AUX = 16
_CLI_RATE = 17
_CLI_SIM = 18

_DEFAULT_POLICIES = ("NonParametricCATE", "NegativeBaseline",
                     "PositiveBaseline", "LogitFromBaseline", "HybridLogit",
                     "Random")

_FOREST_KEYS = {"n_trees", "subsample_fraction", "honesty_fraction",
                "min_node_size", "max_depth", "mtry"}

_SCHEMA = {
    "seed": None,
    "threads": None,
    "dgp": {"n_units", "n_covariates", "covariate_law", "baseline", "effect",
            "batches", "seed"},
    "dataset": None,
    "truth": None,
    "meta": None,
    "folds": None,
    "propensity_mode": None,
    "forest": _FOREST_KEYS,
    "baseline_forest": _FOREST_KEYS,
    "q_grid": None,
    "policies": None,
    "gates_groups": None,
    "rate_bootstrap": None,
    "aux_flag": {"prevalence", "noise"},
    "lambdas": None,
    "n_draws": None,
    "sim_policies": None,
    "sim_inputs": None,
    "sim_evaluation": None,
    "sweep": {"min_node_sizes", "n_trees", "q", "policy"},
}


def _validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(cfg) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, allowed in _SCHEMA.items():
        if allowed is None or key not in cfg:
            continue
        block = cfg[key]
        if not isinstance(block, dict):
            raise ConfigError(f"config key {key!r} must be an object")
        extra = set(block) - allowed
        if extra:
            raise ConfigError(f"unknown keys in {key!r}: {sorted(extra)}")


def _load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _validate_config(cfg)
    cfg["_dir"] = os.path.dirname(os.path.abspath(path))
    return cfg


def _resolve_path(cfg, p):
    if os.path.isabs(p):
        return p
    return os.path.join(cfg.get("_dir", "."), p)


def _write_resolved(cfg, out_dir, command):
    resolved = {k: v for k, v in cfg.items() if not k.startswith("_")}
    resolved["_command"] = command
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v):
    return format(float(v), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _forest_params(block, seed, default_min_node):
    block = dict(block or {})
    return ForestParams(
        n_trees=int(block.get("n_trees", 500)),
        subsample_fraction=float(block.get("subsample_fraction", 0.5)),
        honesty_fraction=float(block.get("honesty_fraction", 0.5)),
        min_node_size=int(block.get("min_node_size", default_min_node)),
        max_depth=block.get("max_depth"),
        mtry=block.get("mtry"),
        seed=seed,
    )


def _load_data(cfg):
    if "dataset" not in cfg:
        raise ConfigError("config must point to a dataset CSV via 'dataset'")
    path = _resolve_path(cfg, cfg["dataset"])
    if not os.path.exists(path):
        raise ConfigError(f"dataset file not found: {path}")
    truth = cfg.get("truth")
    if truth is not None:
        truth = _resolve_path(cfg, truth)
        if not os.path.exists(truth):
            raise ConfigError(f"truth sidecar not found: {truth}")
    meta = cfg.get("meta")
    if meta is not None:
        meta = _resolve_path(cfg, meta)
        if not os.path.exists(meta):
            raise ConfigError(f"meta sidecar not found: {meta}")
    return load_dataset(path, truth_path=truth, meta_path=meta)


def _pipeline(cfg, data, seed, threads, forest_block=None):
    folds = make_folds(data.n, int(cfg.get("folds", 10)), seed)
    params = _forest_params(forest_block if forest_block is not None
                            else cfg.get("forest"),
                            _seeds.derive_seed(seed, _CLI_NUISANCE), 10)
    baseline = None
    if "baseline_forest" in cfg:
        baseline = _forest_params(cfg["baseline_forest"],
                                  _seeds.derive_seed(seed, _CLI_NUISANCE, 1), 5)
    mode = cfg.get("propensity_mode", "known")
    scores = crossfit_nuisances(data, folds, params, propensity_mode=mode,
                                baseline_params=baseline, threads=threads)
    return folds, params, scores


def _build_policies(cfg, data, scores, folds, seed, threads):
    names = cfg.get("policies", list(_DEFAULT_POLICIES))
    aux_flag = None
    if "PredictedFlag" in names:
        block = cfg.get("aux_flag", {})
        aux_flag = make_aux_flag(data,
                                 prevalence=float(block.get("prevalence", 0.5)),
                                 noise=float(block.get("noise", 0.1)),
                                 seed=_seeds.derive_seed(seed, _CLI_AUX))
    policies = []
    for name in names:
        policies.append(build_policy(
            name, data, scores, folds,
            seed=_seeds.derive_seed(seed, _CLI_POLICY), aux_flag=aux_flag,
            threads=threads))
    return policies


def _q_grid(cfg):
    return np.asarray(cfg.get("q_grid", DEFAULT_Q_GRID), dtype=np.float64)


def _curve_rows(curve):
    rows = []
    for j, q in enumerate(curve.q_grid):
        rows.append([curve.policy_name, _fmt(q), _fmt(curve.value[j]),
                     _fmt(curve.delta_vs_random[j]), _fmt(curve.se_delta[j])])
    return rows


def _curves_chart(path, curves, title):
    panel = Panel(title=title, xlabel="treated fraction q",
                  ylabel="estimated outcome")
    for curve in curves:
        band_lo = curve.value - 1.96 * curve.se_delta
        band_hi = curve.value + 1.96 * curve.se_delta
        dashed = curve.policy_name == "Random"
        panel.add_series(curve.policy_name, curve.q_grid, curve.value,
                         band_low=band_lo, band_high=band_hi, dashed=dashed)
    write_chart(path, panel, ncols=1, panel_width=640, panel_height=420)


# --- commands ---

def cmd_gen(cfg, out_dir, seed, threads):
    if "dgp" not in cfg:
        raise ConfigError("gen requires a 'dgp' config block")
    block = dict(cfg["dgp"])
    dgp_cfg = DgpConfig(
        n_units=int(block.get("n_units", 0)),
        n_covariates=int(block.get("n_covariates", 0)),
        covariate_law=block.get("covariate_law", "uniform01"),
        baseline_spec=block.get("baseline", {}),
        effect_spec=block.get("effect", {}),
        batches=block.get("batches", [(1.0, 0.5)]),
        seed=int(block.get("seed", _seeds.derive_seed(seed, _seeds.DGP))),
    )
    data = generate_synthetic(dgp_cfg)
    save_dataset(data, os.path.join(out_dir, "dataset.csv"))
    save_truth(data, os.path.join(out_dir, "truth.csv"))
    save_meta(data, os.path.join(out_dir, "meta.json"))
    dgp_cfg.to_json(os.path.join(out_dir, "dgp_config.json"))
    print(f"gen: wrote {data.n} units x {data.d} covariates to {out_dir}")


def cmd_evaluate(cfg, out_dir, seed, threads):
    data = _load_data(cfg)
    folds, params, scores = _pipeline(cfg, data, seed, threads)
    scores.save_csv(os.path.join(out_dir, "scores.csv"))

    est, se = ate_aipw(scores)
    md, md_se = ate_mean_difference(data)
    _write_csv(os.path.join(out_dir, "ate.csv"),
               ["method", "estimate", "se"],
               [["mean_difference", _fmt(md), _fmt(md_se)],
                ["aipw", _fmt(est), _fmt(se)]])

    q_grid = _q_grid(cfg)
    policies = _build_policies(cfg, data, scores, folds, seed, threads)
    curves = [policy_value_curve(p, scores, data, q_grid) for p in policies]
    rows = []
    for curve in curves:
        rows.extend(_curve_rows(curve))
    _write_csv(os.path.join(out_dir, "curves.csv"),
               ["policy", "q", "value", "delta", "se"], rows)
    _curves_chart(os.path.join(out_dir, "curves.svg"), curves,
                  "Estimated outcome by targeting fraction")

    rate_rows = []
    for policy in policies:
        if float(np.var(policy.score)) == 0.0:
            continue
        rr = rate_autoc(policy, scores,
                        n_boot=int(cfg.get("rate_bootstrap", 200)),
                        seed=_seeds.derive_seed(seed, _CLI_RATE))
        rate_rows.append([policy.name, _fmt(rr.autoc), _fmt(rr.se),
                          _fmt(rr.p_one_sided)])
    _write_csv(os.path.join(out_dir, "rate.csv"),
               ["policy", "autoc", "se", "p_value"], rate_rows)

    _gates_tables(cfg, out_dir, data, scores)
    _calibration_table(out_dir, data, scores)
    print(f"evaluate: ATE(aipw) = {est:.4f} +- {se:.4f}; wrote curves, rate, "
          f"gates, calibration tables to {out_dir}")


def _gates_tables(cfg, out_dir, data, scores):
    g = gates(data, scores, n_groups=int(cfg.get("gates_groups", 4)))
    _write_csv(os.path.join(out_dir, "gates_groups.csv"),
               ["group", "estimate", "se", "n"],
               [[i + 1, _fmt(e), _fmt(s), int(g.group_n[i])]
                for i, (e, s) in enumerate(g.group_ate)])
    rows = []
    for hi in range(g.n_groups):
        for lo in range(hi):
            rows.append([hi + 1, lo + 1, _fmt(g.pairwise_diff[hi, lo]),
                         _fmt(g.pairwise_se[hi, lo]),
                         _fmt(g.pairwise_p[hi, lo])])
    _write_csv(os.path.join(out_dir, "gates_pairwise.csv"),
               ["group_hi", "group_lo", "difference", "se", "p_value"], rows)
    return g


def _calibration_table(out_dir, data, scores):
    cal = calibration_regression(data, scores)
    rows = [[f"fold_{i}", _fmt(s), _fmt(se), ""]
            for i, (s, se) in enumerate(cal.per_fold)]
    rows.append(["aggregate", _fmt(cal.slope), _fmt(cal.se),
                 _fmt(cal.p_value_one_sided)])
    _write_csv(os.path.join(out_dir, "calibration.csv"),
               ["unit", "slope", "se", "p_value"], rows)
    return cal


def cmd_gates(cfg, out_dir, seed, threads):
    data = _load_data(cfg)
    _, _, scores = _pipeline(cfg, data, seed, threads)
    g = _gates_tables(cfg, out_dir, data, scores)
    ates = ", ".join(f"Q{i + 1}={e:.4f}" for i, (e, _) in enumerate(g.group_ate))
    print(f"gates: {ates}; tables written to {out_dir}")


def cmd_calibrate(cfg, out_dir, seed, threads):
    data = _load_data(cfg)
    _, _, scores = _pipeline(cfg, data, seed, threads)
    cal = _calibration_table(out_dir, data, scores)
    print(f"calibrate: slope = {cal.slope:.4f} +- {cal.se:.4f} "
          f"(one-sided p = {cal.p_value_one_sided:.4g})")


def cmd_rate(cfg, out_dir, seed, threads):
    data = _load_data(cfg)
    folds, _, scores = _pipeline(cfg, data, seed, threads)
    policies = _build_policies(cfg, data, scores, folds, seed, threads)
    rows = []
    toc_panel = Panel(title="TOC by targeting fraction",
                      xlabel="treated fraction q", ylabel="TOC")
    for policy in policies:
        if float(np.var(policy.score)) == 0.0:
            continue
        rr = rate_autoc(policy, scores,
                        n_boot=int(cfg.get("rate_bootstrap", 200)),
                        seed=_seeds.derive_seed(seed, _CLI_RATE))
        rows.append([policy.name, _fmt(rr.autoc), _fmt(rr.se),
                     _fmt(rr.p_one_sided)])
        toc_panel.add_series(policy.name, rr.toc_grid, rr.toc_curve)
    _write_csv(os.path.join(out_dir, "rate.csv"),
               ["policy", "autoc", "se", "p_value"], rows)
    write_chart(os.path.join(out_dir, "rate.svg"), toc_panel, ncols=1,
                panel_width=640, panel_height=420)
    summary = "; ".join(f"{r[0]}: AUTOC={float(r[1]):.4f} (p={float(r[3]):.3g})"
                        for r in rows)
    print(f"rate: {summary}")


def cmd_sweep(cfg, out_dir, seed, threads):
    block = cfg.get("sweep")
    if not block:
        raise ConfigError("sweep requires a 'sweep' config block")
    min_nodes = block.get("min_node_sizes", [])
    n_trees_list = block.get("n_trees", [])
    if not min_nodes or not n_trees_list:
        raise ConfigError("sweep grid is empty (min_node_sizes x n_trees)")
    q = float(block.get("q", 0.5))
    policy_name = block.get("policy", "NonParametricCATE")
    data = _load_data(cfg)

    rows = []
    for mns in min_nodes:
        for nt in n_trees_list:
            forest_block = dict(cfg.get("forest", {}))
            forest_block["min_node_size"] = mns
            forest_block["n_trees"] = nt
            folds, params, scores = _pipeline(cfg, data, seed, threads,
                                              forest_block=forest_block)
            policy = build_policy(policy_name, data, scores, folds,
                                  seed=_seeds.derive_seed(seed, _CLI_POLICY),
                                  threads=threads)
            curve = policy_value_curve(policy, scores, data,
                                       np.asarray([q], dtype=np.float64))
            rows.append([int(mns), int(nt), _fmt(q), _fmt(curve.value[0]),
                         _fmt(curve.delta_vs_random[0]),
                         _fmt(curve.se_delta[0])])
    _write_csv(os.path.join(out_dir, "sweep.csv"),
               ["min_node_size", "n_trees", "q", "value", "delta", "se"], rows)
    print(f"sweep: {len(rows)} cells written to {out_dir}")


def cmd_simulate(cfg, out_dir, seed, threads):
    if "lambdas" not in cfg or not cfg["lambdas"]:
        raise ConfigError("simulate requires a non-empty 'lambdas' list")
    data = _load_data(cfg)
    inputs = cfg.get("sim_inputs", "forest")
    if inputs == "truth":
        if not data.has_truth:
            raise ConfigError("sim_inputs='truth' needs a truth sidecar")
        f_hat, tau_hat = data.f_true, data.tau_true
    elif inputs == "forest":
        f_hat, tau_hat = _fit_sim_inputs(cfg, data, seed, threads)
    else:
        raise ConfigError(f"unknown sim_inputs {inputs!r}")

    n_draws = int(cfg.get("n_draws", 20))
    result = simulation_study(
        data, f_hat, tau_hat, lambdas=list(cfg["lambdas"]), n_draws=n_draws,
        policies=tuple(cfg.get("sim_policies",
                               ("LogitFromBaseline", "NonParametricCATE",
                                "HybridLogit"))),
        q_grid=_q_grid(cfg), n_folds=int(cfg.get("folds", 10)),
        forest_params=_forest_params(cfg.get("forest"),
                                     _seeds.derive_seed(seed, _CLI_SIM), 10),
        seed=_seeds.derive_seed(seed, _CLI_SIM, 1), threads=threads,
        evaluation=cfg.get("sim_evaluation", "truth"))

    rows = []
    panels = []
    for lam in result.lambdas:
        panel = Panel(title=f"lambda = {lam:g}", xlabel="treated fraction q",
                      ylabel="outcome under known effects")
        for name in result.policies:
            mean_vals = result.mean_values(lam, name)
            rand_vals = result.mean_values(lam, "Random")
            draws = result.draw_values[lam][name]
            mc_se = (draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
                     if draws.shape[0] > 1 else np.zeros(draws.shape[1]))
            for j, q in enumerate(result.q_grid):
                rows.append([_fmt(lam), name, _fmt(q), _fmt(mean_vals[j]),
                             _fmt(mean_vals[j] - rand_vals[j]), _fmt(mc_se[j])])
            panel.add_series(name, result.q_grid, mean_vals,
                             dashed=(name == "Random"))
        panels.append(panel)
    _write_csv(os.path.join(out_dir, "simulation.csv"),
               ["lambda", "policy", "q", "value", "delta", "se"], rows)
    write_chart(os.path.join(out_dir, "simulation.svg"), panels, ncols=2)
    with open(os.path.join(out_dir, "simulation_meta.json"), "w") as fh:
        json.dump({"n_draws": n_draws, "averaged": n_draws > 1,
                   "single_draw": n_draws == 1,
                   "evaluation": result.metadata["evaluation"],
                   "sim_inputs": inputs,
                   "redraw_propensity": 0.5}, fh, indent=2)
        fh.write("\n")
    print(f"simulate: {len(result.lambdas)} lambdas x {n_draws} draws "
          f"written to {out_dir}")


def _fit_sim_inputs(cfg, data, seed, threads):
    """Forest plug-ins for the redraw: baseline from controls, CATE from all."""
    from .forest import (fit_causal_forest, fit_regression_forest,
                         oob_estimates, predict_regression)
    params = _forest_params(cfg.get("forest"),
                            _seeds.derive_seed(seed, _CLI_SIM, 2), 10)
    bparams = replace(params, min_node_size=5,
                      seed=_seeds.derive_seed(seed, _CLI_SIM, 3))
    bmodel = fit_regression_forest(data, "outcome", data.treatment == 0,
                                   bparams, compute_oob=False, threads=threads)
    f_hat = predict_regression(bmodel, data.covariates)
    cmodel = fit_causal_forest(data, params,
                               propensity=data.unit_propensity(),
                               threads=threads)
    tau_hat = oob_estimates(cmodel)
    return f_hat, tau_hat


_COMMANDS = {
    "gen": cmd_gen,
    "evaluate": cmd_evaluate,
    "gates": cmd_gates,
    "calibrate": cmd_calibrate,
    "rate": cmd_rate,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="causaltarget",
        description="Causal-targeting pipeline: generate synthetic trials, "
                    "estimate cross-fitted nuisances, evaluate targeting "
                    "policies, and run the heterogeneity simulation study.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides config)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for forest fitting")
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        threads = (args.threads if args.threads is not None
                   else int(cfg.get("threads", 1)))
        os.makedirs(args.out, exist_ok=True)
        cfg_echo = dict(cfg)
        cfg_echo["seed"] = seed
        cfg_echo["threads"] = threads
        _write_resolved(cfg_echo, args.out, args.command)
        _COMMANDS[args.command](cfg, args.out, seed, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CausalTargetError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
