"""Honest subsampled regression and causal forests.

Each tree draws a subsample, splits it into a structure half (greedy split
search) and an estimation half (leaf values), and never lets a unit's own
outcome reach its leaf estimate. Causal trees first locally center outcomes
with an internal out-of-bag regression forest and split to maximize
n_L * n_R * (tau_L - tau_R)^2 of the difference-in-means of centered
residuals; leaf effects and predictions use the raw outcomes.

Prediction pools per-tree leaf weights: unit j receives weight
mean over trees of 1{j co-leafed with x} / |leaf|, and the CATE is the
weighted difference of treated and control means over those pooled weights.

Nodes whose estimation half falls below min_node_size units (per arm for
causal trees) are collapsed into their parent, so every effective leaf
satisfies the honesty support requirement.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _seeds
from ._kernels import apply_tree, grow_tree
from .errors import ConfigError, EstimationError, MissingSupportError

DEFAULT_REGRESSION_MIN_NODE = 5
DEFAULT_CAUSAL_MIN_NODE = 10
DEFAULT_N_TREES = 2000
PROPENSITY_CLIP = (0.01, 0.99)


@dataclass
class ForestParams:
    n_trees: int = DEFAULT_N_TREES
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_node_size: int = DEFAULT_REGRESSION_MIN_NODE
    max_depth: int = None  # None = unlimited
    mtry: int = None       # None = ceil(sqrt(d))
    seed: int = 0

    def validate(self, d=None):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if not (0.0 < self.subsample_fraction <= 1.0):
            raise ConfigError("subsample_fraction must lie in (0, 1]")
        if not (0.0 < self.honesty_fraction < 1.0):
            raise ConfigError("honesty_fraction must lie in (0, 1)")
        if self.min_node_size < 1:
            raise ConfigError("min_node_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0 or None")
        if self.mtry is not None:
            if self.mtry < 1:
                raise ConfigError("mtry must be >= 1")
            if d is not None and self.mtry > d:
                raise ConfigError(f"mtry {self.mtry} exceeds {d} covariates")

    def resolved_mtry(self, d):
        return self.mtry if self.mtry is not None else max(1, math.ceil(math.sqrt(d)))


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    est_order: np.ndarray
    e_start: np.ndarray
    e_end: np.ndarray
    struct_idx: np.ndarray
    est_idx: np.ndarray
    stats: dict      # per-node est-half counts/sums
    usable: bool

    def leaf_members(self, node):
        return self.est_order[self.e_start[node]:self.e_end[node]]


@dataclass
class ForestModel:
    kind: str                 # "regression" | "causal"
    trees: list
    unit_ids: np.ndarray      # global ids of the training subset, in local order
    params: ForestParams
    d: int
    oob_num: np.ndarray = None     # regression aggregates
    oob_den: np.ndarray = None
    oob_pools: tuple = None        # causal aggregates (S1, W1, S0, W0, B)
    metadata: dict = field(default_factory=dict)

    @property
    def n_usable_trees(self):
        return sum(1 for t in self.trees if t.usable)


def _tree_requirement_ok(stats, node, is_causal, mns):
    if is_causal:
        return stats["n1"][node] >= mns and stats["n0"][node] >= mns
    return stats["n"][node] >= mns


def _build_one_tree(x, sval, sarm, est_val, est_arm, is_causal, params, mtry,
                    tree_index, compute_oob):
    n = x.shape[0]
    ss = np.random.SeedSequence(
        entropy=(params.seed & ((1 << 63) - 1), _seeds.FOREST_TREE, tree_index))
    ss_kernel, ss_sub = ss.spawn(2)
    kernel_seed = int(ss_kernel.generate_state(1, np.uint64)[0])
    rng = np.random.Generator(np.random.PCG64(ss_sub))

    s = min(n, max(2, int(params.subsample_fraction * n)))
    n_est = min(s - 1, max(1, int(params.honesty_fraction * s)))
    perm = rng.permutation(n)[:s]
    est_idx = np.sort(perm[:n_est]).astype(np.int32)
    struct_idx = np.sort(perm[n_est:]).astype(np.int32)

    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    (feature, threshold, left, right, _, _, e_start, e_end, _, est_order,
     n_nodes) = grow_tree(x, sval, sarm, struct_idx, est_idx, is_causal,
                          params.min_node_size, max_depth, mtry, kernel_seed)

    # estimation-half stats per node (segments are contiguous in est_order)
    ev = est_val[est_order]
    ea = est_arm[est_order]
    cs = np.concatenate([[0.0], np.cumsum(ev)])
    cs1 = np.concatenate([[0.0], np.cumsum(ea * ev)])
    cn1 = np.concatenate([[0.0], np.cumsum(ea)])
    e0, e1 = e_start, e_end
    stats = {
        "n": (e1 - e0).astype(np.float64),
        "sum": cs[e1] - cs[e0],
        "n1": cn1[e1] - cn1[e0],
        "sum1": cs1[e1] - cs1[e0],
    }
    stats["n0"] = stats["n"] - stats["n1"]
    stats["sum0"] = stats["sum"] - stats["sum1"]

    # collapse nodes whose estimation support is too small (children have
    # higher ids than parents, so one reverse pass suffices)
    mns = params.min_node_size
    ok = np.zeros(n_nodes, dtype=bool)
    for node in range(n_nodes - 1, -1, -1):
        if feature[node] >= 0 and not (ok[left[node]] and ok[right[node]]):
            feature[node] = -1
        ok[node] = (feature[node] >= 0) or _tree_requirement_ok(
            stats, node, is_causal, mns)
    usable = bool(ok[0])

    tree = Tree(feature=feature, threshold=threshold, left=left, right=right,
                est_order=est_order, e_start=e_start, e_end=e_end,
                struct_idx=struct_idx, est_idx=est_idx, stats=stats,
                usable=usable)

    leaf_of = None
    in_sample = None
    if compute_oob and usable:
        leaf_of = apply_tree(feature, threshold, left, right, x)
        in_sample = np.zeros(n, dtype=bool)
        in_sample[perm] = True
    return tree, leaf_of, in_sample


def _fit_forest_arrays(x, sval, sarm, est_val, est_arm, is_causal, params,
                       compute_oob=True, threads=1):
    n, d = x.shape
    params.validate(d)
    mtry = params.resolved_mtry(d)

    def task(t):
        return _build_one_tree(x, sval, sarm, est_val, est_arm, is_causal,
                               params, mtry, t, compute_oob)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, range(params.n_trees)))
    else:
        results = [task(t) for t in range(params.n_trees)]

    trees = [r[0] for r in results]
    oob_num = oob_den = oob_pools = None
    if compute_oob:
        if is_causal:
            s1 = np.zeros(n)
            w1 = np.zeros(n)
            s0 = np.zeros(n)
            w0 = np.zeros(n)
            cnt = np.zeros(n)
        else:
            num = np.zeros(n)
            den = np.zeros(n)
        # sequential, tree-ordered aggregation keeps results independent of
        # the thread schedule
        for tree, leaf_of, in_sample in results:
            if leaf_of is None:
                continue
            out = ~in_sample
            lf = leaf_of[out]
            st = tree.stats
            if is_causal:
                nl = st["n"][lf]
                s1[out] += st["sum1"][lf] / nl
                w1[out] += st["n1"][lf] / nl
                s0[out] += st["sum0"][lf] / nl
                w0[out] += st["n0"][lf] / nl
                cnt[out] += 1.0
            else:
                num[out] += st["sum"][lf] / st["n"][lf]
                den[out] += 1.0
        if is_causal:
            oob_pools = (s1, w1, s0, w0, cnt)
        else:
            oob_num, oob_den = num, den
    return trees, oob_num, oob_den, oob_pools


def _resolve_subset(data, subset):
    if subset is None:
        return np.arange(data.n)
    subset = np.asarray(subset)
    if subset.dtype == bool:
        subset = np.nonzero(subset)[0]
    return subset


def _resolve_target(data, target):
    if isinstance(target, str):
        if target in ("y", "outcome"):
            return data.outcome.astype(np.float64)
        if target in ("t", "treatment"):
            return data.treatment.astype(np.float64)
        raise ConfigError(f"unknown target column {target!r}")
    arr = np.asarray(target, dtype=np.float64)
    if arr.shape != (data.n,):
        raise ConfigError("target array must have one value per unit")
    return arr


def fit_regression_forest(data, target="outcome", subset=None,
                          params: ForestParams = None, compute_oob=True,
                          threads=1) -> ForestModel:
    """Honest regression forest of E[target | x] on the chosen subset."""
    if params is None:
        params = ForestParams(seed=0)
    idx = _resolve_subset(data, subset)
    if idx.size < 2 * params.min_node_size:
        raise ConfigError(
            f"subset of {idx.size} units is smaller than 2*min_node_size="
            f"{2 * params.min_node_size}")
    yfull = _resolve_target(data, target)
    x = np.ascontiguousarray(data.covariates[idx], dtype=np.float64)
    y = np.ascontiguousarray(yfull[idx])
    zeros = np.zeros(idx.size)
    trees, num, den, _ = _fit_forest_arrays(
        x, y, zeros, y, zeros, False, params, compute_oob, threads)
    return ForestModel(kind="regression", trees=trees, unit_ids=idx,
                       params=params, d=x.shape[1],
                       oob_num=num, oob_den=den)


def fit_causal_forest(data, params: ForestParams = None, propensity=None,
                      subset=None, compute_oob=True, threads=1) -> ForestModel:
    """Honest causal forest with local centering.

    `propensity` may be a known scalar or per-unit array; when omitted an
    internal regression forest estimates it (exposed in metadata, the
    difference-in-means split criterion itself only needs the outcome
    residuals).
    """
    if params is None:
        params = ForestParams(min_node_size=DEFAULT_CAUSAL_MIN_NODE, seed=0)
    idx = _resolve_subset(data, subset)
    t = data.treatment[idx].astype(np.float64)
    y = data.outcome[idx].astype(np.float64)
    if t.sum() == 0 or t.sum() == t.size:
        raise ConfigError("causal forest needs both treatment arms")
    x = np.ascontiguousarray(data.covariates[idx], dtype=np.float64)

    center_params = replace(params, min_node_size=2 * params.min_node_size,
                            seed=_seeds.derive_seed(params.seed, _seeds.CENTER_Y))
    sub = fit_regression_forest(data, "outcome", idx, center_params,
                                compute_oob=True, threads=threads)
    y_hat = oob_estimates(sub)

    clip_count = 0
    if propensity is None:
        center_t = replace(center_params,
                           seed=_seeds.derive_seed(params.seed, _seeds.CENTER_T))
        sub_t = fit_regression_forest(data, "treatment", idx, center_t,
                                      compute_oob=True, threads=threads)
        p_raw = oob_estimates(sub_t)
        p_hat = np.clip(p_raw, *PROPENSITY_CLIP)
        clip_count = int((p_raw != p_hat).sum())
    else:
        p_hat = np.broadcast_to(
            np.asarray(propensity, dtype=np.float64), t.shape).copy()
        if ((p_hat <= 0) | (p_hat >= 1)).any():
            raise ConfigError("propensity values must lie strictly in (0,1)")

    resid = y - y_hat
    trees, _, _, pools = _fit_forest_arrays(
        x, resid, t, y, t, True, params, compute_oob, threads)
    return ForestModel(kind="causal", trees=trees, unit_ids=idx, params=params,
                       d=x.shape[1], oob_pools=pools,
                       metadata={"p_hat": p_hat, "y_hat": y_hat,
                                 "propensity_clip_count": clip_count,
                                 "propensity_supplied": propensity is not None})


def _check_query(model, x):
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.shape[1] != model.d:
        raise ConfigError(f"query has {x.shape[1]} features, model expects {model.d}")
    return x


def predict_regression(model: ForestModel, x):
    """Forest prediction: mean over usable trees of the estimation-leaf mean."""
    if model.kind != "regression":
        raise ConfigError("predict_regression requires a regression forest")
    x = _check_query(model, x)
    num = np.zeros(x.shape[0])
    den = 0.0
    for tree in model.trees:
        if not tree.usable:
            continue
        lf = apply_tree(tree.feature, tree.threshold, tree.left, tree.right, x)
        num += tree.stats["sum"][lf] / tree.stats["n"][lf]
        den += 1.0
    if den == 0.0:
        raise MissingSupportError("no usable trees in forest")
    return num / den


def predict_cate(model: ForestModel, x):
    """Pooled weighted difference of treated and control estimation means."""
    if model.kind != "causal":
        raise ConfigError("predict_cate requires a causal forest")
    x = _check_query(model, x)
    s1 = np.zeros(x.shape[0])
    w1 = np.zeros(x.shape[0])
    s0 = np.zeros(x.shape[0])
    w0 = np.zeros(x.shape[0])
    used = 0
    for tree in model.trees:
        if not tree.usable:
            continue
        lf = apply_tree(tree.feature, tree.threshold, tree.left, tree.right, x)
        st = tree.stats
        nl = st["n"][lf]
        s1 += st["sum1"][lf] / nl
        w1 += st["n1"][lf] / nl
        s0 += st["sum0"][lf] / nl
        w0 += st["n0"][lf] / nl
        used += 1
    if used == 0:
        raise MissingSupportError("no usable trees in forest")
    if (w1 == 0).any() or (w0 == 0).any():
        raise MissingSupportError("query co-leafed with no treated or no "
                                  "control estimation units")
    return s1 / w1 - s0 / w0


def predict_weights(model: ForestModel, x):
    """Training-unit weights for one query point.

    weight_j = mean over usable trees of 1{j in leaf(x)} / |leaf(x)|, returned
    dense over `model.unit_ids` (zeros for never-co-leafed units); sums to 1.
    """
    x = _check_query(model, x)
    if x.shape[0] != 1:
        raise ConfigError("predict_weights takes a single query point")
    w = np.zeros(model.unit_ids.size)
    used = 0
    for tree in model.trees:
        if not tree.usable:
            continue
        lf = int(apply_tree(tree.feature, tree.threshold, tree.left,
                            tree.right, x)[0])
        members = tree.leaf_members(lf)
        w[members] += 1.0 / members.size
        used += 1
    if used == 0:
        raise MissingSupportError("no usable trees in forest")
    return w / used


def oob_estimates(model: ForestModel):
    """Per-training-unit estimates from trees whose subsample excluded the unit."""
    if model.kind == "regression":
        if model.oob_num is None:
            raise EstimationError("forest was fitted with compute_oob=False")
        if (model.oob_den == 0).any():
            raise MissingSupportError(
                f"{int((model.oob_den == 0).sum())} units appear in every "
                "tree's subsample; increase n_trees or lower subsample_fraction")
        return model.oob_num / model.oob_den
    if model.oob_pools is None:
        raise EstimationError("forest was fitted with compute_oob=False")
    s1, w1, s0, w0, cnt = model.oob_pools
    if (cnt == 0).any() or (w1 == 0).any() or (w0 == 0).any():
        raise MissingSupportError("some units lack out-of-bag support")
    return s1 / w1 - s0 / w0


@dataclass
class VariableImportance:
    counts: np.ndarray
    normalized: np.ndarray
    has_splits: bool


def variable_importance(model: ForestModel) -> VariableImportance:
    """Split counts per feature over all (effective) internal nodes."""
    counts = np.zeros(model.d, dtype=np.int64)
    for tree in model.trees:
        if not tree.usable:
            continue
        # count only nodes reachable from the root after collapsing
        stack = [0]
        while stack:
            node = stack.pop()
            f = tree.feature[node]
            if f >= 0:
                counts[f] += 1
                stack.append(int(tree.left[node]))
                stack.append(int(tree.right[node]))
    total = counts.sum()
    if total == 0:
        return VariableImportance(counts, np.zeros(model.d), False)
    return VariableImportance(counts, counts / total, True)


def dump_model(model: ForestModel, path):
    """Debugging dump of the tree structures (not a stability contract)."""
    payload = {
        "kind": model.kind,
        "n_trees": len(model.trees),
        "params": {
            "n_trees": model.params.n_trees,
            "subsample_fraction": model.params.subsample_fraction,
            "honesty_fraction": model.params.honesty_fraction,
            "min_node_size": model.params.min_node_size,
            "max_depth": model.params.max_depth,
            "mtry": model.params.mtry,
            "seed": model.params.seed,
        },
        "trees": [
            {
                "usable": tree.usable,
                "nodes": [
                    {
                        "id": i,
                        "feature": int(tree.feature[i]),
                        "threshold": float(tree.threshold[i]),
                        "left": int(tree.left[i]),
                        "right": int(tree.right[i]),
                        "n_est": int(tree.stats["n"][i]),
                    }
                    for i in range(tree.feature.size)
                ],
            }
            for tree in model.trees
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")
