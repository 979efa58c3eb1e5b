"""Pure-numpy tree kernels (reference implementation).

The compiled kernels in ``_tree_cy`` mirror these routines operation for
operation: same candidate enumeration, same sequential accumulation order,
same tie-breaking, same integer RNG. Both backends therefore produce
bit-identical trees and predictions, and the test suite asserts exact
agreement.

Conventions shared by both backends:

- A node splits on ``x[:, feature] <= threshold`` going left.
- Candidate thresholds are midpoints of consecutive distinct sorted values
  of the structure half.
- Within a node, structure/estimation segments stay sorted by unit index
  (stable partitioning of an initially sorted order), so a stable argsort
  by value equals ordering by (value, unit index).
- Per-node feature subsets come from a splitmix64 counter stream keyed by
  (tree seed, node id), so results do not depend on traversal or thread
  order.
"""

import numpy as np

BACKEND = "python"

_U64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z):
    z &= _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return (z ^ (z >> 31)) & _U64


def _node_rand(seed, node_id, k):
    """k-th uint64 of the (seed, node_id) counter stream."""
    base = _mix64((seed ^ ((node_id * _GAMMA) & _U64)) + _GAMMA)
    return _mix64((base + ((k + 1) * _GAMMA)) & _U64)


def _sample_features(d, mtry, seed, node_id):
    """Partial Fisher-Yates draw of mtry distinct feature indices."""
    feats = list(range(d))
    for k in range(mtry):
        j = k + int(_node_rand(seed, node_id, k) % (d - k))
        feats[k], feats[j] = feats[j], feats[k]
    return feats[:mtry]


def grow_tree(x, sval, sarm, struct_idx, est_idx, is_causal,
              min_node_size, max_depth, mtry, seed):
    """Grow one honest tree on the structure half.

    Parameters
    ----------
    x : (n, d) float64, all units the forest may touch (local indexing)
    sval : (n,) float64 split responses (regression target or centered residual)
    sarm : (n,) float64 treatment arm in {0., 1.} (ignored for regression)
    struct_idx, est_idx : sorted int32 local indices of the two honest halves
    is_causal : bool, switches the split criterion
    min_node_size : minimum structure-half units per child
    max_depth : maximum depth in edges, -1 for unlimited
    mtry : number of candidate features per node
    seed : uint64 kernel seed

    Returns
    -------
    (feature, threshold, left, right, s_start, s_end, e_start, e_end,
     struct_order, est_order, n_nodes)
    Node arrays are sized to n_nodes; feature == -1 marks a leaf. Each node
    owns the contiguous slices [s_start, s_end) of struct_order and
    [e_start, e_end) of est_order.
    """
    n, d = x.shape
    ns = struct_idx.shape[0]
    ne = est_idx.shape[0]
    mtry = min(int(mtry), d)
    mns = max(int(min_node_size), 1)
    cap = 2 * max(ns // mns, 1) + 3

    feature = np.full(cap, -1, dtype=np.int32)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    s_start = np.zeros(cap, dtype=np.int32)
    s_end = np.zeros(cap, dtype=np.int32)
    e_start = np.zeros(cap, dtype=np.int32)
    e_end = np.zeros(cap, dtype=np.int32)

    struct_order = np.array(struct_idx, dtype=np.int32, copy=True)
    est_order = np.array(est_idx, dtype=np.int32, copy=True)

    s_start[0], s_end[0] = 0, ns
    e_start[0], e_end[0] = 0, ne
    n_nodes = 1
    stack = [(0, 0)]

    while stack:
        node, depth = stack.pop()
        s0, s1 = int(s_start[node]), int(s_end[node])
        m = s1 - s0
        if (0 <= max_depth <= depth) or m < 2 * mns or n_nodes + 2 > cap:
            continue

        seg = struct_order[s0:s1]
        vals_seg = x[seg]
        resp = sval[seg]
        arm = sarm[seg]

        best_crit = -np.inf
        best_f = -1
        best_thr = 0.0
        feats = _sample_features(d, mtry, seed, node)
        for f in feats:
            v = vals_seg[:, f]
            o = np.argsort(v, kind="stable")
            vs = v[o]
            if vs[0] == vs[m - 1]:
                continue
            distinct = vs[:-1] != vs[1:]
            nl = np.arange(1.0, float(m), dtype=np.float64)
            nr = float(m) - nl
            with np.errstate(divide="ignore", invalid="ignore"):
                if is_causal:
                    rv = resp[o]
                    av = arm[o]
                    cs1 = np.cumsum(av)
                    cu1 = np.cumsum(av * rv)
                    cu0 = np.cumsum((1.0 - av) * rv)
                    c1 = cs1[:-1]
                    c0 = nl - c1
                    t1 = float(cs1[-1])
                    t0 = float(m) - t1
                    u1 = cu1[:-1]
                    u0 = cu0[:-1]
                    r1 = float(cu1[-1]) - u1
                    r0 = float(cu0[-1]) - u0
                    d1 = t1 - c1
                    d0 = t0 - c0
                    valid = (distinct & (nl >= mns) & (nr >= mns)
                             & (c1 >= 1.0) & (c0 >= 1.0)
                             & (d1 >= 1.0) & (d0 >= 1.0))
                    tau_l = u1 / c1 - u0 / c0
                    tau_r = r1 / d1 - r0 / d0
                    dd = tau_l - tau_r
                    crit = nl * nr * (dd * dd)
                    crit = np.where(valid & (crit > 0.0), crit, -np.inf)
                else:
                    cs = np.cumsum(resp[o])
                    sl = cs[:-1]
                    stot = float(cs[-1])
                    sr = stot - sl
                    parent = (stot * stot) / float(m)
                    valid = distinct & (nl >= mns) & (nr >= mns)
                    crit = (sl * sl) / nl + (sr * sr) / nr
                    crit = np.where(valid & (crit > parent), crit, -np.inf)
            j = int(np.argmax(crit))
            cj = float(crit[j])
            if cj == -np.inf:
                continue
            thr = (vs[j] + vs[j + 1]) * 0.5
            if (cj > best_crit
                    or (cj == best_crit
                        and (f < best_f or (f == best_f and thr < best_thr)))):
                best_crit = cj
                best_f = f
                best_thr = thr

        if best_f < 0:
            continue

        lid, rid = n_nodes, n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid

        mask = vals_seg[:, best_f] <= best_thr
        n_left = int(mask.sum())
        struct_order[s0:s1] = np.concatenate([seg[mask], seg[~mask]])
        s_start[lid], s_end[lid] = s0, s0 + n_left
        s_start[rid], s_end[rid] = s0 + n_left, s1

        e0, e1 = int(e_start[node]), int(e_end[node])
        eseg = est_order[e0:e1]
        if e1 > e0:
            emask = x[eseg, best_f] <= best_thr
            ne_left = int(emask.sum())
            est_order[e0:e1] = np.concatenate([eseg[emask], eseg[~emask]])
        else:
            ne_left = 0
        e_start[lid], e_end[lid] = e0, e0 + ne_left
        e_start[rid], e_end[rid] = e0 + ne_left, e1

        stack.append((rid, depth + 1))
        stack.append((lid, depth + 1))

    sl_ = slice(0, n_nodes)
    return (feature[sl_].copy(), threshold[sl_].copy(), left[sl_].copy(),
            right[sl_].copy(), s_start[sl_].copy(), s_end[sl_].copy(),
            e_start[sl_].copy(), e_end[sl_].copy(), struct_order, est_order,
            n_nodes)


def apply_tree(feature, threshold, left, right, xq):
    """Leaf node id for each row of xq."""
    nq = xq.shape[0]
    cur = np.zeros(nq, dtype=np.int32)
    while True:
        f = feature[cur]
        active = f >= 0
        if not active.any():
            return cur
        ii = np.nonzero(active)[0]
        fi = f[ii]
        ci = cur[ii]
        go_left = xq[ii, fi] <= threshold[ci]
        cur[ii] = np.where(go_left, left[ci], right[ci])
