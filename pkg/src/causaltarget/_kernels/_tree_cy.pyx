# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree kernels.

Mirrors ``_tree_py`` operation for operation; see that module for the
shared conventions. Arithmetic is kept in the same order (sequential
left-to-right accumulation, right-hand totals by subtraction) and the
extension is compiled with -ffp-contract=off so both backends produce
bit-identical trees.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int32_t, uint64_t
from libc.stdlib cimport free, malloc

cnp.import_array()

BACKEND = "cython"

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15U


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9U
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBU
    return z ^ (z >> 31)


cdef inline uint64_t node_rand(uint64_t seed, uint64_t node_id, uint64_t k) nogil:
    cdef uint64_t base = mix64((seed ^ (node_id * GAMMA)) + GAMMA)
    return mix64(base + (k + 1) * GAMMA)


cdef void sample_features(int d, int mtry, uint64_t seed, uint64_t node_id,
                          int32_t* feats) nogil:
    cdef int k, j, tmp
    for k in range(d):
        feats[k] = k
    for k in range(mtry):
        j = k + <int>(node_rand(seed, node_id, k) % <uint64_t>(d - k))
        tmp = feats[k]
        feats[k] = feats[j]
        feats[j] = tmp


cdef void merge_sort_pairs(double* key, int32_t* idx, int m,
                           double* tkey, int32_t* tidx) nogil:
    """Bottom-up mergesort of (key, idx) pairs by key, ties by idx.

    Equivalent to a stable sort by key when idx is ascending on entry.
    """
    cdef int width = 1
    cdef int lo, mid, hi, i, j, k
    cdef double* ka = key
    cdef int32_t* ia = idx
    cdef double* kb = tkey
    cdef int32_t* ib = tidx
    cdef double* kt
    cdef int32_t* it
    cdef bint from_a = True
    while width < m:
        lo = 0
        while lo < m:
            mid = lo + width
            if mid > m:
                mid = m
            hi = lo + 2 * width
            if hi > m:
                hi = m
            i = lo
            j = mid
            k = lo
            while i < mid and j < hi:
                if ka[i] < ka[j] or (ka[i] == ka[j] and ia[i] <= ia[j]):
                    kb[k] = ka[i]
                    ib[k] = ia[i]
                    i += 1
                else:
                    kb[k] = ka[j]
                    ib[k] = ia[j]
                    j += 1
                k += 1
            while i < mid:
                kb[k] = ka[i]
                ib[k] = ia[i]
                i += 1
                k += 1
            while j < hi:
                kb[k] = ka[j]
                ib[k] = ia[j]
                j += 1
                k += 1
            lo += 2 * width
        kt = ka; ka = kb; kb = kt
        it = ia; ia = ib; ib = it
        from_a = not from_a
        width *= 2
    if not from_a:
        for i in range(m):
            key[i] = ka[i]
            idx[i] = ia[i]


def grow_tree(cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] x,
              cnp.ndarray[cnp.float64_t, ndim=1] sval,
              cnp.ndarray[cnp.float64_t, ndim=1] sarm,
              cnp.ndarray[cnp.int32_t, ndim=1] struct_idx,
              cnp.ndarray[cnp.int32_t, ndim=1] est_idx,
              bint is_causal, int min_node_size, int max_depth, int mtry,
              object seed):
    """Compiled twin of ``_tree_py.grow_tree`` (same contract)."""
    cdef int n = x.shape[0]
    cdef int d = x.shape[1]
    cdef int ns = struct_idx.shape[0]
    cdef int ne = est_idx.shape[0]
    if mtry > d:
        mtry = d
    cdef int mns = min_node_size if min_node_size > 1 else 1
    cdef int cap = 2 * ((ns // mns) if (ns // mns) > 1 else 1) + 3
    cdef uint64_t useed = <uint64_t>(<unsigned long long>(int(seed) & 0xFFFFFFFFFFFFFFFF))

    feature_a = np.full(cap, -1, dtype=np.int32)
    threshold_a = np.zeros(cap, dtype=np.float64)
    left_a = np.full(cap, -1, dtype=np.int32)
    right_a = np.full(cap, -1, dtype=np.int32)
    s_start_a = np.zeros(cap, dtype=np.int32)
    s_end_a = np.zeros(cap, dtype=np.int32)
    e_start_a = np.zeros(cap, dtype=np.int32)
    e_end_a = np.zeros(cap, dtype=np.int32)
    struct_order_a = np.array(struct_idx, dtype=np.int32, copy=True)
    est_order_a = np.array(est_idx, dtype=np.int32, copy=True)
    stack_a = np.zeros((cap + 1, 2), dtype=np.int32)

    cdef int32_t[:] feature = feature_a
    cdef double[:] threshold = threshold_a
    cdef int32_t[:] left = left_a
    cdef int32_t[:] right = right_a
    cdef int32_t[:] s_start = s_start_a
    cdef int32_t[:] s_end = s_end_a
    cdef int32_t[:] e_start = e_start_a
    cdef int32_t[:] e_end = e_end_a
    cdef int32_t[:] struct_order = struct_order_a
    cdef int32_t[:] est_order = est_order_a
    cdef int32_t[:, :] stack = stack_a
    cdef double[:, :] xv = x
    cdef double[:] sv = sval
    cdef double[:] sa = sarm

    cdef int n_nodes = 1
    cdef int top = 0
    cdef int node, depth, s0, s1, m, e0, e1, me
    cdef int f, fi, j, u, best_f, lid, rid, n_left, ne_left, pos
    cdef double best_crit, best_thr, crit, thr
    cdef double stot, sl, sr, nl, nr, parent
    cdef double t1, t0, c1, c0, u1, u0, r1, r0, d1, d0, tau_l, tau_r, dd, av, rv
    cdef bint found

    cdef double* key = <double*>malloc(ns * sizeof(double))
    cdef int32_t* oidx = <int32_t*>malloc(ns * sizeof(int32_t))
    cdef double* tkey = <double*>malloc(ns * sizeof(double))
    cdef int32_t* tidx = <int32_t*>malloc(ns * sizeof(int32_t))
    cdef int32_t* feats = <int32_t*>malloc(d * sizeof(int32_t))
    cdef int32_t* tmpseg = <int32_t*>malloc((ns if ns > ne else ne) * sizeof(int32_t))
    if (key == NULL or oidx == NULL or tkey == NULL or tidx == NULL
            or feats == NULL or tmpseg == NULL):
        free(key); free(oidx); free(tkey); free(tidx); free(feats); free(tmpseg)
        raise MemoryError()

    with nogil:
        s_start[0] = 0
        s_end[0] = ns
        e_start[0] = 0
        e_end[0] = ne
        stack[0, 0] = 0
        stack[0, 1] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top, 0]
            depth = stack[top, 1]
            s0 = s_start[node]
            s1 = s_end[node]
            m = s1 - s0
            if (max_depth >= 0 and depth >= max_depth) or m < 2 * mns \
                    or n_nodes + 2 > cap:
                continue

            best_crit = -1e308
            best_f = -1
            best_thr = 0.0
            found = False
            sample_features(d, mtry, useed, <uint64_t>node, feats)

            for fi in range(mtry):
                f = feats[fi]
                for j in range(m):
                    u = struct_order[s0 + j]
                    key[j] = xv[u, f]
                    oidx[j] = u
                merge_sort_pairs(key, oidx, m, tkey, tidx)
                if key[0] == key[m - 1]:
                    continue

                if is_causal:
                    # left-running sums; right side = totals minus left
                    t1 = 0.0
                    u1 = 0.0
                    u0 = 0.0
                    for j in range(m):
                        av = sa[oidx[j]]
                        rv = sv[oidx[j]]
                        t1 = t1 + av
                        u1 = u1 + av * rv
                        u0 = u0 + (1.0 - av) * rv
                    stot = u1
                    r1 = u1
                    r0 = u0
                    t0 = <double>m - t1
                    c1 = 0.0
                    u1 = 0.0
                    u0 = 0.0
                    for j in range(m - 1):
                        av = sa[oidx[j]]
                        rv = sv[oidx[j]]
                        c1 = c1 + av
                        u1 = u1 + av * rv
                        u0 = u0 + (1.0 - av) * rv
                        if key[j] == key[j + 1]:
                            continue
                        nl = <double>(j + 1)
                        nr = <double>m - nl
                        if nl < mns or nr < mns:
                            continue
                        c0 = nl - c1
                        d1 = t1 - c1
                        d0 = t0 - c0
                        if c1 < 1.0 or c0 < 1.0 or d1 < 1.0 or d0 < 1.0:
                            continue
                        tau_l = u1 / c1 - u0 / c0
                        tau_r = (r1 - u1) / d1 - (r0 - u0) / d0
                        dd = tau_l - tau_r
                        crit = nl * nr * (dd * dd)
                        if crit <= 0.0:
                            continue
                        thr = (key[j] + key[j + 1]) * 0.5
                        if crit > best_crit or (crit == best_crit and (
                                f < best_f or (f == best_f and thr < best_thr))):
                            best_crit = crit
                            best_f = f
                            best_thr = thr
                            found = True
                else:
                    stot = 0.0
                    for j in range(m):
                        stot = stot + sv[oidx[j]]
                    parent = (stot * stot) / <double>m
                    sl = 0.0
                    for j in range(m - 1):
                        sl = sl + sv[oidx[j]]
                        if key[j] == key[j + 1]:
                            continue
                        nl = <double>(j + 1)
                        nr = <double>m - nl
                        if nl < mns or nr < mns:
                            continue
                        sr = stot - sl
                        crit = (sl * sl) / nl + (sr * sr) / nr
                        if crit <= parent:
                            continue
                        thr = (key[j] + key[j + 1]) * 0.5
                        if crit > best_crit or (crit == best_crit and (
                                f < best_f or (f == best_f and thr < best_thr))):
                            best_crit = crit
                            best_f = f
                            best_thr = thr
                            found = True

            if not found:
                continue

            lid = n_nodes
            rid = n_nodes + 1
            n_nodes += 2
            feature[node] = best_f
            threshold[node] = best_thr
            left[node] = lid
            right[node] = rid

            # stable two-pass partition of the structure segment
            pos = 0
            for j in range(m):
                u = struct_order[s0 + j]
                if xv[u, best_f] <= best_thr:
                    tmpseg[pos] = u
                    pos += 1
            n_left = pos
            for j in range(m):
                u = struct_order[s0 + j]
                if not (xv[u, best_f] <= best_thr):
                    tmpseg[pos] = u
                    pos += 1
            for j in range(m):
                struct_order[s0 + j] = tmpseg[j]
            s_start[lid] = s0
            s_end[lid] = s0 + n_left
            s_start[rid] = s0 + n_left
            s_end[rid] = s1

            e0 = e_start[node]
            e1 = e_end[node]
            me = e1 - e0
            pos = 0
            for j in range(me):
                u = est_order[e0 + j]
                if xv[u, best_f] <= best_thr:
                    tmpseg[pos] = u
                    pos += 1
            ne_left = pos
            for j in range(me):
                u = est_order[e0 + j]
                if not (xv[u, best_f] <= best_thr):
                    tmpseg[pos] = u
                    pos += 1
            for j in range(me):
                est_order[e0 + j] = tmpseg[j]
            e_start[lid] = e0
            e_end[lid] = e0 + ne_left
            e_start[rid] = e0 + ne_left
            e_end[rid] = e1

            stack[top, 0] = rid
            stack[top, 1] = depth + 1
            top += 1
            stack[top, 0] = lid
            stack[top, 1] = depth + 1
            top += 1

    free(key); free(oidx); free(tkey); free(tidx); free(feats); free(tmpseg)

    sl_ = slice(0, n_nodes)
    return (feature_a[sl_].copy(), threshold_a[sl_].copy(), left_a[sl_].copy(),
            right_a[sl_].copy(), s_start_a[sl_].copy(), s_end_a[sl_].copy(),
            e_start_a[sl_].copy(), e_end_a[sl_].copy(), struct_order_a,
            est_order_a, n_nodes)


def apply_tree(cnp.ndarray[cnp.int32_t, ndim=1] feature,
               cnp.ndarray[cnp.float64_t, ndim=1] threshold,
               cnp.ndarray[cnp.int32_t, ndim=1] left,
               cnp.ndarray[cnp.int32_t, ndim=1] right,
               cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] xq):
    """Leaf node id for each row of xq."""
    cdef int nq = xq.shape[0]
    out_a = np.zeros(nq, dtype=np.int32)
    cdef int32_t[:] out = out_a
    cdef int32_t[:] fv = feature
    cdef double[:] tv = threshold
    cdef int32_t[:] lv = left
    cdef int32_t[:] rv = right
    cdef double[:, :] xv = xq
    cdef int i, cur, f
    with nogil:
        for i in range(nq):
            cur = 0
            f = fv[cur]
            while f >= 0:
                if xv[i, f] <= tv[cur]:
                    cur = lv[cur]
                else:
                    cur = rv[cur]
                f = fv[cur]
            out[i] = cur
    return out_a
