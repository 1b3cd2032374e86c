"""Numeric kernels for the backfitting sampler.

Forest state is a bundle of ``(T, cap)`` node arrays:

``tvar``   split variable, ``LEAF`` (-1) for leaves, ``FREE`` (-2) for unused slots
``trank``  split threshold as a rank: a training row goes left iff
           ``rank[i, var] <= trank``
``tcut``   the same threshold on the original scale (midpoint of two
           consecutive distinct training values)
``tleft``, ``tright``, ``tparent``, ``tdepth``, ``tval``

``leaf_of[t, i]`` is the leaf of tree ``t`` holding training row ``i``.
All randomness is drawn from a ``numpy.random.Generator`` passed in, so the
compiled and uncompiled paths consume identical streams.
"""
import math

import numpy as np

from ._accel import njit

LEAF = -1
FREE = -2
LOG_2PI = math.log(2.0 * math.pi)


@njit
def leaf_log_marginal(nk, sk, ssk, sigma_sq, sigma_beta_sq):
    """log of the integrated Gaussian likelihood of one leaf.

    ``nk``, ``sk`` and ``ssk`` are the count, sum and raw sum of squares of the
    residuals falling into the leaf.
    """
    if nk == 0:
        return 0.0
    denom = sigma_sq + nk * sigma_beta_sq
    return (-0.5 * nk * (LOG_2PI + math.log(sigma_sq))
            - 0.5 * math.log(denom / sigma_sq)
            - 0.5 * ssk / sigma_sq
            + 0.5 * sigma_beta_sq * sk * sk / (sigma_sq * denom))


@njit
def partition_log_marginal(labels, n_cells, r, sigma_sq, sigma_beta_sq):
    """Sum of :func:`leaf_log_marginal` over cells given a row labelling."""
    nk = np.zeros(n_cells)
    sk = np.zeros(n_cells)
    ssk = np.zeros(n_cells)
    for i in range(r.shape[0]):
        k = labels[i]
        nk[k] += 1.0
        sk[k] += r[i]
        ssk[k] += r[i] * r[i]
    out = 0.0
    for k in range(n_cells):
        if nk[k] == 0:
            return -np.inf
        out += leaf_log_marginal(nk[k], sk[k], ssk[k], sigma_sq, sigma_beta_sq)
    return out


@njit
def split_prob(gamma, beta, depth):
    return gamma * (1.0 + depth) ** (-beta)


@njit
def _log(x):
    if x <= 0.0:
        return -np.inf
    return math.log(x)


@njit
def _accept(log_alpha, rng):
    # always consume one uniform so the stream position does not depend on the ratio
    u = rng.random()
    if log_alpha >= 0.0:
        return True
    return u < math.exp(log_alpha)


# ---------------------------------------------------------------------------
# cell helpers

@njit
def _gather_leaf(leaf_of_t, node, rows):
    m = 0
    for i in range(leaf_of_t.shape[0]):
        if leaf_of_t[i] == node:
            rows[m] = i
            m += 1
    return m


@njit
def _distinct_ranks(rank, rows, m, v, nuniq_v, mark, out):
    for j in range(m):
        mark[rank[rows[j], v]] = True
    d = 0
    for r in range(nuniq_v):
        if mark[r]:
            out[d] = r
            d += 1
            mark[r] = False
    return d


@njit
def _splittable(rank, rows, m, v):
    if m < 2:
        return False
    r0 = rank[rows[0], v]
    for j in range(1, m):
        if rank[rows[j], v] != r0:
            return True
    return False


@njit
def _log_leaf_prob(rank, rows, m, S, depth, gamma, beta):
    """log P(node at ``depth`` with cell ``rows`` stays a leaf).

    A node splits with probability ``split_prob``; the split variable is
    uniform on S and a variable with no admissible cut leaves the node as a
    leaf, so the leaf probability is ``1 - p_d * (fraction of splittable S)``.
    """
    ns = S.shape[0]
    if ns == 0:
        return 0.0
    c = 0
    for a in range(ns):
        if _splittable(rank, rows, m, S[a]):
            c += 1
    return _log(1.0 - split_prob(gamma, beta, depth) * c / ns)


@njit
def _stats(r, rows, m):
    s = 0.0
    ss = 0.0
    for j in range(m):
        x = r[rows[j]]
        s += x
        ss += x * x
    return float(m), s, ss


@njit
def _cut_rank(uvals_v, r_lo, cut):
    """Largest global rank whose value is <= ``cut``, starting from ``r_lo``."""
    r = r_lo
    while r + 1 < uvals_v.shape[0] and uvals_v[r + 1] <= cut:
        r += 1
    return r


@njit
def _is_ancestor(tparent_t, u, node):
    """True when ``u`` is ``node`` or one of its ancestors."""
    k = node
    while k != -1:
        if k == u:
            return True
        k = tparent_t[k]
    return False


@njit
def _alloc(tvar_t):
    for k in range(tvar_t.shape[0]):
        if tvar_t[k] == FREE:
            return k
    return -1


@njit
def _route_sub(u, v_u, r_u, tvar_t, trank_t, tleft_t, tright_t, rank, i):
    """Leaf reached by training row ``i`` starting at ``u`` with u's rule replaced."""
    if rank[i, v_u] <= r_u:
        k = tleft_t[u]
    else:
        k = tright_t[u]
    while tvar_t[k] >= 0:
        if rank[i, tvar_t[k]] <= trank_t[k]:
            k = tleft_t[k]
        else:
            k = tright_t[k]
    return k


@njit
def _subtree_prior(u, tvar_t, tparent_t, tdepth_t, trank_t, tcut_t, lo, rows, m, rank, uvals,
                   nuniq, S, gamma, beta, buf, mark, dbuf):
    """log prior terms of the strict descendants of ``u``.

    ``lo[j]`` is the leaf of ``rows[j]``.  Internal descendants contribute
    ``log p_d - log|S| - log ncuts``; leaves contribute their leaf term.
    Returns -inf if a descendant cell is empty or a descendant cut is not a
    midpoint of two consecutive distinct values of its cell.
    """
    ns = S.shape[0]
    out = 0.0
    cap = tvar_t.shape[0]
    for w in range(cap):
        if tvar_t[w] == FREE or w == u:
            continue
        if not _is_ancestor(tparent_t, u, w):
            continue
        mw = 0
        for j in range(m):
            if _is_ancestor(tparent_t, w, lo[j]):
                buf[mw] = rows[j]
                mw += 1
        if mw == 0:
            return -np.inf
        if tvar_t[w] == LEAF:
            out += _log_leaf_prob(rank, buf, mw, S, tdepth_t[w], gamma, beta)
        else:
            v = tvar_t[w]
            d = _distinct_ranks(rank, buf, mw, v, nuniq[v], mark, dbuf)
            lo_r = -1
            hi_r = -1
            for q in range(d):
                if dbuf[q] <= trank_t[w]:
                    lo_r = dbuf[q]
                elif hi_r < 0:
                    hi_r = dbuf[q]
            if lo_r < 0 or hi_r < 0:
                return -np.inf
            if 0.5 * (uvals[v, lo_r] + uvals[v, hi_r]) != tcut_t[w]:
                return -np.inf
            out += (_log(split_prob(gamma, beta, tdepth_t[w]))
                    - math.log(ns) - math.log(d - 1))
    return out


# ---------------------------------------------------------------------------
# forest state

@njit
def init_forest(tvar, tcut, trank, tleft, tright, tparent, tdepth, tval, leaf_of, yhat):
    T, cap = tvar.shape
    for t in range(T):
        for k in range(cap):
            tvar[t, k] = FREE
            tcut[t, k] = np.nan
            trank[t, k] = -1
            tleft[t, k] = -1
            tright[t, k] = -1
            tparent[t, k] = -1
            tdepth[t, k] = 0
            tval[t, k] = 0.0
        tvar[t, 0] = LEAF
        for i in range(leaf_of.shape[1]):
            leaf_of[t, i] = 0
    for i in range(yhat.shape[0]):
        yhat[i] = 0.0


@njit
def _move_probs(n_internal, p_grow, p_prune, p_change):
    if n_internal == 0:
        return 1.0, 0.0, 0.0
    tot = p_grow + p_prune + p_change
    return p_grow / tot, p_prune / tot, p_change / tot


@njit
def _count_nog(tvar_t, tleft_t, tright_t):
    c = 0
    for k in range(tvar_t.shape[0]):
        if tvar_t[k] >= 0 and tvar_t[tleft_t[k]] == LEAF and tvar_t[tright_t[k]] == LEAF:
            c += 1
    return c


@njit
def tree_step(t, y, rank, uvals, nuniq, S, sigma_sq, sigma_beta_sq, gamma, beta,
              p_grow, p_prune, p_change,
              tvar, tcut, trank, tleft, tright, tparent, tdepth, tval, leaf_of, yhat,
              r, rows, rows2, lo_new, buf, mark, dbuf, nk, sk, rng):
    """One Metropolis-Hastings update of tree ``t`` followed by a leaf draw.

    Returns the move code: 0 none/rejected, 1 grow, 2 prune, 3 change.
    """
    n = y.shape[0]
    cap = tvar.shape[1]
    ns = S.shape[0]
    tvar_t = tvar[t]
    tleft_t = tleft[t]
    tright_t = tright[t]
    tparent_t = tparent[t]
    tdepth_t = tdepth[t]
    lof = leaf_of[t]
    for i in range(n):
        r[i] = y[i] - yhat[i] + tval[t, lof[i]]

    accepted = 0
    if ns > 0:
        n_internal = 0
        n_leaves = 0
        for k in range(cap):
            if tvar_t[k] >= 0:
                n_internal += 1
            elif tvar_t[k] == LEAF:
                n_leaves += 1
        pg, pp, pc = _move_probs(n_internal, p_grow, p_prune, p_change)
        u01 = rng.random()
        if u01 < pg:
            # GROW ------------------------------------------------------
            pick = rng.integers(0, n_leaves)
            leaf = -1
            c = 0
            for k in range(cap):
                if tvar_t[k] == LEAF:
                    if c == pick:
                        leaf = k
                        break
                    c += 1
            v = S[rng.integers(0, ns)]
            m = _gather_leaf(lof, leaf, rows)
            d = _distinct_ranks(rank, rows, m, v, nuniq[v], mark, dbuf)
            if d >= 2:
                kk = rng.integers(0, d - 1)
                rthr = dbuf[kk]
                ml = 0
                mr = 0
                for j in range(m):
                    i = rows[j]
                    if rank[i, v] <= rthr:
                        buf[ml] = i
                        ml += 1
                    else:
                        rows2[mr] = i
                        mr += 1
                dl = tdepth_t[leaf]
                n0, s0, ss0 = _stats(r, rows, m)
                n1, s1, ss1 = _stats(r, buf, ml)
                n2, s2, ss2 = _stats(r, rows2, mr)
                dlml = (leaf_log_marginal(n1, s1, ss1, sigma_sq, sigma_beta_sq)
                        + leaf_log_marginal(n2, s2, ss2, sigma_sq, sigma_beta_sq)
                        - leaf_log_marginal(n0, s0, ss0, sigma_sq, sigma_beta_sq))
                lp = (_log(split_prob(gamma, beta, dl))
                      + _log_leaf_prob(rank, buf, ml, S, dl + 1, gamma, beta)
                      + _log_leaf_prob(rank, rows2, mr, S, dl + 1, gamma, beta)
                      - _log_leaf_prob(rank, rows, m, S, dl, gamma, beta))
                nog = _count_nog(tvar_t, tleft_t, tright_t)
                par = tparent_t[leaf]
                if par >= 0 and tvar_t[tleft_t[par]] == LEAF and tvar_t[tright_t[par]] == LEAF:
                    nog_new = nog
                else:
                    nog_new = nog + 1
                _, pp_new, _ = _move_probs(n_internal + 1, p_grow, p_prune, p_change)
                lq = _log(pp_new) - math.log(nog_new) - _log(pg) + math.log(n_leaves)
                log_alpha = dlml + lp + lq
                if _accept(log_alpha, rng):
                    a = _alloc(tvar_t)
                    tvar_t[a] = LEAF
                    b = _alloc(tvar_t)
                    if a >= 0 and b >= 0:
                        cutv = 0.5 * (uvals[v, rthr] + uvals[v, dbuf[kk + 1]])
                        tvar_t[leaf] = v
                        trank[t, leaf] = _cut_rank(uvals[v], rthr, cutv)
                        tcut[t, leaf] = cutv
                        tvar_t[b] = LEAF
                        for q in (a, b):
                            tparent_t[q] = leaf
                            tdepth_t[q] = dl + 1
                            tleft_t[q] = -1
                            tright_t[q] = -1
                            trank[t, q] = -1
                            tcut[t, q] = np.nan
                        tleft_t[leaf] = a
                        tright_t[leaf] = b
                        for j in range(ml):
                            lof[buf[j]] = a
                        for j in range(mr):
                            lof[rows2[j]] = b
                        accepted = 1
                    else:
                        if a >= 0:
                            tvar_t[a] = FREE
        elif u01 < pg + pp:
            # PRUNE -----------------------------------------------------
            nog = _count_nog(tvar_t, tleft_t, tright_t)
            pick = rng.integers(0, nog)
            u = -1
            c = 0
            for k in range(cap):
                if tvar_t[k] >= 0 and tvar_t[tleft_t[k]] == LEAF and tvar_t[tright_t[k]] == LEAF:
                    if c == pick:
                        u = k
                        break
                    c += 1
            a = tleft_t[u]
            b = tright_t[u]
            ml = _gather_leaf(lof, a, buf)
            mr = _gather_leaf(lof, b, rows2)
            m = 0
            for j in range(ml):
                rows[m] = buf[j]
                m += 1
            for j in range(mr):
                rows[m] = rows2[j]
                m += 1
            du = tdepth_t[u]
            n0, s0, ss0 = _stats(r, rows, m)
            n1, s1, ss1 = _stats(r, buf, ml)
            n2, s2, ss2 = _stats(r, rows2, mr)
            dlml = (leaf_log_marginal(n0, s0, ss0, sigma_sq, sigma_beta_sq)
                    - leaf_log_marginal(n1, s1, ss1, sigma_sq, sigma_beta_sq)
                    - leaf_log_marginal(n2, s2, ss2, sigma_sq, sigma_beta_sq))
            lp = (_log_leaf_prob(rank, rows, m, S, du, gamma, beta)
                  - _log(split_prob(gamma, beta, du))
                  - _log_leaf_prob(rank, buf, ml, S, du + 1, gamma, beta)
                  - _log_leaf_prob(rank, rows2, mr, S, du + 1, gamma, beta))
            pg_new, _, _ = _move_probs(n_internal - 1, p_grow, p_prune, p_change)
            lq = _log(pg_new) - math.log(n_leaves - 1) - _log(pp) + math.log(nog)
            log_alpha = dlml + lp + lq
            if _accept(log_alpha, rng):
                for q in (a, b):
                    tvar_t[q] = FREE
                    tparent_t[q] = -1
                    tval[t, q] = 0.0
                tvar_t[u] = LEAF
                trank[t, u] = -1
                tcut[t, u] = np.nan
                tleft_t[u] = -1
                tright_t[u] = -1
                for j in range(m):
                    lof[rows[j]] = u
                accepted = 2
        else:
            # CHANGE ----------------------------------------------------
            pick = rng.integers(0, n_internal)
            u = -1
            c = 0
            for k in range(cap):
                if tvar_t[k] >= 0:
                    if c == pick:
                        u = k
                        break
                    c += 1
            v = S[rng.integers(0, ns)]
            m = 0
            for i in range(n):
                if _is_ancestor(tparent_t, u, lof[i]):
                    rows[m] = i
                    m += 1
            d = _distinct_ranks(rank, rows, m, v, nuniq[v], mark, dbuf)
            if d >= 2:
                kk = rng.integers(0, d - 1)
                rthr = dbuf[kk]
                new_cut = 0.5 * (uvals[v, rthr] + uvals[v, dbuf[kk + 1]])
                rthr = _cut_rank(uvals[v], rthr, new_cut)
                for j in range(m):
                    lo_new[j] = _route_sub(u, v, rthr, tvar_t, trank[t], tleft_t, tright_t, rank, rows[j])
                # leaf marginals over the subtree, old and new
                ok = True
                lml_old = 0.0
                lml_new = 0.0
                for k in range(cap):
                    if tvar_t[k] == LEAF and _is_ancestor(tparent_t, u, k):
                        mo = 0
                        mn = 0
                        for j in range(m):
                            if lof[rows[j]] == k:
                                buf[mo] = rows[j]
                                mo += 1
                            if lo_new[j] == k:
                                rows2[mn] = rows[j]
                                mn += 1
                        if mn == 0:
                            ok = False
                            break
                        a0, b0, c0 = _stats(r, buf, mo)
                        a1, b1, c1 = _stats(r, rows2, mn)
                        lml_old += leaf_log_marginal(a0, b0, c0, sigma_sq, sigma_beta_sq)
                        lml_new += leaf_log_marginal(a1, b1, c1, sigma_sq, sigma_beta_sq)
                if ok:
                    old_lab = np.empty(m, dtype=np.int64)
                    for j in range(m):
                        old_lab[j] = lof[rows[j]]
                    prior_old = _subtree_prior(u, tvar_t, tparent_t, tdepth_t, trank[t], tcut[t], old_lab,
                                               rows, m, rank, uvals, nuniq, S, gamma, beta, rows2, mark, dbuf)
                    prior_new = _subtree_prior(u, tvar_t, tparent_t, tdepth_t, trank[t], tcut[t], lo_new[:m],
                                               rows, m, rank, uvals, nuniq, S, gamma, beta, rows2, mark, dbuf)
                    if prior_new > -np.inf:
                        log_alpha = lml_new - lml_old + prior_new - prior_old
                        if _accept(log_alpha, rng):
                            tvar_t[u] = v
                            trank[t, u] = rthr
                            tcut[t, u] = new_cut
                            for j in range(m):
                                lof[rows[j]] = lo_new[j]
                            accepted = 3

    # leaf heights from their conjugate conditional
    for k in range(cap):
        nk[k] = 0.0
        sk[k] = 0.0
    for i in range(n):
        nk[lof[i]] += 1.0
        sk[lof[i]] += r[i]
    for k in range(cap):
        if tvar_t[k] == LEAF:
            denom = sigma_sq + nk[k] * sigma_beta_sq
            mean = sigma_beta_sq * sk[k] / denom
            sd = math.sqrt(sigma_beta_sq * sigma_sq / denom)
            tval[t, k] = mean + sd * rng.standard_normal()
    for i in range(n):
        yhat[i] = y[i] - r[i] + tval[t, lof[i]]
    return accepted


@njit
def bart_sweeps(n_sweeps, y, rank, uvals, nuniq, S, sigma_sq_arr, sigma_beta_sq,
                noise_fixed, nu, lam, gamma, beta, p_grow, p_prune, p_change,
                tvar, tcut, trank, tleft, tright, tparent, tdepth, tval, leaf_of, yhat, rng):
    """Run ``n_sweeps`` backfitting sweeps in place; returns accepted-move counts."""
    n = y.shape[0]
    T, cap = tvar.shape
    r = np.zeros(n)
    rows = np.zeros(n, dtype=np.int64)
    rows2 = np.zeros(n, dtype=np.int64)
    lo_new = np.zeros(n, dtype=np.int64)
    buf = np.zeros(n, dtype=np.int64)
    mark = np.zeros(max(n, 1), dtype=np.bool_)
    dbuf = np.zeros(max(n, 1), dtype=np.int64)
    nk = np.zeros(cap)
    sk = np.zeros(cap)
    counts = np.zeros(4, dtype=np.int64)
    for _ in range(n_sweeps):
        for t in range(T):
            code = tree_step(t, y, rank, uvals, nuniq, S, sigma_sq_arr[0], sigma_beta_sq, gamma, beta,
                             p_grow, p_prune, p_change,
                             tvar, tcut, trank, tleft, tright, tparent, tdepth, tval, leaf_of, yhat,
                             r, rows, rows2, lo_new, buf, mark, dbuf, nk, sk, rng)
            counts[code] += 1
        if not noise_fixed:
            ssr = 0.0
            for i in range(n):
                e = y[i] - yhat[i]
                ssr += e * e
            sigma_sq_arr[0] = (nu * lam + ssr) / rng.chisquare(nu + n)
    return counts


@njit
def forest_predict(tvar, tcut, tleft, tright, tval, X):
    """Sum-of-trees prediction for rows of ``X`` using the cut values."""
    T = tvar.shape[0]
    out = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        s = 0.0
        for t in range(T):
            k = 0
            while tvar[t, k] >= 0:
                if X[i, tvar[t, k]] <= tcut[t, k]:
                    k = tleft[t, k]
                else:
                    k = tright[t, k]
            s += tval[t, k]
        out[i] = s
    return out


def rank_encode(X):
    """Per-column dense ranks and sorted distinct values (padded with NaN)."""
    n, p = X.shape
    rank = np.empty((n, p), dtype=np.int64)
    uvals = np.full((p, max(n, 1)), np.nan)
    nuniq = np.empty(p, dtype=np.int64)
    for j in range(p):
        u, inv = np.unique(X[:, j], return_inverse=True)
        rank[:, j] = inv
        uvals[j, : u.shape[0]] = u
        nuniq[j] = u.shape[0]
    return rank, uvals, nuniq
