"""Computable ingredients of the consistency theory.

Prior model weights, the separation gap of a variable subset, surplus
covariances, exhaustive counts of valid tree partitions and the integer
partition function.  Everything here is exact and meant for tiny designs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import Dataset, Tree, candidate_cuts

ENUM_BUDGET = 10**7


class BudgetExceeded(RuntimeError):
    """The worst-case enumeration size exceeds :data:`ENUM_BUDGET`."""


@dataclass(frozen=True)
class TheoryParams:
    alpha: float = 1.0
    C: float = 1.0
    C_eps: float = 1.0
    C_K: float = 1.0
    C_T: float = 1.0
    C_q: float = 1.0
    barC: float = 1.0
    n: int = 100
    p: int = 10

    def __post_init__(self):
        if not (0 < self.alpha <= 1):
            raise ValueError("alpha must lie in (0, 1]")
        for name in ("C", "C_eps", "C_K", "C_T", "C_q", "barC"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be positive")

    def warn_below(self, name, bound):
        """Warn when a constant sits at or below a bound the theory asks for."""
        if getattr(self, name) <= bound:
            warnings.warn(f"{name}={getattr(self, name)} does not exceed {bound}", stacklevel=3)


# ---------------------------------------------------------------------------
# rates and prior weights

def rate_eps(params, subset_size):
    """``C_eps * n^(-alpha / (2 alpha + |S|)) * sqrt(log n)``."""
    if subset_size < 0 or params.n < 2:
        raise ValueError("need subset_size >= 0 and n >= 2")
    a, n = params.alpha, params.n
    return params.C_eps * n ** (-a / (2 * a + subset_size)) * math.sqrt(math.log(n))


def log_model_weight(params, subset_size):
    a, n = params.alpha, params.n
    params.warn_below("C", 2)
    return -params.C * max(n ** (subset_size / (2 * a + subset_size)) * math.log(n),
                           subset_size * math.log(params.p))


def log_joint_weight(params, K, subset_size):
    if K < 1:
        raise ValueError("K must be >= 1")
    params.warn_below("C", 3)
    return -params.C * max(K * math.log(params.n), subset_size * math.log(params.p))


def log_forest_weight(params, K_vec, subset_size):
    K_vec = [int(k) for k in K_vec]
    if not K_vec or min(K_vec) < 1:
        raise ValueError("K_vec entries must be >= 1")
    params.warn_below("C", 1)
    return -params.C * max(subset_size * math.log(params.p), sum(K_vec) * math.log(params.n))


def log_T_weight(params, T):
    if T < 1:
        raise ValueError("T must be >= 1")
    return -params.C_T * T


def optimal_leaves(params, subset_size):
    """Atom ``K_S = floor(C_K / C_eps^2 * n * eps_{n,S}^2 / log n)`` (at least 1)."""
    e = rate_eps(params, subset_size)
    return max(1, math.floor(params.C_K / params.C_eps ** 2 * params.n * e * e / math.log(params.n)))


# ---------------------------------------------------------------------------
# integer partitions

@lru_cache(maxsize=None)
def _partition_table(zmax):
    p = [0] * (zmax + 1)
    p[0] = 1
    for z in range(1, zmax + 1):
        total, k = 0, 1
        while True:
            g1 = k * (3 * k - 1) // 2
            if g1 > z:
                break
            sign = 1 if k % 2 else -1
            total += sign * p[z - g1]
            g2 = k * (3 * k + 1) // 2
            if g2 <= z:
                total += sign * p[z - g2]
            k += 1
        p[z] = total
    return tuple(p)


def partition_number(Z):
    """Number of unordered ways to write ``Z`` as a sum of positive integers."""
    Z = int(Z)
    if Z < 0 or Z > 200:
        raise ValueError("Z must lie in 0..200")
    return _partition_table(200)[Z]


def equiv_class_bound(Z):
    return math.factorial(int(Z)) * partition_number(Z)


def equiv_class_members(Z, n=None):
    """Leaf-count vectors ``(K^1..K^T)`` with positive entries summing to ``Z``, ``T <= min(Z, n)``."""
    Z = int(Z)
    tmax = Z if n is None else min(Z, int(n))
    out = []

    def rec(prefix, rest):
        if rest == 0:
            if 1 <= len(prefix) <= tmax:
                out.append(tuple(prefix))
            return
        if len(prefix) >= tmax:
            return
        for k in range(1, rest + 1):
            rec(prefix + [k], rest - k)

    rec([], Z)
    return out


# ---------------------------------------------------------------------------
# enumeration of valid trees

def _as_X(data):
    return data.X if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)


def enumeration_bound(n, n_vars, K):
    return (K * n * n_vars) ** K


def _check_budget(n, n_vars, K):
    b = enumeration_bound(n, max(n_vars, 1), K)
    if b > ENUM_BUDGET:
        raise BudgetExceeded(f"(K*n*|S|)^K = {b} exceeds {ENUM_BUDGET} (n={n}, |S|={n_vars}, K={K})")


def _enumerate(X, S, K):
    """Map canonical row partition -> nested tree spec, for exactly K leaves."""
    memo = {}

    def rec(rows, k):
        key = (rows, k)
        if key in memo:
            return memo[key]
        out = {}
        if k == 1:
            out[(rows,)] = None
        elif len(rows) >= k:
            idx = np.array(rows)
            for v in S:
                xv = X[idx, v]
                for c in candidate_cuts(xv):
                    go = xv <= c
                    L, R = tuple(idx[go].tolist()), tuple(idx[~go].tolist())
                    for k1 in range(max(1, k - len(R)), min(k - 1, len(L)) + 1):
                        left = rec(L, k1)
                        right = rec(R, k - k1)
                        for pl, sl in left.items():
                            for pr, sr in right.items():
                                part = tuple(sorted(pl + pr))
                                if part not in out:
                                    out[part] = (v, float(c), sl, sr)
        memo[key] = out
        return out

    return rec(tuple(range(X.shape[0])), K)


def enumerate_valid_trees(data, S, K):
    """All distinct valid K-leaf partitions splitting on ``S``.

    Distinctness is by induced partition of the rows; each partition is
    represented by the first tree found in a fixed search order.  Returns
    ``(trees, count)`` with trees sorted by canonical partition.
    """
    X = _as_X(data)
    S = sorted(int(j) for j in S)
    K = int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    _check_budget(X.shape[0], len(S), K)
    if K > 1 and not S:
        return [], 0
    found = _enumerate(X, S, K)
    keys = sorted(found)
    trees = [Tree.build(found[k]) for k in keys]
    return trees, len(trees)


def count_valid_trees(data, S, K):
    return enumerate_valid_trees(data, S, K)[1]


@lru_cache(maxsize=64)
def _generic_log_counts(n, n_vars, kmax):
    """Log partition counts ``log N(n, k)`` for ``k = 1..kmax`` on generic data.

    Counts normalised slicing trees: a node is a run of cuts on one variable
    and its children may not open with that variable again.  With ``n``
    points in general position distinct trees of this form give distinct
    partitions, up to cuts that happen to line up across siblings.
    Per-``k`` tables are kept scaled by ``exp(off[k])`` to stay in range.
    """
    s = n_vars
    sizes = np.arange(n + 1)
    # r[k]: children that avoid the parent's variable; g[k]: runs of >= 1 such children
    r = {1: (sizes >= 1).astype(float)}
    g = {1: r[1].copy()}
    off = {1: 0.0}
    out = [0.0]
    for k in range(2, kmax + 1):
        terms = []
        for k1 in range(1, k):
            a, b = r[k1], g[k - k1]
            conv = np.convolve(a, b)[: n + 1]
            terms.append((off[k1] + off[k - k1], conv))
        top = max(t[0] for t in terms)
        node = sum(np.exp(o - top) * c for o, c in terms)
        node[: k] = 0.0
        peak = node.max()
        if peak <= 0:
            out.extend([-math.inf] * (kmax - k + 1))
            break
        node /= peak
        off[k] = top + math.log(peak)
        r[k] = (s - 1) * node
        g[k] = r[k] + node
        out.append(math.log(s * node[n]) + off[k] if node[n] > 0 else -math.inf)
    return tuple(out)


def approx_log_count(n, n_vars, K):
    """Approximate log number of valid K-partitions when enumeration is out of reach.

    Exact for one variable, ``log C(n-1, K-1)``; for more variables it counts
    normalised slicing trees on ``n`` points in general position (see
    :func:`_generic_log_counts`) and slightly overcounts.
    """
    n, K, s = int(n), int(K), max(int(n_vars), 1)
    if K == 1:
        return 0.0
    if K > n:
        return -math.inf
    if s == 1:
        return math.lgamma(n) - math.lgamma(K) - math.lgamma(n - K + 1)
    kmax = 1 << max(K - 1, 1).bit_length()
    return _generic_log_counts(n, s, min(kmax, n))[K - 1]


def count_partitions(data, S, K, max_count=200_000):
    """Exact count of valid K-partitions on ``S``, gated on their estimated number.

    Unlike :func:`count_valid_trees` this ignores the worst-case bound and
    only refuses (``BudgetExceeded``) when :func:`approx_log_count` expects
    more than ``max_count`` partitions.
    """
    X = _as_X(data)
    S = sorted(int(j) for j in S)
    K = int(K)
    if K < 1:
        raise ValueError("K must be >= 1")
    if K == 1:
        return 1
    if not S or K > X.shape[0]:
        return 0
    est = approx_log_count(X.shape[0], len(S), K)
    if est > math.log(max_count):
        raise BudgetExceeded(f"about {math.exp(est):.3g} partitions expected (n={X.shape[0]}, |S|={len(S)}, K={K})")
    return len(_enumerate(X, S, K))


def tree_multiplicity(data, S, labels):
    """Number of valid trees on ``S`` (midpoint cuts) inducing the row partition ``labels``."""
    X = _as_X(data)
    labels = np.asarray(labels)
    S = sorted(int(j) for j in S)
    memo = {}

    def rec(rows):
        if rows in memo:
            return memo[rows]
        idx = np.array(rows)
        lab = labels[idx]
        if np.all(lab == lab[0]):
            memo[rows] = 1
            return 1
        total = 0
        for v in S:
            xv = X[idx, v]
            order = np.argsort(xv, kind="stable")
            xs, ls = xv[order], lab[order]
            u, grp = np.unique(xs, return_inverse=True)
            ng = u.shape[0]
            if ng < 2:
                continue
            # a cut after group g is clean iff no cell spans groups g and g+1
            span = np.zeros(ng, dtype=np.int64)
            for cell in np.unique(ls):
                g = grp[ls == cell]
                span[g.min()] += 1
                span[g.max()] -= 1
            crossing = np.cumsum(span)[:-1]
            for g in np.flatnonzero(crossing == 0):
                c = 0.5 * (u[g] + u[g + 1])
                go = xv <= c
                total += rec(tuple(idx[go].tolist())) * rec(tuple(idx[~go].tolist()))
        memo[rows] = total
        return total

    return rec(tuple(range(X.shape[0])))


# ---------------------------------------------------------------------------
# approximation gaps

def _f0(data, f0):
    if f0 is not None:
        return np.asarray(f0, dtype=np.float64)
    if isinstance(data, Dataset) and data.f0 is not None:
        return data.f0
    raise ValueError("f0 values are required")


def _cell_projection(f, parts):
    fit = np.empty_like(f)
    for cell in parts:
        idx = np.array(cell)
        vals = f[idx]
        fit[idx] = vals[0] if np.ptp(vals) == 0 else vals.mean()
    return fit


def projection(data, S, K, f0=None):
    """Best tree step function with at most K leaves on ``S``: ``(error, fitted, tree)``.

    Heights are cell means of ``f0``; the error is the empirical L2 norm
    ``sqrt(mean((f0 - fit)^2))``.
    """
    X = _as_X(data)
    f = _f0(data, f0)
    S = sorted(int(j) for j in S)
    best = None
    for k in range(1, int(K) + 1):
        if k > 1 and not S:
            break
        _check_budget(X.shape[0], len(S), k)
        found = _enumerate(X, S, k)
        for part in sorted(found):
            fit = _cell_projection(f, part)
            err = math.sqrt(float(np.mean((f - fit) ** 2)))
            if best is None or err < best[0]:
                best = (err, fit, found[part])
    err, fit, spec = best
    tree = Tree.build(spec)
    return err, fit, tree.with_heights([fit[tree.leaf_index(X) == j][0] for j in range(tree.n_leaves)])


def separation_gap(data, S, K, f0=None):
    """``delta = min over trees with <= K leaves on S of ||f0 - f_T||_n``; returns ``(delta, tree)``."""
    err, _, tree = projection(data, S, K, f0)
    return err, tree


def surplus_covariance(data, S1, S, K, f0=None):
    """``mean((f0 - fhat_S1) * (fhat_S - fhat_S1))`` with best-K projections."""
    f = _f0(data, f0)
    _, fit1, _ = projection(data, S1, K, f)
    _, fitS, _ = projection(data, S, K, f)
    return float(np.mean((f - fit1) * (fitS - fit1)))
