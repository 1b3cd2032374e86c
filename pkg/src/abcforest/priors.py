"""Priors of the spike-and-forest model: subsets, tree shapes, leaf heights, noise."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats

from .model import LEAF, Dataset, Tree, candidate_cuts

# uniform-over-valid-trees sampling: exact enumeration up to this many trees
MAX_ENUMERATED = 10**6
MAX_REJECTIONS = 10**5


class UnsupportedPrior(RuntimeError):
    """Raised when a prior quantity needs an infeasible enumeration."""


@dataclass(frozen=True)
class SubsetPriorSpec:
    kind: str = "beta-binomial"
    a: float = 1.0
    b: float = 1.0
    theta: float = 0.5

    def __post_init__(self):
        if self.kind == "beta-binomial":
            if not (self.a > 0 and self.b > 0):
                raise ValueError("beta-binomial needs a > 0 and b > 0")
        elif self.kind == "fixed-theta":
            if not (0.0 <= self.theta <= 1.0):
                raise ValueError("theta must lie in [0, 1]")
        else:
            raise ValueError(f"unknown subset prior {self.kind!r}")

    def log_prob(self, size, p):
        """log prior mass of one particular subset with ``size`` members."""
        if self.kind == "beta-binomial":
            return float(special.betaln(self.a + size, self.b + p - size) - special.betaln(self.a, self.b))
        with np.errstate(divide="ignore"):
            return float(size * np.log(self.theta) + (p - size) * np.log1p(-self.theta))

    def inclusion_prob(self):
        if self.kind == "beta-binomial":
            return self.a / (self.a + self.b)
        return self.theta


@dataclass(frozen=True)
class TreePriorSpec:
    kind: str = "branching"
    lam: float = 5.0
    gamma: float = 0.95
    beta: float = 2.0
    k_max: Optional[int] = None

    def __post_init__(self):
        if self.kind == "branching":
            if not (0.0 <= self.gamma < 1.0) or self.beta < 0:
                raise ValueError("branching prior needs 0 <= gamma < 1 and beta >= 0")
        elif self.kind == "poisson-uniform":
            if not self.lam >= 0:
                raise ValueError("Poisson rate must be non-negative")
        else:
            raise ValueError(f"unknown tree prior {self.kind!r}")
        if self.k_max is not None and self.k_max < 1:
            raise ValueError("k_max must be >= 1")

    def k_upper(self, n, cap=None):
        hi = n if self.k_max is None else min(n, self.k_max)
        return hi if cap is None else max(1, min(hi, int(cap)))

    def log_k_prob(self, K, n, cap=None):
        """Poisson(lam) truncated to 1..k_upper(n, cap), renormalised.

        ``cap`` is the largest leaf count the subset can reach (see
        :func:`max_leaves`); mass above it is redistributed.
        """
        hi = self.k_upper(n, cap)
        if K < 1 or K > hi:
            return -np.inf
        ks = np.arange(1, hi + 1)
        if self.lam == 0:
            return 0.0 if K == 1 else -np.inf
        logpmf = stats.poisson.logpmf(ks, self.lam)
        return float(logpmf[K - 1] - special.logsumexp(logpmf))

    def sample_k(self, n, rng, cap=None):
        hi = self.k_upper(n, cap)
        if self.lam == 0 or hi == 1:
            return 1
        ks = np.arange(1, hi + 1)
        logpmf = stats.poisson.logpmf(ks, self.lam)
        w = np.exp(logpmf - logpmf.max())
        return int(ks[np.searchsorted(np.cumsum(w / w.sum()), rng.random(), side="right").clip(0, hi - 1)])


@dataclass(frozen=True)
class LeafPriorSpec:
    sigma_beta_sq: Optional[float] = None

    def resolve(self, n_trees):
        v = 1.0 / n_trees if self.sigma_beta_sq is None else float(self.sigma_beta_sq)
        if not v > 0:
            raise ValueError("sigma_beta_sq must be positive")
        return v


@dataclass(frozen=True)
class NoisePriorSpec:
    kind: str = "inv-chisq"
    sigma_sq: float = 1.0
    nu: float = 3.0
    lam: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("fixed", "inv-chisq"):
            raise ValueError(f"unknown noise prior {self.kind!r}")
        if self.kind == "fixed" and not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")
        if self.kind == "inv-chisq" and not self.nu > 0:
            raise ValueError("nu must be positive")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lam must be positive")

    @property
    def fixed(self):
        return self.kind == "fixed"

    def resolve_lam(self, y=None):
        """Scale parameter; defaults to the sample variance of ``y``."""
        if self.lam is not None:
            return float(self.lam)
        if y is None or len(y) < 2:
            return 1.0
        v = float(np.var(y, ddof=1))
        return v if v > 0 else 1.0


# ---------------------------------------------------------------------------

def sample_subset(spec, p, rng):
    if p < 1:
        raise ValueError("p must be >= 1")
    theta = rng.beta(spec.a, spec.b) if spec.kind == "beta-binomial" else spec.theta
    gamma = rng.random(p) < theta
    return frozenset(int(j) for j in np.flatnonzero(gamma))


def sample_leaf_heights(K, spec, rng, n_trees=1):
    return rng.normal(0.0, math.sqrt(spec.resolve(n_trees)), size=K)


def sample_sigma_sq(spec, rng, y=None):
    if spec.fixed:
        return float(spec.sigma_sq)
    return spec.nu * spec.resolve_lam(y) / rng.chisquare(spec.nu)


def split_prob(spec, depth):
    return spec.gamma * (1.0 + depth) ** (-spec.beta)


def _as_X(data):
    return data.X if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)


def max_leaves(X, S):
    """Largest number of nonempty cells a tree on ``S`` can carve from the rows of ``X``."""
    S = sorted(S)
    if not S:
        return 1
    return int(np.unique(np.asarray(X)[:, S], axis=0).shape[0])


def _n_splittable(X, rows, S):
    return sum(1 for v in S if np.ptp(X[rows, v]) > 0) if len(rows) > 1 else 0


def grow_branching(X, S, gamma, beta, rng, rows=None):
    """Grow a tree from the branching prior, restricted to the rows of ``X``."""
    S = sorted(S)
    rows = np.arange(X.shape[0]) if rows is None else rows
    if not S:
        return Tree.root()

    def rec(rows, depth):
        if rng.random() >= gamma * (1.0 + depth) ** (-beta):
            return None
        v = S[rng.integers(0, len(S))]
        cuts = candidate_cuts(X[rows, v])
        if cuts.size == 0:
            return None
        c = float(cuts[rng.integers(0, cuts.size)])
        go = X[rows, v] <= c
        return (v, c, rec(rows[go], depth + 1), rec(rows[~go], depth + 1))

    return Tree.build(rec(rows, 0))


def _grow_k_leaves(X, S, K, rng):
    """Sequential K-leaf grower: split a uniform leaf on a uniform variable."""
    S = sorted(S)
    for _ in range(MAX_REJECTIONS):
        cells = [np.arange(X.shape[0])]
        # node rows: [var, cut, left, right]
        tree_nodes = [[LEAF, np.nan, LEAF, LEAF]]
        leaf_node = [0]
        ok = True
        for _k in range(K - 1):
            j = int(rng.integers(0, len(cells)))
            v = S[rng.integers(0, len(S))]
            cuts = candidate_cuts(X[cells[j], v])
            if cuts.size == 0:
                ok = False
                break
            c = float(cuts[rng.integers(0, cuts.size)])
            rows = cells[j]
            go = X[rows, v] <= c
            node = leaf_node[j]
            a, b = len(tree_nodes), len(tree_nodes) + 1
            tree_nodes[node] = [v, c, a, b]
            tree_nodes.append([LEAF, np.nan, LEAF, LEAF])
            tree_nodes.append([LEAF, np.nan, LEAF, LEAF])
            cells[j] = rows[go]
            leaf_node[j] = a
            cells.append(rows[~go])
            leaf_node.append(b)
        if ok:
            arr = np.array(tree_nodes, dtype=object)
            return Tree(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.float64),
                        arr[:, 2].astype(np.int64), arr[:, 3].astype(np.int64))
    raise UnsupportedPrior(f"no valid {K}-leaf tree found after {MAX_REJECTIONS} attempts")


def sample_tree_structure(spec, S, data, rng):
    """Draw a bare tree partition from the tree prior, splitting only on ``S``."""
    X = _as_X(data)
    if not S:
        return Tree.root()
    if spec.kind == "branching":
        return grow_branching(X, S, spec.gamma, spec.beta, rng)
    K = spec.sample_k(X.shape[0], rng, max_leaves(X, S))
    if K == 1:
        return Tree.root()
    from .theory import BudgetExceeded, enumerate_valid_trees

    try:
        trees, count = enumerate_valid_trees(X, S, K)
    except BudgetExceeded:
        trees, count = None, None
    if trees is not None and count <= MAX_ENUMERATED:
        if count == 0:
            raise UnsupportedPrior(f"no valid tree with {K} leaves on S={sorted(S)}")
        return trees[int(rng.integers(0, count))]
    return _grow_k_leaves(X, S, K, rng)


def log_tree_prior(tree, spec, S, data):
    """log prior mass of a bare tree structure given the subset ``S``."""
    X = _as_X(data)
    S = frozenset(S)
    if not tree.used_vars() <= S:
        return -np.inf
    lab = tree.apply(X)
    if not np.all(np.bincount(lab, minlength=tree.n_nodes)[tree.leaves] > 0):
        return -np.inf
    if spec.kind == "poisson-uniform":
        from .theory import BudgetExceeded, count_valid_trees

        K = tree.n_leaves
        lk = spec.log_k_prob(K, X.shape[0], max_leaves(X, S))
        if K == 1:
            return lk
        try:
            count = count_valid_trees(X, S, K)
        except BudgetExceeded as exc:
            raise UnsupportedPrior(str(exc)) from exc
        return lk - math.log(count)

    ns = len(S)
    depth = tree.depth()
    out = 0.0

    def rec(k, rows):
        nonlocal out
        d = depth[k]
        pd = split_prob(spec, d)
        if tree.var[k] == LEAF:
            frac = _n_splittable(X, rows, S) / ns if ns else 0.0
            out += math.log1p(-pd * frac) if pd * frac < 1 else -np.inf
            return
        v = int(tree.var[k])
        ncuts = candidate_cuts(X[rows, v]).size
        out += math.log(pd) - math.log(ns) - math.log(ncuts)
        go = X[rows, v] <= tree.cut[k]
        rec(int(tree.left[k]), rows[go])
        rec(int(tree.right[k]), rows[~go])

    rec(0, np.arange(X.shape[0]))
    return out
