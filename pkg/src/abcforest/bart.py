"""Bayesian backfitting sampler for a sum of regression trees.

The sampler works on a restricted variable pool ``S``: every split it
proposes uses a variable from ``S``.  Heavy lifting lives in
:mod:`abcforest.kernels`; this module owns configuration, state and the
conversion between kernel arrays and :class:`~abcforest.model.Tree` objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .model import LEAF, Dataset, Forest, Tree
from .priors import LeafPriorSpec, NoisePriorSpec, TreePriorSpec


@dataclass(frozen=True)
class BartConfig:
    T: int = 10
    burn_in: int = 100
    tree_prior: TreePriorSpec = field(default_factory=TreePriorSpec)
    leaf_prior: LeafPriorSpec = field(default_factory=LeafPriorSpec)
    noise_prior: NoisePriorSpec = field(default_factory=NoisePriorSpec)
    move_probs: tuple = (0.25, 0.25, 0.5)

    def __post_init__(self):
        if int(self.T) < 1:
            raise ValueError("T must be >= 1")
        if int(self.burn_in) < 0:
            raise ValueError("burn_in must be >= 0")
        mp = tuple(float(x) for x in self.move_probs)
        if len(mp) != 3 or min(mp) < 0 or abs(sum(mp) - 1.0) > 1e-9:
            raise ValueError("move_probs must be three non-negative numbers summing to 1")
        if mp[0] == 0:
            raise ValueError("grow probability must be positive")
        object.__setattr__(self, "move_probs", mp)
        if self.tree_prior.kind != "branching":
            raise ValueError("the backfitting sampler supports the branching tree prior only")

    @property
    def sigma_beta_sq(self):
        return self.leaf_prior.resolve(self.T)


class BartState:
    """Mutable sampler state over a fixed training set.

    Node arrays have shape ``(T, 2n - 1)``, the largest tree with nonempty
    leaves that ``n`` rows admit.  ``yhat`` caches the current fit at the
    training rows.
    """

    def __init__(self, data, S, config, sigma_sq=None):
        X = np.ascontiguousarray(data.X, dtype=np.float64)
        y = np.ascontiguousarray(data.y, dtype=np.float64)
        n = y.shape[0]
        if n < 1:
            raise ValueError("need at least one training row")
        S = np.array(sorted(int(j) for j in S), dtype=np.int64)
        if S.size and (S.min() < 0 or S.max() >= X.shape[1]):
            raise ValueError("S contains out-of-range variables")
        self.X, self.y, self.S, self.config = X, y, S, config
        self.rank, self.uvals, self.nuniq = K.rank_encode(X)
        T, cap = config.T, 2 * n - 1
        self.tvar = np.empty((T, cap), dtype=np.int64)
        self.tcut = np.empty((T, cap))
        self.trank = np.empty((T, cap), dtype=np.int64)
        self.tleft = np.empty((T, cap), dtype=np.int64)
        self.tright = np.empty((T, cap), dtype=np.int64)
        self.tparent = np.empty((T, cap), dtype=np.int64)
        self.tdepth = np.empty((T, cap), dtype=np.int64)
        self.tval = np.empty((T, cap))
        self.leaf_of = np.empty((T, n), dtype=np.int64)
        self.yhat = np.empty(n)
        K.init_forest(self.tvar, self.tcut, self.trank, self.tleft, self.tright,
                      self.tparent, self.tdepth, self.tval, self.leaf_of, self.yhat)
        noise = config.noise_prior
        if noise.fixed:
            s2 = noise.sigma_sq
        elif sigma_sq is not None:
            s2 = float(sigma_sq)
        else:
            s2 = float(np.var(y, ddof=1)) if n > 1 else 1.0
            if not s2 > 0:
                s2 = 1.0
        self._sigma_sq = np.array([s2])
        self.nu = float(noise.nu)
        self.lam = noise.resolve_lam(y)
        self.move_counts = np.zeros(4, dtype=np.int64)

    @property
    def sigma_sq(self):
        return float(self._sigma_sq[0])

    @property
    def n(self):
        return self.y.shape[0]

    def sweeps(self, n_sweeps, rng):
        cfg = self.config
        tp = cfg.tree_prior
        pg, pp, pc = cfg.move_probs
        counts = K.bart_sweeps(
            int(n_sweeps), self.y, self.rank, self.uvals, self.nuniq, self.S,
            self._sigma_sq, cfg.sigma_beta_sq, cfg.noise_prior.fixed, self.nu, self.lam,
            tp.gamma, tp.beta, pg, pp, pc,
            self.tvar, self.tcut, self.trank, self.tleft, self.tright, self.tparent,
            self.tdepth, self.tval, self.leaf_of, self.yhat, rng)
        self.move_counts += counts
        return self

    def tree(self, t):
        return _extract(self.tvar[t], self.tcut[t], self.tleft[t], self.tright[t], self.tval[t])

    def forest(self):
        return Forest(self.tree(t) for t in range(self.config.T))

    def used_vars(self):
        v = self.tvar[self.tvar >= 0]
        return frozenset(int(j) for j in np.unique(v))

    def predict(self, X):
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        return K.forest_predict(self.tvar, self.tcut, self.tleft, self.tright, self.tval, X)

    def tree_log_marginals(self):
        """Per-tree integrated likelihood of the current partial residuals."""
        out = np.empty(self.config.T)
        for t in range(self.config.T):
            lab = self.leaf_of[t]
            r = self.y - self.yhat + self.tval[t, lab]
            _, dense = np.unique(lab, return_inverse=True)
            out[t] = K.partition_log_marginal(dense.astype(np.int64), int(dense.max()) + 1, r,
                                              self.sigma_sq, self.config.sigma_beta_sq)
        return out

    def check(self, atol=1e-8):
        """Recompute the cached fit and leaf assignments from scratch."""
        forest = self.forest()
        if not np.allclose(forest.predict(self.X), self.yhat, atol=atol):
            return False
        for t, tree in enumerate(forest):
            if not tree.used_vars() <= frozenset(self.S.tolist()):
                return False
            lab = tree.leaf_index(self.X)
            if np.any(np.bincount(lab, minlength=tree.n_leaves) == 0):
                return False
            # the kernel's leaf ids must induce the same partition
            _, a = np.unique(self.leaf_of[t], return_inverse=True)
            if not _same_partition(a, lab):
                return False
        return True


def _same_partition(a, b):
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def _extract(var, cut, left, right, val):
    def rec(k):
        if var[k] == LEAF:
            return float(val[k])
        return (int(var[k]), float(cut[k]), rec(int(left[k])), rec(int(right[k])))

    return Tree.build(rec(0))


# ---------------------------------------------------------------------------

def log_marginal_tree(partition, residuals, sigma_sq, sigma_beta_sq, X=None):
    """log of the Gaussian likelihood with leaf heights integrated out."""
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if partition.n_leaves == 1:
        lab = np.zeros(r.shape[0], dtype=np.int64)
    else:
        if X is None:
            raise ValueError("X is required to route rows through a split tree")
        if isinstance(X, Dataset):
            X = X.X
        lab = partition.leaf_index(X)
        if lab.shape[0] != r.shape[0]:
            raise ValueError("residuals and X disagree on n")
    return float(K.partition_log_marginal(lab, partition.n_leaves, r, float(sigma_sq), float(sigma_beta_sq)))


def init_state(data, S, config, sigma_sq=None):
    return BartState(data, S, config, sigma_sq)


def backfit_sweep(state, config, rng):
    """One pass of Metropolis-Hastings over every tree, then a noise update."""
    if config is not state.config and config != state.config:
        raise ValueError("state was built for a different configuration")
    return state.sweeps(1, rng)


def draw_posterior_sample(data, S, config, rng, return_state=False):
    """Run ``burn_in`` sweeps from root-only trees; return ``(forest, sigma_sq)``."""
    state = BartState(data, S, config)
    state.sweeps(config.burn_in, rng)
    if return_state:
        return state
    return state.forest(), state.sigma_sq


class MeanFit:
    """Average of several posterior draws, used as a point predictor."""

    def __init__(self, forests, sigma_sqs):
        self.forests = tuple(forests)
        self.sigma_sqs = np.asarray(sigma_sqs, dtype=np.float64)

    @property
    def sigma_sq(self):
        return float(self.sigma_sqs.mean())

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.mean([f.predict(X) for f in self.forests], axis=0)

    def evaluate(self, x):
        return float(self.predict(np.asarray(x, dtype=np.float64)[None, :])[0])

    def used_vars(self):
        out = frozenset()
        for f in self.forests:
            out |= f.used_vars()
        return out


def posterior_mean_fit(data, S, config, n_samples, rng, thin=1):
    """Burn in, then average ``n_samples`` draws taken every ``thin`` sweeps."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    state = BartState(data, S, config)
    state.sweeps(config.burn_in, rng)
    forests, s2 = [state.forest()], [state.sigma_sq]
    for _ in range(n_samples - 1):
        state.sweeps(thin, rng)
        forests.append(state.forest())
        s2.append(state.sigma_sq)
    return MeanFit(forests, s2)
