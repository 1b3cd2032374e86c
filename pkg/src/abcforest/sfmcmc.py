"""Metropolis-Hastings over (variable subset, tree partitions).

The target for one tree is

    pi(S) * pi(K | S) / (Delta_S(K) * mult_S(tree)) * ML(y | tree)

where ``pi(K | S)`` is a Poisson truncated to the leaf counts reachable with
``S``, ``Delta_S(K)`` counts distinct valid K-partitions on ``S`` and
``mult_S(tree)`` counts the trees inducing the same partition, so that every
valid partition gets prior mass ``pi(K | S) / Delta``.
Leaf heights are integrated out with the noise variance fixed at one.

With several trees, step ``s`` updates tree ``s mod T`` against the partial
residual of the others (whose heights are then redrawn), so each step is a
Metropolis-within-Gibbs update.

Trees are handled as nested tuples ``(var, cut, left, right)`` with ``None``
for a leaf; cuts are midpoints of consecutive distinct values of the cell.
"""
from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K_
from .model import Tree, format_subset
from .priors import LeafPriorSpec, SubsetPriorSpec, TreePriorSpec, max_leaves
from .theory import BudgetExceeded, approx_log_count, count_partitions, tree_multiplicity

STAY_MOVES = ("grow", "prune", "change", "rule")


@dataclass(frozen=True)
class SfConfig:
    iterations: int = 5000
    subset_move_probs: tuple = (0.4, 0.4, 0.2)
    birth_scale: float = 0.7
    none_prob: float = 0.2
    tree_prior: TreePriorSpec = field(default_factory=lambda: TreePriorSpec("poisson-uniform", lam=5.0))
    subset_prior: SubsetPriorSpec = field(default_factory=SubsetPriorSpec)
    leaf_prior: LeafPriorSpec = field(default_factory=LeafPriorSpec)
    T: int = 1
    burn_in_frac: float = 0.2
    sigma_sq: float = 1.0

    def __post_init__(self):
        mp = tuple(float(x) for x in self.subset_move_probs)
        if len(mp) != 3 or min(mp) < 0 or abs(sum(mp) - 1) > 1e-9:
            raise ValueError("subset_move_probs must be three non-negative numbers summing to 1")
        object.__setattr__(self, "subset_move_probs", mp)
        if not (0 < self.birth_scale <= 1):
            raise ValueError("birth_scale must lie in (0, 1]")
        if not (0 < self.none_prob < 1):
            raise ValueError("none_prob must lie in (0, 1)")
        if self.tree_prior.kind != "poisson-uniform":
            raise ValueError("the subset-forest sampler uses the poisson-uniform tree prior")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0 <= self.burn_in_frac < 1):
            raise ValueError("burn_in_frac must lie in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


# ---------------------------------------------------------------------------
# nested-tree helpers

def _get(spec, path):
    for b in path:
        spec = spec[2 + b]
    return spec


def _set(spec, path, new):
    if not path:
        return new
    v, c, left, right = spec
    if path[0] == 0:
        return (v, c, _set(left, path[1:], new), right)
    return (v, c, left, _set(right, path[1:], new))


class _Walk:
    """Leaves and internal nodes of a nested tree routed over the rows of X."""

    __slots__ = ("leaves", "internals", "labels", "valid")

    def __init__(self, spec, X):
        self.leaves = []
        self.internals = []
        self.valid = True
        labels = np.empty(X.shape[0], dtype=np.int64)
        stack = [((), spec, np.arange(X.shape[0]))]
        while stack:
            path, s, rows = stack.pop()
            if s is None:
                if rows.size == 0:
                    self.valid = False
                labels[rows] = len(self.leaves)
                self.leaves.append((path, rows))
                continue
            v, c, left, right = s
            xv = X[rows, v]
            go = xv <= c
            if not go.any() or go.all() or 0.5 * (xv[go].max() + xv[~go].min()) != c:
                self.valid = False
            self.internals.append((path, v, c, rows))
            stack.append((path + (1,), right, rows[~go]))
            stack.append((path + (0,), left, rows[go]))
        self.labels = labels

    @property
    def n_leaves(self):
        return len(self.leaves)


def _used_counts(spec, out=None):
    out = Counter() if out is None else out
    if spec is not None:
        out[spec[0]] += 1
        _used_counts(spec[2], out)
        _used_counts(spec[3], out)
    return out


def _cuts(X, rows, v):
    u = np.unique(X[rows, v])
    return 0.5 * (u[:-1] + u[1:])


def _is_nog(spec):
    return spec is not None and spec[2] is None and spec[3] is None


# ---------------------------------------------------------------------------
# state and target

@dataclass
class SfState:
    S: frozenset
    trees: list
    heights: list
    step: int = 0
    log_post: float = 0.0

    def forest(self):
        return [Tree.build(t) for t in self.trees]

    def used_vars(self):
        out = Counter()
        for t in self.trees:
            _used_counts(t, out)
        return frozenset(out)

    def n_leaves(self):
        return [_count_leaves(t) for t in self.trees]


def _count_leaves(spec):
    return 1 if spec is None else _count_leaves(spec[2]) + _count_leaves(spec[3])


class _Model:
    """Target ingredients with caches for one dataset and configuration."""

    def __init__(self, data, config):
        self.X = np.ascontiguousarray(data.X, dtype=np.float64)
        self.y = np.ascontiguousarray(data.y, dtype=np.float64)
        self.n, self.p = self.X.shape
        self.cfg = config
        self.sb2 = config.leaf_prior.resolve(config.T)
        self.s2 = float(config.sigma_sq)
        tp = config.tree_prior
        self.kmax = tp.k_upper(self.n)
        self._logpk = [tp.log_k_prob(k, self.n) for k in range(self.kmax + 2)]
        self._delta = {}
        self._logpk_S = {}
        self._mult = {}
        self.delta_approximated = False

    def log_pk(self, K):
        return self._logpk[K] if 1 <= K <= self.kmax else -np.inf

    def pk_ratio(self, K_from, K_to):
        a, b = self.log_pk(K_from), self.log_pk(K_to)
        if b == -np.inf:
            return 0.0
        return min(math.exp(b - a), 1.0)

    def log_pk_given(self, S, K):
        """Leaf-count prior renormalised over the counts reachable with ``S``."""
        if S not in self._logpk_S:
            cap = max_leaves(self.X, S)
            tp = self.cfg.tree_prior
            self._logpk_S[S] = [tp.log_k_prob(k, self.n, cap) for k in range(self.kmax + 2)]
        return self._logpk_S[S][K] if 1 <= K <= self.kmax else -np.inf

    def log_delta(self, S, K):
        key = (S, K)
        if key not in self._delta:
            try:
                c = count_partitions(self.X, S, K)
                val = math.log(c) if c > 0 else -np.inf
            except BudgetExceeded:
                val = approx_log_count(self.n, len(S), K)
                self.delta_approximated = True
            self._delta[key] = val
        return self._delta[key]

    def log_mult(self, S, walk):
        if walk.n_leaves == 1:
            return 0.0
        key = (S, tuple(walk.labels.tolist()))
        if key not in self._mult:
            self._mult[key] = math.log(tree_multiplicity(self.X, S, walk.labels))
        return self._mult[key]

    def log_tree_term(self, S, walk):
        K = walk.n_leaves
        return self.log_pk_given(S, K) - self.log_delta(S, K) - self.log_mult(S, walk)

    def lml(self, walk, r):
        return float(K_.partition_log_marginal(walk.labels, walk.n_leaves, r, self.s2, self.sb2))

    def log_subset(self, S):
        return self.cfg.subset_prior.log_prob(len(S), self.p)

    # proposal probabilities that depend on the state
    def subset_probs(self, S):
        return _subset_probs(self.cfg, S, self.p)

    def add_options(self, spec, walk, j):
        """Probabilities of (birth, replace, none) when adding ``j`` to tree ``spec``."""
        K = walk.n_leaves
        rho = self.cfg.birth_scale * self.pk_ratio(K, K + 1)
        birth_ok = rho > 0 and any(_cuts(self.X, rows, j).size for _, rows in walk.leaves)
        counts = _used_counts(spec)
        replace_ok = any(c >= 2 for c in counts.values())
        if birth_ok and replace_ok:
            b, r = rho, 1.0 - rho
        elif birth_ok:
            b, r = 1.0, 0.0
        elif replace_ok:
            b, r = 0.0, 1.0
        else:
            return 0.0, 0.0, 1.0
        eta = self.cfg.none_prob
        return (1 - eta) * b, (1 - eta) * r, eta

    def delete_options(self, spec, walk, j, others):
        """Probabilities of (death, replace) when deleting ``j`` used once at a node of ``spec``."""
        u = next(path for path, v, _, _ in walk.internals if v == j)
        node = _get(spec, u)
        death_ok = _is_nog(node)
        rho = self.cfg.birth_scale * self.pk_ratio(walk.n_leaves, walk.n_leaves - 1)
        replace_ok = len(others) > 0
        if death_ok and replace_ok:
            return rho, 1.0 - rho
        if death_ok:
            return 1.0, 0.0
        if replace_ok:
            return 0.0, 1.0
        return 0.0, 0.0

    def stay_options(self, S, K):
        w = np.array([1.0 if (S and self.log_pk(K + 1) > -np.inf) else 0.0,
                      1.0 if K >= 2 else 0.0,
                      1.0 if (K >= 2 and S) else 0.0,
                      1.0 if K >= 2 else 0.0])
        tot = w.sum()
        return w / tot if tot > 0 else w


# ---------------------------------------------------------------------------
# proposals

@dataclass
class Proposal:
    kind: str
    move: str
    S: frozenset
    spec: object
    log_q_ratio: float = 0.0  # log q(reverse) - log q(forward)
    reject: bool = False


def propose_subset(state, p, rng, config):
    """Draw the subset move and its candidate variable."""
    a, d, s = _subset_probs(config, state.S, p)
    u = rng.random()
    if u < a:
        comp = sorted(set(range(p)) - state.S)
        return "add", comp[int(rng.integers(0, len(comp)))]
    if u < a + d:
        cur = sorted(state.S)
        return "delete", cur[int(rng.integers(0, len(cur)))]
    return "stay", None


def _subset_probs(config, S, p):
    a, d, s = config.subset_move_probs
    if len(S) == p:
        s, a = s + a, 0.0
    if len(S) == 0:
        s, d = s + d, 0.0
    return a, d, s


def _replace_node(spec, path, v, cut):
    _, _, left, right = _get(spec, path)
    return _set(spec, path, (v, float(cut), left, right))


def propose_tree_given_subset(model, state, t, kind, j, rng):
    """Tree proposal for tree ``t`` given the subset move ``(kind, j)``."""
    X = model.X
    S = state.S
    spec = state.trees[t]
    walk = _Walk(spec, X)
    K = walk.n_leaves
    a, d, s = model.subset_probs(S)
    p = model.p

    if kind == "add":
        S2 = S | {j}
        pb, pr, pn = model.add_options(spec, walk, j)
        u = rng.random()
        if u < pb:
            elig = [(path, rows) for path, rows in walk.leaves if _cuts(X, rows, j).size]
            path, rows = elig[int(rng.integers(0, len(elig)))]
            cuts = _cuts(X, rows, j)
            c = cuts[int(rng.integers(0, cuts.size))]
            new = _set(spec, path, (j, float(c), None, None))
            log_f = math.log(a / (p - len(S)) * pb / len(elig) / cuts.size)
            w2 = _Walk(new, X)
            _, d2, _ = model.subset_probs(S2)
            pdeath, _ = model.delete_options(new, w2, j, _used_counts(new).keys() - {j})
            log_r = _log(d2 / len(S2) * pdeath)
            return Proposal(kind, "birth", S2, new, log_r - log_f)
        if u < pb + pr:
            counts = _used_counts(spec)
            elig = [(path, v, rows) for path, v, _, rows in walk.internals if counts[v] >= 2]
            path, v_old, rows = elig[int(rng.integers(0, len(elig)))]
            cuts = _cuts(X, rows, j)
            if cuts.size == 0:
                return Proposal(kind, "replace", S2, spec, reject=True)
            c = cuts[int(rng.integers(0, cuts.size))]
            new = _replace_node(spec, path, j, c)
            log_f = math.log(a / (p - len(S)) * pr / len(elig) / cuts.size)
            w2 = _Walk(new, X)
            if not w2.valid:
                return Proposal(kind, "replace", S2, new, reject=True)
            others = _used_counts(new).keys() - {j}
            _, d2, _ = model.subset_probs(S2)
            _, prep = model.delete_options(new, w2, j, others)
            log_r = _log(d2 / len(S2) * prep / len(others) / _cuts(X, rows, v_old).size)
            return Proposal(kind, "replace", S2, new, log_r - log_f)
        # subset-only: any tree could have produced it in a scan over trees,
        # but the scan fixes t, so only tree t's option probability enters
        _, d2, _ = model.subset_probs(S2)
        log_f = math.log(a / (p - len(S)) * pn)
        log_r = math.log(d2 / len(S2))
        return Proposal(kind, "none", S2, spec, log_r - log_f)

    if kind == "delete":
        S2 = S - {j}
        total = Counter()
        for tt in state.trees:
            _used_counts(tt, total)
        if total[j] == 0:
            a2, _, _ = model.subset_probs(S2)
            pn = model.add_options(spec, walk, j)[2]
            log_f = math.log(d / len(S))
            log_r = _log(a2 / (p - len(S2)) * pn)
            return Proposal(kind, "none", S2, spec, log_r - log_f)
        counts = _used_counts(spec)
        if total[j] >= 2 or counts[j] != 1:
            return Proposal(kind, "blocked", S2, spec, reject=True)
        others = counts.keys() - {j}
        pdeath, prep = model.delete_options(spec, walk, j, others)
        if pdeath == 0 and prep == 0:
            return Proposal(kind, "blocked", S2, spec, reject=True)
        path = next(pt for pt, v, _, _ in walk.internals if v == j)
        rows = next(r for pt, v, _, r in walk.internals if pt == path)
        a2, _, _ = model.subset_probs(S2)
        if rng.random() < pdeath:
            new = _set(spec, path, None)
            log_f = math.log(d / len(S) * pdeath)
            w2 = _Walk(new, X)
            pb, _, _ = model.add_options(new, w2, j)
            elig = sum(1 for _, r in w2.leaves if _cuts(X, r, j).size)
            log_r = _log(a2 / (p - len(S2)) * pb / max(elig, 1) / _cuts(X, rows, j).size)
            return Proposal(kind, "death", S2, new, log_r - log_f)
        others = sorted(others)
        v = others[int(rng.integers(0, len(others)))]
        cuts = _cuts(X, rows, v)
        c = cuts[int(rng.integers(0, cuts.size))]
        new = _replace_node(spec, path, v, c)
        w2 = _Walk(new, X)
        if not w2.valid:
            return Proposal(kind, "replace", S2, new, reject=True)
        log_f = math.log(d / len(S) * prep / len(others) / cuts.size)
        counts2 = _used_counts(new)
        n_rep = sum(1 for _, vv, _, _ in w2.internals if counts2[vv] >= 2)
        _, pr2, _ = model.add_options(new, w2, j)
        log_r = _log(a2 / (p - len(S2)) * pr2 / n_rep / _cuts(X, rows, j).size)
        return Proposal(kind, "replace", S2, new, log_r - log_f)

    # stay
    probs = model.stay_options(S, K)
    if probs.sum() == 0:
        return Proposal(kind, "none", S, spec)
    move = STAY_MOVES[int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, 3))]
    Sl = sorted(S)
    if move == "grow":
        path, rows = walk.leaves[int(rng.integers(0, K))]
        v = Sl[int(rng.integers(0, len(Sl)))]
        cuts = _cuts(X, rows, v)
        if cuts.size == 0:
            return Proposal(kind, move, S, spec, reject=True)
        c = cuts[int(rng.integers(0, cuts.size))]
        new = _set(spec, path, (v, float(c), None, None))
        probs2 = model.stay_options(S, K + 1)
        nog2 = sum(1 for pt, _, _, _ in _Walk(new, X).internals if _is_nog(_get(new, pt)))
        log_f = math.log(probs[0] / K / len(Sl) / cuts.size)
        log_r = _log(probs2[1] / nog2)
        return Proposal(kind, move, S, new, log_r - log_f)
    if move == "prune":
        nogs = [(pt, v, rows) for pt, v, _, rows in walk.internals if _is_nog(_get(spec, pt))]
        path, v, rows = nogs[int(rng.integers(0, len(nogs)))]
        new = _set(spec, path, None)
        probs2 = model.stay_options(S, K - 1)
        log_f = math.log(probs[1] / len(nogs))
        log_r = _log(probs2[0] / (K - 1) / len(Sl) / _cuts(X, rows, v).size)
        return Proposal(kind, move, S, new, log_r - log_f)
    path, v_old, c_old, rows = walk.internals[int(rng.integers(0, K - 1))]
    v = Sl[int(rng.integers(0, len(Sl)))] if move == "change" else v_old
    cuts = _cuts(X, rows, v)
    if cuts.size == 0:
        return Proposal(kind, move, S, spec, reject=True)
    c = cuts[int(rng.integers(0, cuts.size))]
    new = _replace_node(spec, path, v, c)
    if not _Walk(new, X).valid:
        return Proposal(kind, move, S, new, reject=True)
    return Proposal(kind, move, S, new, math.log(cuts.size / _cuts(X, rows, v_old).size))


def _log(x):
    return math.log(x) if x > 0 else -np.inf


# ---------------------------------------------------------------------------
# chain

class SfChain:
    """Stateful sampler; ``step`` performs one Metropolis-within-Gibbs update."""

    def __init__(self, data, config, state=None):
        self.model = _Model(data, config)
        self.config = config
        T = config.T
        if state is None:
            state = SfState(frozenset(), [None] * T, [np.zeros(1) for _ in range(T)])
        self.state = state
        self._walks = [_Walk(t, self.model.X) for t in state.trees]
        # heights that do not match the leaves (e.g. a user-built state) start at zero
        state.heights = [h if np.shape(h) == (w.n_leaves,) else np.zeros(w.n_leaves)
                         for h, w in zip(state.heights, self._walks)]
        self._fits = [h[w.labels] for h, w in zip(state.heights, self._walks)]
        self.state.log_post = self.log_target()

    def partial_residual(self, t):
        r = self.model.y.copy()
        for s, f in enumerate(self._fits):
            if s != t:
                r -= f
        return r

    def log_target(self):
        """Collapsed target for one tree; with several trees the joint density including heights."""
        m, st = self.model, self.state
        out = m.log_subset(st.S)
        for w in self._walks:
            out += m.log_tree_term(st.S, w)
        if self.config.T == 1:
            return out + m.lml(self._walks[0], m.y)
        fit = np.sum(self._fits, axis=0)
        resid = m.y - fit
        out += -0.5 * m.n * math.log(2 * math.pi * m.s2) - 0.5 * float(resid @ resid) / m.s2
        for h in st.heights:
            out += float(np.sum(-0.5 * math.log(2 * math.pi * m.sb2) - 0.5 * h * h / m.sb2))
        return out

    def step(self, rng):
        m, st, cfg = self.model, self.state, self.config
        t = st.step % cfg.T
        kind, j = propose_subset(st, m.p, rng, cfg)
        prop = propose_tree_given_subset(m, st, t, kind, j, rng)
        accepted = False
        r = self.partial_residual(t) if cfg.T > 1 else m.y
        if not prop.reject and prop.log_q_ratio > -np.inf:
            new_walk = _Walk(prop.spec, m.X)
            if new_walk.valid:
                old_prior = m.log_subset(st.S) + sum(m.log_tree_term(st.S, w) for w in self._walks)
                walks2 = list(self._walks)
                walks2[t] = new_walk
                new_prior = m.log_subset(prop.S) + sum(m.log_tree_term(prop.S, w) for w in walks2)
                log_alpha = (new_prior - old_prior + m.lml(new_walk, r) - m.lml(self._walks[t], r)
                             + prop.log_q_ratio)
                u = rng.random()
                if log_alpha >= 0 or u < math.exp(log_alpha):
                    # the reverse move must be proposable
                    assert math.isfinite(prop.log_q_ratio)
                    accepted = True
                    st.S = prop.S
                    st.trees[t] = prop.spec
                    self._walks[t] = new_walk
        if cfg.T > 1:
            w = self._walks[t]
            nk = np.bincount(w.labels, minlength=w.n_leaves).astype(np.float64)
            sk = np.bincount(w.labels, weights=r, minlength=w.n_leaves)
            denom = m.s2 + nk * m.sb2
            h = m.sb2 * sk / denom + np.sqrt(m.sb2 * m.s2 / denom) * rng.standard_normal(w.n_leaves)
            st.heights[t] = h
            self._fits[t] = h[w.labels]
        st.step += 1
        st.log_post = self.log_target()
        return accepted, prop


def sf_step(chain, rng):
    """Advance ``chain`` by one step; returns ``(state, accepted)``."""
    accepted, _ = chain.step(rng)
    return chain.state, accepted


@dataclass
class SfResult:
    inclusion: np.ndarray
    subset_inclusion: np.ndarray
    visited: Counter
    rows: list
    acceptance_rate: float
    burn_in: int
    delta_approximated: bool = False

    def to_csv(self, path):
        buf = io.StringIO()
        buf.write("step,accepted,subset,K_total,log_post\n")
        for r in self.rows:
            buf.write(f"{r[0]},{int(r[1])},{format_subset(r[2])},{r[3]},{r[4]:.17g}\n")
        Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def sf_run(data, config, rng, state=None):
    """Run ``config.iterations`` steps and summarise the post-burn-in part."""
    n_iter = int(config.iterations)
    burn = int(math.floor(config.burn_in_frac * n_iter))
    if n_iter - burn < 1:
        raise ValueError("no iterations left after burn-in")
    chain = SfChain(data, config, state)
    p = chain.model.p
    used_freq = np.zeros(p)
    in_S = np.zeros(p)
    visited = Counter()
    rows = []
    n_acc = 0
    for it in range(n_iter):
        st, acc = sf_step(chain, rng)
        n_acc += acc
        rows.append((it + 1, acc, st.S, sum(st.n_leaves()), st.log_post))
        if it >= burn:
            used = st.used_vars()
            used_freq[sorted(used)] += 1
            in_S[sorted(st.S)] += 1
            visited[st.S] += 1
    kept = n_iter - burn
    return SfResult(used_freq / kept, in_S / kept, visited, rows, n_acc / n_iter, burn,
                    chain.model.delta_approximated)


def tree_move_probs(chain, kind, j=None, t=0):
    """Option probabilities of tree ``t`` for a subset move ``(kind, j)``.

    ``add`` gives birth/replace/none, ``delete`` gives death/replace for a
    variable used exactly once in the tree, ``stay`` gives the four local moves.
    """
    m, st = chain.model, chain.state
    spec, walk = st.trees[t], chain._walks[t]
    if kind == "add":
        return dict(zip(("birth", "replace", "none"), m.add_options(spec, walk, j)))
    if kind == "delete":
        counts = _used_counts(spec)
        if counts[j] == 0:
            return {"death": 0.0, "replace": 0.0, "none": 1.0}
        return dict(zip(("death", "replace"), m.delete_options(spec, walk, j, counts.keys() - {j})))
    return dict(zip(STAY_MOVES, m.stay_options(st.S, walk.n_leaves).tolist()))
