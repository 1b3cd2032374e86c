import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from abcforest.model import Dataset, Tree, validate_tree
from abcforest.priors import (LeafPriorSpec, NoisePriorSpec, SubsetPriorSpec, TreePriorSpec,
                              grow_branching, log_tree_prior, sample_leaf_heights, sample_sigma_sq,
                              sample_subset, sample_tree_structure)


def test_spec_validation():
    with pytest.raises(ValueError):
        SubsetPriorSpec(a=0)
    with pytest.raises(ValueError):
        SubsetPriorSpec("fixed-theta", theta=1.5)
    with pytest.raises(ValueError):
        TreePriorSpec(gamma=1.0)
    with pytest.raises(ValueError):
        NoisePriorSpec("fixed", sigma_sq=0)
    with pytest.raises(ValueError):
        LeafPriorSpec(-1.0).resolve(1)


def test_fixed_theta_extremes(rng):
    assert all(sample_subset(SubsetPriorSpec("fixed-theta", theta=0.0), 6, rng) == frozenset() for _ in range(50))
    assert all(sample_subset(SubsetPriorSpec("fixed-theta", theta=1.0), 6, rng) == set(range(6)) for _ in range(50))


def test_uniform_beta_binomial_sizes_are_uniform(rng):
    spec = SubsetPriorSpec()
    sizes = np.array([len(sample_subset(spec, 2, rng)) for _ in range(200_000)])
    freq = np.bincount(sizes, minlength=3) / sizes.size
    np.testing.assert_allclose(freq, 1 / 3, atol=0.005)


def test_beta_binomial_size_goodness_of_fit(rng):
    spec = SubsetPriorSpec(a=2.0, b=3.0)
    p = 5
    sizes = np.array([len(sample_subset(spec, p, rng)) for _ in range(100_000)])
    obs = np.bincount(sizes, minlength=p + 1)
    exp = stats.betabinom.pmf(np.arange(p + 1), p, 2.0, 3.0) * sizes.size
    assert stats.chisquare(obs, exp).pvalue > 0.001


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 5), st.floats(0.2, 5), st.integers(1, 7))
def test_subset_log_prob_normalises(a, b, p):
    spec = SubsetPriorSpec(a=a, b=b)
    total = sum(math.comb(p, k) * math.exp(spec.log_prob(k, p)) for k in range(p + 1))
    assert total == pytest.approx(1.0, rel=1e-9)


def test_truncated_poisson_ratio():
    spec = TreePriorSpec("poisson-uniform", lam=5.0)
    for K in range(1, 9):
        r = math.exp(spec.log_k_prob(K + 1, 50) - spec.log_k_prob(K, 50))
        assert r == pytest.approx(5.0 / (K + 1), rel=1e-12)
    # K=1 under truncation to 1..n, computed from the pmf by hand
    n = 6
    pmf = [math.exp(-5) * 5 ** k / math.factorial(k) for k in range(1, n + 1)]
    assert math.exp(spec.log_k_prob(1, n)) == pytest.approx(pmf[0] / sum(pmf), rel=1e-12)


def test_degenerate_tree_priors_give_root(rng):
    X = rng.uniform(size=(20, 3))
    assert sample_tree_structure(TreePriorSpec(gamma=0.0), {0, 1}, X, rng).n_leaves == 1
    assert sample_tree_structure(TreePriorSpec("poisson-uniform", lam=0.0), {0, 1}, X, rng).n_leaves == 1
    assert sample_tree_structure(TreePriorSpec("poisson-uniform", k_max=1), {0, 1}, X, rng).n_leaves == 1


def test_branching_split_frequencies(rng):
    X = rng.uniform(size=(400, 2))
    root = depth1 = depth1_split = 0
    for _ in range(20_000):
        t = grow_branching(X, {0, 1}, 0.95, 2.0, rng)
        if t.n_leaves == 1:
            continue
        root += 1
        d = t.depth()
        kids = [int(t.left[0]), int(t.right[0])]
        depth1 += 2
        depth1_split += sum(int(t.var[k] >= 0) for k in kids)
        assert d.max() >= 1
    assert root / 20_000 == pytest.approx(0.95, abs=0.01)
    assert depth1_split / depth1 == pytest.approx(0.2375, abs=0.01)


def test_leaf_height_moments():
    h = sample_leaf_heights(1_000_000, LeafPriorSpec(0.1), np.random.default_rng(3))
    assert abs(h.mean()) < 0.002
    assert h.var() == pytest.approx(0.1, abs=0.002)
    assert sample_leaf_heights(0, LeafPriorSpec(0.1), np.random.default_rng(3)).shape == (0,)


def test_noise_prior_draws():
    g = np.random.default_rng(11)
    assert sample_sigma_sq(NoisePriorSpec("fixed", sigma_sq=1.0), g) == 1.0
    spec = NoisePriorSpec("inv-chisq", nu=3.0, lam=1.0)
    draws = np.array([sample_sigma_sq(spec, g) for _ in range(1_000_000)])
    assert draws.min() > 0
    assert draws.mean() == pytest.approx(3.0, rel=0.02)


def test_log_tree_prior_examples():
    X = np.column_stack([np.arange(6) / 6, np.arange(6)[::-1] / 6])
    assert log_tree_prior(Tree.root(), TreePriorSpec(), {0, 1}, X) == pytest.approx(math.log(0.05))
    spec = TreePriorSpec("poisson-uniform", lam=5.0)
    assert log_tree_prior(Tree.root(), spec, {0}, X) == spec.log_k_prob(1, 6)
    assert log_tree_prior(Tree.build((1, 0.5, None, None)), TreePriorSpec(), {0}, X) == -np.inf


def _all_trees(X, rows, S):
    """Every tree with midpoint cuts and nonempty leaves over ``rows`` (no dedup)."""
    out = [None]
    for v in S:
        u = np.unique(X[rows, v])
        for c in 0.5 * (u[:-1] + u[1:]):
            go = X[rows, v] <= c
            for left in _all_trees(X, rows[go], S):
                for right in _all_trees(X, rows[~go], S):
                    out.append((v, float(c), left, right))
    return out


@pytest.mark.parametrize("n,S", [(4, [0]), (3, [0, 1])])
def test_branching_prior_sums_to_one(n, S):
    X = np.column_stack([np.arange(n) / n, ((np.arange(n) * 2) % n) / n])
    trees = _all_trees(X, np.arange(n), S)
    spec = TreePriorSpec(gamma=0.95, beta=1.0)
    total = sum(math.exp(log_tree_prior(Tree.build(t), spec, S, X)) for t in trees)
    assert total == pytest.approx(1.0, rel=1e-12)


def test_poisson_uniform_prior_sums_to_one_over_partitions():
    from abcforest.theory import enumerate_valid_trees

    X = np.column_stack([np.arange(4) / 4, ((np.arange(4) * 3) % 4) / 4])
    spec = TreePriorSpec("poisson-uniform", lam=2.0)
    total = 0.0
    for K in range(1, 5):
        trees, _ = enumerate_valid_trees(X, [0, 1], K)
        total += sum(math.exp(log_tree_prior(t, spec, [0, 1], X)) for t in trees)
    assert total == pytest.approx(1.0, rel=1e-12)


def test_poisson_uniform_sampler_is_uniform_given_k():
    from abcforest.theory import enumerate_valid_trees

    X = np.column_stack([np.arange(5) / 5, ((np.arange(5) * 3) % 5) / 5])
    spec = TreePriorSpec("poisson-uniform", lam=5.0, k_max=2)
    g = np.random.default_rng(5)
    trees, count = enumerate_valid_trees(X, [0, 1], 2)
    keys = [t.partition_key(X) for t in trees]
    hits = {k: 0 for k in keys}
    n2 = 0
    for _ in range(20_000):
        t = sample_tree_structure(spec, {0, 1}, X, g)
        if t.n_leaves == 2:
            hits[t.partition_key(X)] += 1
            n2 += 1
    obs = np.array(list(hits.values()))
    assert stats.chisquare(obs, np.full(count, n2 / count)).pvalue > 0.001


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["branching", "poisson-uniform"]),
       st.sets(st.integers(0, 3), min_size=1))
def test_sampled_trees_are_valid(seed, kind, S):
    g = np.random.default_rng(seed)
    X = g.uniform(size=(7, 4))
    spec = TreePriorSpec(kind, lam=3.0, k_max=3)
    t = sample_tree_structure(spec, S, Dataset(X, np.zeros(7)), g)
    assert t.used_vars() <= S
    assert validate_tree(t, X)[0]
    assert log_tree_prior(t, spec, S, X) > -np.inf
