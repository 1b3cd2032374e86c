import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from abcforest.model import (Dataset, Forest, Tree, candidate_cuts, evaluate_forest, evaluate_tree,
                             format_subset, parse_subset, read_dataset, used_vars, validate_tree,
                             write_dataset)


def test_dataset_rejects_bad_input():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), [1.0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(3), true_support={2})


def test_root_tree_evaluates_to_height():
    assert evaluate_tree(Tree.root(2.5), np.array([0.1, 0.9])) == 2.5


def test_single_split_routes_ties_left():
    t = Tree.build((0, 0.5, 1.0, -1.0))
    assert evaluate_tree(t, np.array([0.3, 0.0])) == 1.0
    assert evaluate_tree(t, np.array([0.7, 0.0])) == -1.0
    assert evaluate_tree(t, np.array([0.5, 0.0])) == 1.0


def test_depth_two_tree():
    t = Tree.build((0, 0.5, (1, 0.5, 1.0, 2.0), 3.0))
    assert evaluate_tree(t, np.array([0.2, 0.8])) == 2.0
    assert t.n_leaves == 3 and len(t.internal_nodes()) == 2


def test_forest_additivity():
    x = np.array([0.3, 0.3])
    assert evaluate_forest(Forest(), x) == 0.0
    assert evaluate_forest(Forest([Tree.root(1.5), Tree.root(1.5)]), x) == 3.0
    f = Forest([Tree.build((0, 0.5, 1.0, 0.0)), Tree.root(-0.25)])
    assert evaluate_forest(f, x) == 0.75


def test_used_vars_examples():
    assert used_vars(Forest([Tree.root(), Tree.root()])) == frozenset()
    t = Tree.build((3, 0.5, (3, 0.2, None, None), (7, 0.1, None, None)))
    assert used_vars(t) == {3, 7}
    f = Forest([Tree.build((1, 0.5, None, None)), Tree.build((2, 0.5, (5, 0.5, None, None), None))])
    assert used_vars(f) == {1, 2, 5}


def test_validate_tree_examples():
    X = np.column_stack([np.linspace(0, 1, 10), np.zeros(10)])
    ok, counts = validate_tree(Tree.root(), X)
    assert ok and counts.tolist() == [10]
    ok, _ = validate_tree(Tree.build((0, 0.5, None, None)), X[X[:, 0] > 0.5])
    assert not ok
    ok, counts = validate_tree(Tree.build((0, float(np.median(X[:, 0])), None, None)), X)
    assert ok and counts.tolist() == [5, 5]


def test_tree_structure_errors():
    with pytest.raises(ValueError):
        Tree([0, -1], [0.5, np.nan], [1, -1], [1, -1])  # shared child
    with pytest.raises(ValueError):
        Tree.build((0, 0.5, 1.0, None))


def test_subset_text_round_trip():
    assert format_subset({0, 4, 2}) == "1;3;5"
    assert parse_subset("1;3;5") == {0, 2, 4}
    assert format_subset(set()) == "" and parse_subset("") == frozenset()


def test_candidate_cuts_are_midpoints():
    assert candidate_cuts([3.0, 1.0, 1.0, 2.0]).tolist() == [1.5, 2.5]


def _random_tree(draw, p, depth):
    if depth == 0 or draw(st.booleans()):
        return draw(st.floats(-5, 5, allow_nan=False))
    return (draw(st.integers(0, p - 1)), draw(st.floats(0, 1)),
            _random_tree(draw, p, depth - 1), _random_tree(draw, p, depth - 1))


@st.composite
def trees(draw, p=3):
    return Tree.build(_random_tree(draw, p, 4))


@settings(max_examples=60, deadline=None)
@given(trees(), hnp.arrays(np.float64, (20, 3), elements=st.floats(0, 1)))
def test_every_row_lands_in_one_leaf(tree, X):
    lab = tree.leaf_index(X)
    assert lab.min() >= 0 and lab.max() < tree.n_leaves
    assert np.bincount(lab, minlength=tree.n_leaves).sum() == 20


@settings(max_examples=60, deadline=None)
@given(trees(), hnp.arrays(np.float64, (8, 3), elements=st.floats(0, 1)), st.floats(-3, 3))
def test_prediction_linear_in_heights(tree, X, c):
    scaled = tree.with_heights(c * tree.leaf_heights)
    np.testing.assert_allclose(scaled.predict(X), c * tree.predict(X), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(trees(), min_size=0, max_size=4))
def test_forest_used_vars_is_union(ts):
    expect = frozenset().union(*[t.used_vars() for t in ts]) if ts else frozenset()
    assert Forest(ts).used_vars() == expect


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-1e6, 1e6, allow_subnormal=True)))
def test_dataset_csv_round_trip_is_exact(tmp_path_factory, X):
    path = tmp_path_factory.mktemp("csv") / "data.csv"
    d = Dataset(X[:, 1:], X[:, 0], true_support={1})
    write_dataset(d, path, path.with_name("support.txt"))
    back = read_dataset(path, path.with_name("support.txt"))
    assert np.array_equal(back.X, d.X) and np.array_equal(back.y, d.y)
    assert back.true_support == {1}
    assert b"\r" not in path.read_bytes()
