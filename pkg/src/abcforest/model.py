"""Datasets, tree partitions and forests.

Variable indices are 0-based everywhere in the API; files written by the CLI
use 1-based indices.  A subset of variables is a ``frozenset`` of ints.

Routing convention: an observation goes left iff ``x[var] <= cut``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

LEAF = -1


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    f0: Optional[np.ndarray] = None
    true_support: Optional[frozenset] = None

    def __post_init__(self):
        X = _frozen(self.X, np.float64)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        y = _frozen(self.y, np.float64).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"y has length {y.shape[0]}, expected {X.shape[0]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.f0 is not None:
            f0 = _frozen(self.f0, np.float64).reshape(-1)
            if f0.shape[0] != X.shape[0]:
                raise ValueError("f0 must have length n")
            object.__setattr__(self, "f0", f0)
        if self.true_support is not None:
            sup = frozenset(int(j) for j in self.true_support)
            if any(j < 0 or j >= X.shape[1] for j in sup):
                raise ValueError("true_support must be a subset of the predictor indices")
            object.__setattr__(self, "true_support", sup)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.X[rows],
            self.y[rows],
            None if self.f0 is None else self.f0[rows],
            self.true_support,
        )

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SplitRule:
    var: int
    cut: float

    def goes_left(self, x):
        return x[self.var] <= self.cut


@dataclass(frozen=True, eq=False)
class Tree:
    """Binary tree partition stored as flat node arrays (node 0 is the root).

    ``var[k] == -1`` marks a leaf.  ``value`` holds per-node leaf heights and
    is ``None`` for a bare partition.  Leaves are numbered in pre-order
    (left before right); ``leaf_heights`` follows that order.
    """

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: Optional[np.ndarray] = None
    _leaves: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        var = _frozen(self.var, np.int64)
        m = var.shape[0]
        if m == 0:
            raise ValueError("a tree needs at least one node")
        cut = _frozen(self.cut, np.float64)
        left = _frozen(self.left, np.int64)
        right = _frozen(self.right, np.int64)
        if not (cut.shape == left.shape == right.shape == (m,)):
            raise ValueError("node arrays must have equal length")
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "cut", cut)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        if self.value is not None:
            value = _frozen(self.value, np.float64)
            if value.shape != (m,):
                raise ValueError("value must have one entry per node")
            object.__setattr__(self, "value", value)
        # pre-order walk also checks that the arrays form a single tree
        leaves = []
        seen = np.zeros(m, dtype=bool)
        stack = [0]
        while stack:
            k = stack.pop()
            if seen[k]:
                raise ValueError("node arrays contain a cycle or shared child")
            seen[k] = True
            if var[k] == LEAF:
                leaves.append(k)
            else:
                stack.append(int(right[k]))
                stack.append(int(left[k]))
        if not seen.all():
            raise ValueError("node arrays contain unreachable nodes")
        object.__setattr__(self, "_leaves", _frozen(leaves, np.int64))

    # construction helpers -------------------------------------------------

    @classmethod
    def root(cls, height=None):
        value = None if height is None else [height]
        return cls([LEAF], [np.nan], [LEAF], [LEAF], value)

    @classmethod
    def build(cls, spec):
        """Build from a nested spec.

        A leaf is a number (its height) or ``None`` (bare); an internal node
        is ``(var, cut, left_spec, right_spec)``.
        """
        var, cut, left, right, value = [], [], [], [], []
        bare = []

        def rec(s):
            k = len(var)
            var.append(LEAF), cut.append(np.nan), left.append(LEAF), right.append(LEAF)
            value.append(np.nan)
            if isinstance(s, tuple):
                v, c, ls, rs = s
                var[k], cut[k] = int(v), float(c)
                left[k] = rec(ls)
                right[k] = rec(rs)
            else:
                bare.append(s is None)
                value[k] = np.nan if s is None else float(s)
            return k

        rec(spec)
        if any(bare) and not all(bare):
            raise ValueError("either all leaves carry heights or none do")
        return cls(var, cut, left, right, None if all(bare) else value)

    def with_heights(self, heights):
        heights = np.asarray(heights, dtype=np.float64)
        if heights.shape != (self.n_leaves,):
            raise ValueError(f"expected {self.n_leaves} heights, got {heights.shape}")
        value = np.full(self.var.shape[0], np.nan)
        value[self._leaves] = heights
        return Tree(self.var, self.cut, self.left, self.right, value)

    def bare(self):
        return Tree(self.var, self.cut, self.left, self.right, None)

    # queries --------------------------------------------------------------

    @property
    def n_nodes(self):
        return self.var.shape[0]

    @property
    def n_leaves(self):
        return self._leaves.shape[0]

    @property
    def leaves(self):
        return self._leaves

    @property
    def leaf_heights(self):
        return None if self.value is None else self.value[self._leaves]

    def internal_nodes(self):
        return np.flatnonzero(self.var != LEAF)

    def used_vars(self):
        return frozenset(int(v) for v in self.var[self.var != LEAF])

    def depth(self):
        d = np.zeros(self.n_nodes, dtype=np.int64)
        stack = [(0, 0)]
        while stack:
            k, dk = stack.pop()
            d[k] = dk
            if self.var[k] != LEAF:
                stack.append((int(self.left[k]), dk + 1))
                stack.append((int(self.right[k]), dk + 1))
        return d

    def apply(self, X):
        """Node index reached by each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            v = self.var[node[active]]
            internal = v != LEAF
            active = active[internal]
            if not active.size:
                break
            v = v[internal]
            nd = node[active]
            go_left = X[active, v] <= self.cut[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def leaf_index(self, X):
        """Pre-order leaf number (0..K-1) reached by each row of ``X``."""
        pos = np.full(self.n_nodes, -1, dtype=np.int64)
        pos[self._leaves] = np.arange(self.n_leaves)
        return pos[self.apply(X)]

    def predict(self, X):
        if self.value is None:
            raise ValueError("tree has no leaf heights")
        return self.value[self.apply(X)]

    def partition_key(self, X):
        """Canonical induced partition of the rows of ``X`` (tuple of tuples)."""
        lab = self.leaf_index(X)
        cells = {}
        for i, k in enumerate(lab):
            cells.setdefault(int(k), []).append(i)
        return tuple(sorted(tuple(c) for c in cells.values()))

    def to_nested(self, k=0):
        if self.var[k] == LEAF:
            return None if self.value is None else float(self.value[k])
        return (int(self.var[k]), float(self.cut[k]),
                self.to_nested(int(self.left[k])), self.to_nested(int(self.right[k])))

    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return self.to_nested() == other.to_nested()

    def __hash__(self):
        return hash(repr(self.to_nested()))

    def __repr__(self):
        return f"Tree({self.to_nested()!r})"


@dataclass(frozen=True)
class Forest:
    trees: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))

    def __len__(self):
        return len(self.trees)

    def __iter__(self):
        return iter(self.trees)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros(X.shape[0])
        for t in self.trees:
            out += t.predict(X)
        return out

    def used_vars(self):
        out = frozenset()
        for t in self.trees:
            out |= t.used_vars()
        return out


# spec-level operations ----------------------------------------------------

def evaluate_tree(tree, x):
    """Height of the leaf whose cell contains the single point ``x``."""
    return float(tree.predict(np.asarray(x, dtype=np.float64)[None, :])[0])


def evaluate_forest(forest, x):
    return float(sum(evaluate_tree(t, x) for t in forest))


def used_vars(forest):
    if isinstance(forest, Tree):
        return forest.used_vars()
    return Forest(forest).used_vars() if not isinstance(forest, Forest) else forest.used_vars()


def validate_tree(tree, data):
    """Return ``(valid, counts)`` where ``counts[k]`` is the occupancy of leaf k."""
    X = data.X if isinstance(data, Dataset) else np.asarray(data)
    counts = np.bincount(tree.leaf_index(X), minlength=tree.n_leaves)
    return bool(np.all(counts > 0)), counts


def candidate_cuts(values):
    """Midpoints between consecutive distinct values."""
    u = np.unique(values)
    return 0.5 * (u[:-1] + u[1:])


# subsets ------------------------------------------------------------------

def format_subset(s):
    """``;``-joined 1-based indices (empty string for the empty set)."""
    return ";".join(str(j + 1) for j in sorted(s))


def parse_subset(text):
    text = text.strip()
    if not text:
        return frozenset()
    return frozenset(int(t) - 1 for t in text.split(";"))


# CSV ----------------------------------------------------------------------

def _fmt(v):
    return format(float(v), ".17g")


def write_dataset(data, path, support_path=None):
    path = Path(path)
    buf = io.StringIO()
    buf.write(",".join(["y"] + [f"x{j + 1}" for j in range(data.p)]) + "\n")
    for i in range(data.n):
        buf.write(",".join([_fmt(data.y[i])] + [_fmt(v) for v in data.X[i]]) + "\n")
    path.write_bytes(buf.getvalue().encode("utf-8"))
    if support_path is not None and data.true_support is not None:
        lines = "".join(f"{j + 1}\n" for j in sorted(data.true_support))
        Path(support_path).write_bytes(lines.encode("utf-8"))


def read_dataset(path, support_path=None):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "y" or header[1:] != [f"x{j + 1}" for j in range(len(header) - 1)]:
            raise ValueError(f"{path}: header must be y,x1,...,xp")
        arr = np.loadtxt(fh, delimiter=",", dtype=np.float64, ndmin=2)
    support = None
    if support_path is not None and Path(support_path).exists():
        support = frozenset(int(t) - 1 for t in Path(support_path).read_text().split())
    return Dataset(arr[:, 1:], arr[:, 0], None, support)
