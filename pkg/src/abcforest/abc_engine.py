"""ABC sampling of forests with data splitting, and post-hoc filtering.

Each iteration draws a training half, a variable subset and a forest fitted
to the training half; the forest then simulates the held-out responses and
the distance to the observed held-out responses is recorded.  Nothing is
rejected while sampling: thresholds are applied afterwards, so one table
supports any number of thresholds.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import bart as _bart
from .model import Dataset, format_subset, parse_subset
from .parallel import run_jobs
from .priors import SubsetPriorSpec, grow_branching, sample_sigma_sq, sample_subset
from .rng import stream

FIT_MODES = ("posterior-draw", "forest-fit", "naive")
DYNAMIC_SKIP = 10


@dataclass(frozen=True)
class AbcConfig:
    M: int = 1000
    s: Optional[int] = None
    subset_prior: SubsetPriorSpec = field(default_factory=SubsetPriorSpec)
    bart: _bart.BartConfig = field(default_factory=_bart.BartConfig)
    fit_mode: str = "posterior-draw"
    master_seed: int = 0
    fit_samples: int = 20
    standardize: bool = True

    def __post_init__(self):
        if int(self.M) < 1:
            raise ValueError("M must be >= 1")
        if self.fit_mode not in FIT_MODES:
            raise ValueError(f"fit_mode must be one of {FIT_MODES}")
        if self.fit_samples < 1:
            raise ValueError("fit_samples must be >= 1")

    def train_size(self, n):
        if self.fit_mode == "naive":
            return 0
        s = n // 2 if self.s is None else int(self.s)
        if s < 0 or s >= n:
            raise ValueError(f"subsample size must satisfy 0 <= s < n (got s={s}, n={n})")
        return s


@dataclass(frozen=True)
class AbcRecord:
    iter: int
    epsilon: float
    subset_drawn: frozenset
    vars_used: frozenset
    train_idx: tuple


@dataclass
class AbcTable:
    records: list
    p: int
    config: Optional[AbcConfig] = None
    data_digest: str = ""

    def __post_init__(self):
        its = [r.iter for r in self.records]
        if its != list(range(len(its))):
            raise ValueError("record iterations must be 0..M-1 in order")
        self.epsilons = np.array([r.epsilon for r in self.records], dtype=np.float64)
        used = np.zeros((len(self.records), self.p), dtype=bool)
        for m, r in enumerate(self.records):
            used[m, sorted(r.vars_used)] = True
        self.used = used

    @property
    def M(self):
        return len(self.records)

    def to_csv(self, path):
        buf = io.StringIO()
        buf.write("iter,epsilon,subset_drawn,vars_used,train_idx\n")
        for r in self.records:
            train = ";".join(str(i + 1) for i in r.train_idx)
            buf.write(f"{r.iter},{r.epsilon:.17g},{format_subset(r.subset_drawn)},"
                      f"{format_subset(r.vars_used)},{train}\n")
        Path(path).write_bytes(buf.getvalue().encode("utf-8"))

    @classmethod
    def from_csv(cls, path, p):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != "iter,epsilon,subset_drawn,vars_used,train_idx":
            raise ValueError(f"{path}: unexpected header")
        recs = []
        for line in lines[1:]:
            it, eps, sd, vu, tr = line.split(",")
            train = tuple(int(t) - 1 for t in tr.split(";")) if tr else ()
            recs.append(AbcRecord(int(it), float(eps), parse_subset(sd), parse_subset(vu), train))
        return cls(recs, p)


@dataclass(frozen=True)
class Inclusion:
    probs: np.ndarray
    n_accepted: int

    @property
    def empty(self):
        return self.n_accepted == 0


@dataclass(frozen=True)
class InclusionCurve:
    thresholds: np.ndarray
    probs: np.ndarray
    counts: np.ndarray

    def to_csv(self, path):
        p = self.probs.shape[1]
        buf = io.StringIO()
        buf.write(",".join(["epsilon", "count"] + [f"pi_{j + 1}" for j in range(p)]) + "\n")
        for e, c, row in zip(self.thresholds, self.counts, self.probs):
            buf.write(",".join([f"{e:.17g}", str(int(c))] + [f"{v:.17g}" for v in row]) + "\n")
        Path(path).write_bytes(buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# sampling

def _prior_forest(X, S, cfg, rng):
    """Forest drawn from the tree and leaf priors (no training data)."""
    tp = cfg.tree_prior
    sb = math.sqrt(cfg.sigma_beta_sq)
    trees = []
    for _ in range(cfg.T):
        t = grow_branching(X, S, tp.gamma, tp.beta, rng)
        trees.append(t.with_heights(sb * rng.standard_normal(t.n_leaves)))
    return _bart.Forest(trees)


def _one_iteration(X, y, config, m):
    rng = stream(config.master_seed, "abc", m)
    n, p = X.shape
    s = config.train_size(n)
    train = np.sort(rng.choice(n, size=s, replace=False)) if s > 0 else np.zeros(0, dtype=np.int64)
    held = np.setdiff1d(np.arange(n), train)
    S = sample_subset(config.subset_prior, p, rng)
    cfg = config.bart

    ref = y[train] if s > 1 else y
    loc, scale = (float(ref.mean()), float(ref.std(ddof=1))) if config.standardize else (0.0, 1.0)
    if not scale > 0:
        scale = 1.0

    if config.fit_mode == "naive":
        forest = _prior_forest(X, S, cfg, rng)
        sigma_sq = sample_sigma_sq(cfg.noise_prior, rng, (y - loc) / scale)
        fit_held = forest.predict(X[held])
        used = forest.used_vars()
    else:
        train_data = Dataset(X[train], (y[train] - loc) / scale)
        if config.fit_mode == "posterior-draw":
            state = _bart.draw_posterior_sample(train_data, S, cfg, rng, return_state=True)
            fit_held = state.predict(X[held])
            sigma_sq = state.sigma_sq
            used = state.used_vars()
        else:
            fit = _bart.posterior_mean_fit(train_data, S, cfg, config.fit_samples, rng)
            fit_held = fit.predict(X[held])
            sigma_sq = fit.sigma_sq
            used = fit.used_vars()

    y_star = loc + scale * (fit_held + math.sqrt(sigma_sq) * rng.standard_normal(held.shape[0]))
    eps = float(np.sqrt(np.sum((y_star - y[held]) ** 2)))
    return AbcRecord(m, eps, S, frozenset(used), tuple(int(i) for i in train))


def _block(X, y, config, start, stop):
    return [_one_iteration(X, y, config, m) for m in range(start, stop)]


def run_abc(data, config, workers=1, block=25):
    """Build the reference table of ``config.M`` iterations.

    Iteration ``m`` draws only from its own keyed stream, so the table is
    identical for any ``workers``.
    """
    if data.n < 2:
        raise ValueError("need at least two observations")
    config.train_size(data.n)
    X, y = np.asarray(data.X), np.asarray(data.y)
    bounds = [(a, min(a + block, config.M)) for a in range(0, config.M, block)]
    chunks = run_jobs(_block, [(X, y, config, a, b) for a, b in bounds], workers=workers, chunksize=1)
    records = [r for c in chunks for r in c]
    return AbcTable(records, data.p, config, data.digest())


def sample_abc_record(data, config, m):
    """Recompute iteration ``m`` alone (identical to its row in the table)."""
    return _one_iteration(np.asarray(data.X), np.asarray(data.y), config, m)


# ---------------------------------------------------------------------------
# filtering

def inclusion_probs(table, epsilon):
    """Share of records with ``epsilon_m < epsilon`` whose forest uses each variable."""
    keep = table.epsilons < epsilon
    k = int(keep.sum())
    if k == 0:
        return Inclusion(np.zeros(table.p), 0)
    return Inclusion(table.used[keep].mean(axis=0), k)


def quantile_threshold(table, q):
    """Smallest threshold accepting at least ``ceil(q M)`` records.

    The threshold sits just above the ``ceil(q M)``-th smallest discrepancy,
    so a block of tied values is accepted together.
    """
    if not (0 < q <= 1):
        raise ValueError("q must lie in (0, 1]")
    M = table.M
    k = min(M, max(1, math.ceil(q * M - 1e-9)))
    e = np.sort(table.epsilons)[k - 1]
    return float(np.nextafter(e, np.inf))


def default_grid(table, skip=DYNAMIC_SKIP):
    u = np.unique(table.epsilons)
    return u[skip:][::-1].copy()


def dynamic_curve(table, grid=None):
    grid = default_grid(table) if grid is None else np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size > 1 and not np.all(np.diff(grid) < 0):
        raise ValueError("grid must be strictly decreasing")
    probs = np.zeros((grid.size, table.p))
    counts = np.zeros(grid.size, dtype=np.int64)
    for i, e in enumerate(grid):
        inc = inclusion_probs(table, e)
        probs[i], counts[i] = inc.probs, inc.n_accepted
    return InclusionCurve(grid, probs, counts)


def select_mpm(probs, cut=0.5):
    probs = np.asarray(probs, dtype=np.float64)
    return frozenset(int(j) for j in np.flatnonzero(probs >= cut))
