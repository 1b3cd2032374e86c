"""Simulation setups, selection metrics and the benchmark driver."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .model import Dataset
from .parallel import run_jobs
from .priors import grow_branching
from .rng import child_seed, stream

log = logging.getLogger(__name__)

KINDS = ("linear", "friedman", "checkerboard", "bart-draw")
INTERNAL_METHODS = ("abc", "abc-fit", "naive-abc", "sf")
METRICS = ("fdp", "power", "precision", "f1", "auc")


@dataclass(frozen=True)
class SetupSpec:
    kind: str
    n: int
    p: int
    seed: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        need = 10 if self.kind == "checkerboard" else 5
        if self.p < need:
            raise ValueError(f"{self.kind} setup needs p >= {need}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def support(self):
        return frozenset({0, 3, 6, 9} if self.kind == "checkerboard" else range(5))


def friedman_mean(X):
    X = np.atleast_2d(X)
    return (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2
            + 10 * X[:, 3] + 5 * X[:, 4])


def linear_mean(X):
    X = np.atleast_2d(X)
    return X[:, 0] + 2 * X[:, 1] + 3 * X[:, 2] - 2 * X[:, 3] - X[:, 4]


def checkerboard_mean(X):
    X = np.atleast_2d(X)
    return 2 * X[:, 0] * X[:, 3] + 2 * X[:, 6] * X[:, 9]


def equicorrelated(n, p, rho, rng):
    z0 = rng.standard_normal((n, 1))
    return math.sqrt(rho) * z0 + math.sqrt(1 - rho) * rng.standard_normal((n, p))


def ar1(n, p, rho, rng):
    z = rng.standard_normal((n, p))
    X = np.empty((n, p))
    X[:, 0] = z[:, 0]
    c = math.sqrt(1 - rho * rho)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + c * z[:, j]
    return X


def bart_draw_mean(X, rng, n_trees=200, support=range(5), gamma=0.95, beta=2.0):
    """Sum of ``n_trees`` prior trees splitting on ``support`` only."""
    sb = math.sqrt(1.0 / n_trees)
    f = np.zeros(X.shape[0])
    for _ in range(n_trees):
        t = grow_branching(X, frozenset(support), gamma, beta, rng)
        f += t.with_heights(sb * rng.standard_normal(t.n_leaves)).predict(X)
    return f


def generate(setup, rng):
    n, p = setup.n, setup.p
    if setup.kind == "linear":
        X = equicorrelated(n, p, 0.6, rng)
        f0 = linear_mean(X)
    elif setup.kind == "friedman":
        X = rng.uniform(size=(n, p))
        f0 = friedman_mean(X)
    elif setup.kind == "checkerboard":
        X = ar1(n, p, 0.3, rng)
        f0 = checkerboard_mean(X)
    else:
        X = ar1(n, p, 0.3, rng)
        f0 = bart_draw_mean(X, rng)
    y = f0 + setup.sigma * rng.standard_normal(n) if setup.sigma > 0 else f0.copy()
    return Dataset(X, y, f0, setup.support)


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricReport:
    fdp: float
    power: float
    precision: float
    f1: float
    auc: float
    selected: frozenset

    def as_dict(self):
        return {m: getattr(self, m) for m in METRICS}


def normalize_importances(raw):
    """Scale to maximum one; all-nonpositive input gives zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    top = raw.max() if raw.size else 0.0
    if not top > 0:
        return np.zeros_like(raw)
    return raw / top


def rank_auc(scores, support):
    """Probability that a random signal outranks a random noise variable (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    p = scores.shape[0]
    pos = np.zeros(p, dtype=bool)
    pos[sorted(support)] = True
    n1, n0 = int(pos.sum()), int(p - pos.sum())
    if n1 == 0:
        raise ValueError("true support is empty")
    if n0 == 0:
        return 1.0
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def score(selected_or_importances, true_support, p, cut=0.5):
    S0 = frozenset(true_support)
    if not S0:
        raise ValueError("true support is empty")
    if isinstance(selected_or_importances, (set, frozenset)):
        sel = frozenset(selected_or_importances)
        scores = np.zeros(p)
        scores[sorted(sel)] = 1.0
    else:
        scores = np.asarray(selected_or_importances, dtype=np.float64)
        if scores.shape != (p,):
            raise ValueError(f"expected {p} importances")
        norm = normalize_importances(scores)
        sel = frozenset(int(j) for j in np.flatnonzero(norm >= cut)) if norm.max() > 0 else frozenset()
    tp = len(sel & S0)
    power = tp / len(S0)
    precision = tp / len(sel) if sel else 1.0
    fdp = len(sel - S0) / max(len(sel), 1)
    f1 = 0.0 if power + precision == 0 else 2 * power * precision / (power + precision)
    return MetricReport(fdp, power, precision, f1, rank_auc(scores, S0), sel)


# ---------------------------------------------------------------------------
# driver

def read_external_scores(path, p):
    """``replicate -> importance vector`` from a ``replicate,var,importance`` file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "replicate,var,importance":
        raise ValueError(f"{path}: header must be replicate,var,importance")
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        r, v, imp = line.split(",")
        vec = out.setdefault(int(r), np.zeros(p))
        j = int(v) - 1
        if not 0 <= j < p:
            raise ValueError(f"{path}: variable {v} out of range")
        vec[j] = float(imp)
    return out


@dataclass(frozen=True)
class BenchOptions:
    M: int = 1000
    quantile: float = 0.05
    T: int = 10
    burn_in: int = 100
    sf_iterations: int = 5000
    sf_trees: int = 1
    abc_workers: int = 1


def method_importances(method, data, seed, opts):
    """Importance vector of one internal method on one dataset."""
    if method in ("abc", "abc-fit", "naive-abc"):
        from .abc_engine import AbcConfig, inclusion_probs, quantile_threshold, run_abc
        from .bart import BartConfig

        mode = {"abc": "posterior-draw", "abc-fit": "forest-fit", "naive-abc": "naive"}[method]
        cfg = AbcConfig(M=opts.M, fit_mode=mode, master_seed=seed,
                        bart=BartConfig(T=opts.T, burn_in=opts.burn_in))
        table = run_abc(data, cfg, workers=opts.abc_workers)
        return inclusion_probs(table, quantile_threshold(table, opts.quantile)).probs
    if method == "sf":
        from .sfmcmc import SfConfig, sf_run

        y = (data.y - data.y.mean()) / (data.y.std(ddof=1) or 1.0)
        cfg = SfConfig(iterations=opts.sf_iterations, T=opts.sf_trees)
        return sf_run(Dataset(data.X, y), cfg, stream(seed, "sf")).inclusion
    raise ValueError(f"unknown method {method!r}")


def _bench_job(setup, rep, method, opts):
    data = generate(setup, stream(setup.seed, "generate", rep))
    seed = child_seed(stream(setup.seed, "method:" + method, rep))
    imp = method_importances(method, data, seed, opts)
    return score(np.asarray(imp), data.true_support, setup.p)


def run_benchmark(setups, replicates, methods, opts=None, workers=1, score_dir=None):
    """Mean and sd of every metric per (setup, method); returns rows of dicts."""
    opts = opts or BenchOptions()
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    internal = [m for m in methods if m in INTERNAL_METHODS]
    jobs = [(s, r, m, opts) for s in setups for m in internal for r in range(replicates)]
    reports = dict(zip([(id(s), m, r) for s, r, m, _ in jobs],
                       run_jobs(_bench_job, jobs, workers=workers, chunksize=1)))
    rows = []
    for s in setups:
        for m in methods:
            if m in internal:
                reps = [reports[(id(s), m, r)] for r in range(replicates)]
            else:
                path = Path(score_dir or ".") / f"scores_{m}.csv"
                if not path.exists():
                    log.warning("skipping method %s: %s not found", m, path)
                    continue
                scores = read_external_scores(path, s.p)
                reps = []
                for r in range(replicates):
                    if r + 1 not in scores:
                        log.warning("method %s has no scores for replicate %d", m, r + 1)
                        continue
                    data = generate(s, stream(s.seed, "generate", r))
                    reps.append(score(scores[r + 1], data.true_support, s.p))
                if not reps:
                    continue
            for metric in METRICS:
                vals = np.array([getattr(x, metric) for x in reps])
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                rows.append(dict(setup=s.kind, p=s.p, method=m, metric=metric,
                                 mean=float(vals.mean()), sd=sd))
    return rows


def write_bench_csv(rows, path):
    buf = io.StringIO()
    buf.write("setup,p,method,metric,mean,sd\n")
    for r in rows:
        buf.write(f"{r['setup']},{r['p']},{r['method']},{r['metric']},{r['mean']:.17g},{r['sd']:.17g}\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))
