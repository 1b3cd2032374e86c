"""Flat key-value run configuration.

A config file holds ``key = value`` lines (``#`` starts a comment).  Values
from the command line override the file, which overrides the defaults below.
Unknown keys are an error.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

_SECTION = "run"


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    t = str(text).strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _opt_float(text):
    t = str(text).strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _list(text):
    return [t.strip() for t in str(text).replace(",", ";").split(";") if t.strip()]


def _index_list(text):
    """1-based ``;``-separated indices to a 0-based list."""
    out = [int(t) - 1 for t in _list(text)]
    if any(j < 0 for j in out):
        raise ValueError("indices are 1-based")
    return out


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS = {k.name: k for k in [
    # shared
    Key("seed", int, 0, "master seed"),
    Key("workers", int, 1, "worker processes (results do not depend on it)"),
    Key("out", str, ".", "output directory"),
    Key("data", str, "data.csv", "input dataset (y,x1..xp)"),
    # simulate / bench
    Key("kind", str, "friedman", "setup kind: linear, friedman, checkerboard, bart-draw"),
    Key("n", int, 500, "sample size"),
    Key("p", int, 100, "number of predictors"),
    Key("sigma", float, 1.0, "noise standard deviation"),
    # abc
    Key("M", int, 1000, "ABC iterations"),
    Key("s", _opt_int, None, "training subsample size (default n/2)"),
    Key("fit_mode", str, "posterior-draw", "posterior-draw, forest-fit or naive"),
    Key("fit_samples", int, 20, "posterior draws averaged in forest-fit mode"),
    Key("quantile", float, 0.05, "acceptance quantile"),
    Key("standardize", _bool, True, "standardize the response"),
    Key("T", int, 10, "trees per forest"),
    Key("burn_in", int, 100, "backfitting sweeps per ABC draw"),
    Key("gamma", float, 0.95, "branching prior base split probability"),
    Key("beta", float, 2.0, "branching prior depth penalty"),
    Key("sigma_beta_sq", _opt_float, None, "leaf height variance (default 1/T)"),
    Key("nu", float, 3.0, "noise prior degrees of freedom"),
    Key("noise_lam", _opt_float, None, "noise prior scale (default var(y))"),
    Key("subset_prior", str, "beta-binomial", "beta-binomial or fixed-theta"),
    Key("a", float, 1.0, "beta-binomial a"),
    Key("b", float, 1.0, "beta-binomial b"),
    Key("theta", float, 0.5, "fixed inclusion probability"),
    # sf
    Key("iterations", int, 5000, "SF chain length"),
    Key("sf_trees", int, 1, "trees in the SF forest"),
    Key("lam", float, 5.0, "Poisson rate of the leaf-count prior"),
    Key("k_max", _opt_int, None, "largest leaf count (default n)"),
    Key("birth_scale", float, 0.7, "birth/death scale"),
    Key("burn_in_frac", float, 0.2, "discarded fraction of the chain"),
    Key("resume", _bool, False, "resume a chain (not supported)"),
    # bench
    Key("setups", _list, ["friedman"], "setup kinds, ;-separated"),
    Key("ps", _list, [], "predictor counts, ;-separated (default p)"),
    Key("replicates", int, 2, "replicates per setup"),
    Key("methods", _list, ["abc"], "methods, ;-separated; others read scores_<method>.csv"),
    Key("score_dir", str, ".", "directory of external score files"),
    # diag
    Key("subset", _index_list, [], "1-based variable subset, ;-separated"),
    Key("K", int, 2, "leaf count"),
    Key("alpha", float, 1.0, "smoothness"),
    Key("C", float, 1.0, "prior weight constant"),
    Key("C_eps", float, 1.0, "rate constant"),
]}


class ConfigError(ValueError):
    pass


def read_config_file(path):
    """Raw string values from a flat key-value file."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    cp.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = dict(cp[_SECTION])
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
    return raw


def resolve(flags, path=None):
    """Merge defaults, file values and flag values (``None`` means unset)."""
    unknown = sorted(set(flags) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown keys {', '.join(unknown)}")
    cfg = {name: key.default for name, key in KEYS.items()}
    if path is not None:
        for name, text in read_config_file(path).items():
            cfg[name] = _parse(name, text)
    for name, val in flags.items():
        if val is not None:
            cfg[name] = _parse(name, val) if isinstance(val, str) else val
    return cfg


def _parse(name, text):
    try:
        return KEYS[name].parse(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def flag_name(key):
    return "--" + key.replace("_", "-")
