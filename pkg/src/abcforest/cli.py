"""Command-line front end: ``abcforest {simulate,abc,sf,bench,diag}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from .model import format_subset, read_dataset, write_dataset

COMMON = ("seed", "workers", "out")
COMMAND_KEYS = {
    "simulate": ("kind", "n", "p", "sigma"),
    "abc": ("data", "M", "s", "fit_mode", "fit_samples", "quantile", "standardize", "T", "burn_in",
            "gamma", "beta", "sigma_beta_sq", "nu", "noise_lam", "subset_prior", "a", "b", "theta"),
    "sf": ("data", "iterations", "sf_trees", "lam", "k_max", "birth_scale", "burn_in_frac",
           "standardize", "sigma_beta_sq", "subset_prior", "a", "b", "theta", "resume"),
    "bench": ("setups", "ps", "n", "p", "sigma", "replicates", "methods", "score_dir", "M", "quantile",
              "T", "burn_in", "iterations", "sf_trees"),
    "diag": ("data", "subset", "K", "n", "p", "alpha", "C", "C_eps"),
}
DIAG_QUANTITIES = ("partition-number", "equiv-bound", "count", "gap", "rate", "weights")


def _write_text(path, text):
    Path(path).write_bytes(text.encode("utf-8"))


def _outdir(cfg):
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"error: cannot create output directory {out}: {exc}")
    return out


def _subset_prior(cfg):
    from .priors import SubsetPriorSpec

    return SubsetPriorSpec(cfg["subset_prior"], cfg["a"], cfg["b"], cfg["theta"])


def _load(cfg):
    path = Path(cfg["data"])
    if not path.exists():
        raise SystemExit(f"error: data file {path} not found")
    return read_dataset(path, path.with_name("support.txt"))


# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    from .bench import SetupSpec, generate
    from .rng import stream

    setup = SetupSpec(cfg["kind"], cfg["n"], cfg["p"], cfg["seed"], cfg["sigma"])
    data = generate(setup, stream(cfg["seed"], "simulate"))
    out = _outdir(cfg)
    write_dataset(data, out / "data.csv", out / "support.txt")
    return data


def cmd_abc(cfg):
    from .abc_engine import (AbcConfig, dynamic_curve, inclusion_probs, quantile_threshold,
                             run_abc, select_mpm)
    from .bart import BartConfig
    from .priors import LeafPriorSpec, NoisePriorSpec, TreePriorSpec

    data = _load(cfg)
    bart = BartConfig(T=cfg["T"], burn_in=cfg["burn_in"],
                      tree_prior=TreePriorSpec("branching", gamma=cfg["gamma"], beta=cfg["beta"]),
                      leaf_prior=LeafPriorSpec(cfg["sigma_beta_sq"]),
                      noise_prior=NoisePriorSpec("inv-chisq", nu=cfg["nu"], lam=cfg["noise_lam"]))
    acfg = AbcConfig(M=cfg["M"], s=cfg["s"], subset_prior=_subset_prior(cfg), bart=bart,
                     fit_mode=cfg["fit_mode"], master_seed=cfg["seed"],
                     fit_samples=cfg["fit_samples"], standardize=cfg["standardize"])
    table = run_abc(data, acfg, workers=cfg["workers"])
    inc = inclusion_probs(table, quantile_threshold(table, cfg["quantile"]))
    out = _outdir(cfg)
    table.to_csv(out / "abc_table.csv")
    dynamic_curve(table).to_csv(out / "curve.csv")
    _write_text(out / "mpm.txt", format_subset(select_mpm(inc.probs)) + "\n")
    _write_text(out / "inclusion.csv",
                "var,pi\n" + "".join(f"{j + 1},{v:.17g}\n" for j, v in enumerate(inc.probs)))
    return table, inc


def cmd_sf(cfg):
    from .model import Dataset
    from .priors import LeafPriorSpec, TreePriorSpec
    from .rng import stream
    from .sfmcmc import SfConfig, sf_run

    if cfg["resume"]:
        raise SystemExit("error: resuming a chain is not supported; start a new run with the same seed")
    data = _load(cfg)
    y = data.y
    if cfg["standardize"]:
        sd = float(y.std(ddof=1)) if data.n > 1 else 0.0
        y = (y - y.mean()) / (sd if sd > 0 else 1.0)
    scfg = SfConfig(iterations=cfg["iterations"], birth_scale=cfg["birth_scale"],
                    tree_prior=TreePriorSpec("poisson-uniform", lam=cfg["lam"], k_max=cfg["k_max"]),
                    subset_prior=_subset_prior(cfg), leaf_prior=LeafPriorSpec(cfg["sigma_beta_sq"]),
                    T=cfg["sf_trees"], burn_in_frac=cfg["burn_in_frac"])
    res = sf_run(Dataset(data.X, y), scfg, stream(cfg["seed"], "sf"))
    out = _outdir(cfg)
    res.to_csv(out / "sf_chain.csv")
    _write_text(out / "sf_inclusion.csv",
                "var,inclusion\n" + "".join(f"{j + 1},{v:.17g}\n" for j, v in enumerate(res.inclusion)))
    return res


def cmd_bench(cfg):
    from .bench import BenchOptions, SetupSpec, run_benchmark, write_bench_csv

    ps = [int(x) for x in cfg["ps"]] or [cfg["p"]]
    setups = [SetupSpec(k, cfg["n"], p, cfg["seed"], cfg["sigma"]) for k in cfg["setups"] for p in ps]
    opts = BenchOptions(M=cfg["M"], quantile=cfg["quantile"], T=cfg["T"], burn_in=cfg["burn_in"],
                        sf_iterations=cfg["iterations"], sf_trees=cfg["sf_trees"])
    rows = run_benchmark(setups, cfg["replicates"], cfg["methods"], opts,
                         workers=cfg["workers"], score_dir=cfg["score_dir"])
    out = _outdir(cfg)
    write_bench_csv(rows, out / "bench.csv")
    return rows


def cmd_diag(cfg, quantity, value=None):
    from . import theory as th

    rows = []
    if quantity in ("partition-number", "equiv-bound"):
        if value is None:
            raise SystemExit(f"error: diag {quantity} needs an integer argument")
        Z = int(value)
        f = th.partition_number if quantity == "partition-number" else th.equiv_class_bound
        rows.append((quantity, str(Z), str(f(Z))))
    elif quantity in ("count", "gap"):
        data = _load(cfg)
        S = sorted(cfg["subset"])
        tag = f"S={format_subset(S)};K={cfg['K']}"
        if quantity == "count":
            rows.append((quantity, tag, str(th.count_valid_trees(data, S, cfg["K"]))))
        else:
            # y is read as the noise-free mean function
            delta, _ = th.separation_gap(data, S, cfg["K"], f0=data.y)
            rows.append((quantity, tag, f"{delta:.17g}"))
    else:
        size = len(cfg["subset"])
        params = th.TheoryParams(alpha=cfg["alpha"], C=cfg["C"], C_eps=cfg["C_eps"], n=cfg["n"], p=cfg["p"])
        if quantity == "rate":
            rows.append(("rate", f"|S|={size}", f"{th.rate_eps(params, size):.17g}"))
        else:
            for k in range(params.p + 1):
                rows.append(("log_model_weight", f"|S|={k}", f"{th.log_model_weight(params, k):.17g}"))
    text = "quantity,argument,value\n" + "".join(",".join(r) + "\n" for r in rows)
    out = _outdir(cfg)
    _write_text(out / "diag.csv", text)
    sys.stdout.write(text)
    return rows


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="abcforest", description="Variable selection with ABC Bayesian forests")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value file")
        if name == "diag":
            sp.add_argument("quantity", choices=DIAG_QUANTITIES)
            sp.add_argument("value", nargs="?")
        for key in COMMON + keys:
            k = C.KEYS[key]
            sp.add_argument(C.flag_name(key), dest=key, default=None, metavar=key.upper(),
                            help=f"{k.help} (default: {k.default})")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: getattr(args, k) for k in COMMON + COMMAND_KEYS[args.command]}
    try:
        cfg = C.resolve(flags, args.config)
        if args.command == "diag":
            cmd_diag(cfg, args.quantity, args.value)
        else:
            globals()["cmd_" + args.command](cfg)
    except (C.ConfigError, ValueError) as exc:
        parser.exit(2, f"error: {exc}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
