#!/usr/bin/env python3
"""Compiled vs pure-Python backfitting kernels.

Each side runs in its own interpreter (the pure side with
ABCFOREST_NO_NUMBA=1) on the same data and seed; the script reports wall
time per sweep and checks that both produce the same fit.

    python benchmarks/bench_kernels.py --n 200 --p 10 --sweeps 50
"""
import argparse
import json
import os
import subprocess
import sys
import time


def worker(n, p, sweeps, trees):
    import numpy as np

    from abcforest import USE_NUMBA
    from abcforest.bart import BartConfig, BartState
    from abcforest.bench import SetupSpec, generate
    from abcforest.rng import stream

    data = generate(SetupSpec("friedman", n, p, seed=0), stream(0, "bench-data"))
    cfg = BartConfig(T=trees, burn_in=0)
    # warm-up absorbs compilation (or cache load)
    BartState(data, range(p), cfg).sweeps(2, stream(0, "warm"))
    state = BartState(data, range(p), cfg)
    t0 = time.perf_counter()
    state.sweeps(sweeps, stream(0, "bench"))
    dt = time.perf_counter() - t0
    digest = float(np.sum(state.yhat * np.arange(1, n + 1)))
    print(json.dumps({"numba": USE_NUMBA, "seconds": dt, "per_sweep": dt / sweeps,
                      "checksum": digest, "sigma_sq": state.sigma_sq}))


def run_side(disable, args):
    env = dict(os.environ)
    env["ABCFOREST_NO_NUMBA"] = "1" if disable else "0"
    cmd = [sys.executable, __file__, "--worker", "--n", str(args.n), "--p", str(args.p),
           "--sweeps", str(args.sweeps), "--trees", str(args.trees)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--p", type=int, default=10)
    ap.add_argument("--sweeps", type=int, default=50)
    ap.add_argument("--trees", type=int, default=10)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.n, args.p, args.sweeps, args.trees)
        return 0
    fast = run_side(False, args)
    slow = run_side(True, args)
    print(f"n={args.n} p={args.p} T={args.trees} sweeps={args.sweeps}")
    print(f"  numba : {fast['per_sweep'] * 1e3:9.3f} ms/sweep")
    print(f"  python: {slow['per_sweep'] * 1e3:9.3f} ms/sweep")
    print(f"  speedup {slow['per_sweep'] / fast['per_sweep']:.1f}x")
    same = fast["checksum"] == slow["checksum"] and fast["sigma_sq"] == slow["sigma_sq"]
    print(f"  identical fits: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
