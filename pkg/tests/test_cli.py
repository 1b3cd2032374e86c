import os
import subprocess
import sys

import numpy as np
import pytest

from abcforest import config as C
from abcforest.cli import COMMAND_KEYS, main
from abcforest.model import read_dataset


def run(*argv):
    return main([str(a) for a in argv])


def write_cfg(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# config ----------------------------------------------------------------------

def test_every_key_has_a_default_and_help():
    for key in C.KEYS.values():
        assert key.help
        assert key.name in {k for keys in COMMAND_KEYS.values() for k in keys} | {"seed", "workers", "out"}


def test_precedence_flag_over_file_over_default(tmp_path):
    f = write_cfg(tmp_path / "run.cfg", "n = 40\np = 7  # comment\nsigma = 0.5\n")
    cfg = C.resolve({"n": "25", "p": None}, f)
    assert (cfg["n"], cfg["p"], cfg["sigma"], cfg["seed"]) == (25, 7, 0.5, 0)


def test_unknown_keys_rejected(tmp_path):
    f = write_cfg(tmp_path / "run.cfg", "n = 40\nbogus = 1\n")
    with pytest.raises(C.ConfigError, match="bogus"):
        C.resolve({}, f)
    with pytest.raises(C.ConfigError):
        C.resolve({"bogus": 1})


def test_value_parsing(tmp_path):
    cfg = C.resolve({"subset": "1;3", "standardize": "no", "s": "auto", "setups": "linear;friedman"})
    assert cfg["subset"] == [0, 2] and cfg["standardize"] is False and cfg["s"] is None
    assert cfg["setups"] == ["linear", "friedman"]
    with pytest.raises(C.ConfigError):
        C.resolve({"n": "many"})
    with pytest.raises(C.ConfigError):
        C.resolve({"subset": "0;1"})


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    f = write_cfg(tmp_path / "run.cfg", "kind = friedman\ncolour = red\n")
    with pytest.raises(SystemExit) as e:
        run("simulate", "--config", f, "--out", tmp_path)
    assert e.value.code == 2 and "colour" in capsys.readouterr().err


# simulate ---------------------------------------------------------------------

def test_simulate_shape_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        run("simulate", "--kind", "friedman", "--n", 500, "--p", 100, "--seed", 1, "--out", out)
    raw = (a / "data.csv").read_bytes()
    assert raw == (b / "data.csv").read_bytes()
    assert (a / "support.txt").read_bytes() == b"1\n2\n3\n4\n5\n"
    lines = raw.decode("utf-8").split("\n")
    assert lines[-1] == "" and len(lines) == 502 and "\r" not in raw.decode("utf-8")
    assert all(len(line.split(",")) == 101 for line in lines[:-1])


def test_simulate_round_trip_is_lossless(tmp_path):
    from abcforest.bench import SetupSpec, generate
    from abcforest.rng import stream

    run("simulate", "--kind", "linear", "--n", 30, "--p", 6, "--seed", 4, "--out", tmp_path)
    d = read_dataset(tmp_path / "data.csv", tmp_path / "support.txt")
    ref = generate(SetupSpec("linear", 30, 6, 4), stream(4, "simulate"))
    assert np.array_equal(d.X, ref.X) and np.array_equal(d.y, ref.y)
    assert d.true_support == ref.true_support


def test_simulate_validation_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run("simulate", "--kind", "friedman", "--p", 4, "--out", tmp_path)
    assert e.value.code == 2 and "p >= 5" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SystemExit):
        run("simulate", "--n", 10, "--p", 5, "--out", blocker / "sub")


# abc --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    run("simulate", "--kind", "friedman", "--n", 40, "--p", 6, "--seed", 2, "--out", d)
    return d / "data.csv"


def abc_args(data, out, *extra):
    return ("abc", "--data", data, "--M", 40, "--T", 3, "--burn-in", 5, "--seed", 9, "--out", out) + extra


def test_abc_outputs(dataset, tmp_path):
    run(*abc_args(dataset, tmp_path))
    head = (tmp_path / "abc_table.csv").read_text(encoding="utf-8").splitlines()
    assert len(head) == 41
    assert (tmp_path / "curve.csv").exists()
    inc = (tmp_path / "inclusion.csv").read_text(encoding="utf-8").splitlines()
    assert inc[0] == "var,pi" and len(inc) == 7
    probs = np.array([float(line.split(",")[1]) for line in inc[1:]])
    mpm = (tmp_path / "mpm.txt").read_text(encoding="utf-8").strip()
    expect = ";".join(str(j + 1) for j in np.flatnonzero(probs >= 0.5))
    assert mpm == expect


def test_abc_quantile_one_uses_every_record(dataset, tmp_path):
    from abcforest.abc_engine import AbcTable

    run(*abc_args(dataset, tmp_path, "--quantile", 1.0))
    table = AbcTable.from_csv(tmp_path / "abc_table.csv", 6)
    freq = np.mean([[j in r.vars_used for j in range(6)] for r in table.records], axis=0)
    inc = (tmp_path / "inclusion.csv").read_text(encoding="utf-8").splitlines()[1:]
    assert np.allclose([float(line.split(",")[1]) for line in inc], freq)


def test_abc_naive_mode_runs_without_subsample(dataset, tmp_path):
    run(*abc_args(dataset, tmp_path, "--fit-mode", "naive"))
    rows = (tmp_path / "abc_table.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 41


def test_abc_missing_data(tmp_path):
    with pytest.raises(SystemExit, match="not found"):
        run("abc", "--data", tmp_path / "nope.csv", "--out", tmp_path)


def test_abc_workers_identical(dataset, tmp_path):
    for w in (1, 3):
        run(*abc_args(dataset, tmp_path / f"w{w}", "--workers", w))
    for name in ("abc_table.csv", "curve.csv", "mpm.txt", "inclusion.csv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


# sf ---------------------------------------------------------------------------

def test_sf_chain_length_and_determinism(dataset, tmp_path):
    for out in ("a", "b"):
        run("sf", "--data", dataset, "--iterations", 300, "--burn-in-frac", 0.2, "--seed", 3,
            "--out", tmp_path / out)
    chain = (tmp_path / "a" / "sf_chain.csv").read_bytes()
    assert chain == (tmp_path / "b" / "sf_chain.csv").read_bytes()
    lines = chain.decode("utf-8").splitlines()
    assert lines[0] == "step,accepted,subset,K_total,log_post" and len(lines) == 301
    inc = (tmp_path / "a" / "sf_inclusion.csv").read_text(encoding="utf-8").splitlines()
    assert inc[0] == "var,inclusion" and len(inc) == 7


def test_sf_resume_is_unsupported(dataset, tmp_path):
    with pytest.raises(SystemExit, match="not supported"):
        run("sf", "--data", dataset, "--resume", "true", "--out", tmp_path)


# bench ------------------------------------------------------------------------

def test_bench_two_replicates(tmp_path):
    run("bench", "--setups", "linear", "--n", 30, "--p", 5, "--replicates", 2, "--methods", "abc",
        "--M", 20, "--T", 2, "--burn-in", 3, "--out", tmp_path)
    rows = (tmp_path / "bench.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "setup,p,method,metric,mean,sd" and len(rows) == 6
    assert all(r.startswith("linear,5,abc,") for r in rows[1:])


# diag -------------------------------------------------------------------------

def test_diag_partition_number(tmp_path, capsys):
    run("diag", "partition-number", 5, "--out", tmp_path)
    assert capsys.readouterr().out == "quantity,argument,value\npartition-number,5,7\n"
    assert (tmp_path / "diag.csv").read_text(encoding="utf-8").endswith("partition-number,5,7\n")


def test_diag_gap_on_step_example(tmp_path, capsys):
    X = np.array([[0.1, 0.6], [0.4, 0.1], [0.6, 0.9], [0.9, 0.4]])
    y = (X[:, 0] > 0.5).astype(float)
    lines = ["y,x1,x2"] + [f"{y[i]:.17g},{X[i, 0]:.17g},{X[i, 1]:.17g}" for i in range(4)]
    (tmp_path / "step.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run("diag", "gap", "--data", tmp_path / "step.csv", "--subset", "1", "--K", 2, "--out", tmp_path)
    assert capsys.readouterr().out.splitlines()[1] == "gap,S=1;K=2,0"
    run("diag", "count", "--data", tmp_path / "step.csv", "--subset", "1;2", "--K", 2, "--out", tmp_path)
    assert capsys.readouterr().out.splitlines()[1] == "count,S=1;2;K=2,6"


def test_diag_rate_and_weights(tmp_path, capsys):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        run("diag", "weights", "--n", 100, "--p", 3, "--C", 3, "--out", tmp_path)
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 5 and out[1].startswith("log_model_weight,|S|=0,")
    run("diag", "rate", "--n", 100, "--subset", "1;2", "--out", tmp_path)
    assert capsys.readouterr().out.splitlines()[1].startswith("rate,|S|=2,")


def test_diag_needs_argument(tmp_path):
    with pytest.raises(SystemExit):
        run("diag", "equiv-bound", "--out", tmp_path)


# acceleration switch ------------------------------------------------------------

def test_pure_python_path_gives_identical_table(dataset, tmp_path):
    env = dict(os.environ)
    outs = {}
    for flag in ("0", "1"):
        env["ABCFOREST_NO_NUMBA"] = flag
        out = tmp_path / f"nb{flag}"
        subprocess.run([sys.executable, "-m", "abcforest.cli", *map(str, abc_args(dataset, out))],
                       env=env, check=True)
        outs[flag] = (out / "abc_table.csv").read_bytes()
    assert outs["0"] == outs["1"]
    probe = subprocess.run([sys.executable, "-c", "import abcforest; print(abcforest.USE_NUMBA)"],
                           env=env, check=True, capture_output=True, text=True)
    assert probe.stdout.strip() == "False"
