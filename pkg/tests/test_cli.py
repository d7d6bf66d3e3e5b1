import csv
import json

import numpy as np
import pytest

from pragcomm import cli
from pragcomm.evaluation import fully_observed_values
from pragcomm.mdp import ConvergenceError, build_counterexample, loads


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def ce_config(tmp_path):
    return write_config(
        tmp_path / "ce.json",
        family="counterexample",
        gamma=0.9,
        t_max=4,
        epsilon=1e-2,
        grid={"betas": [0.1], "densities": [0.5], "seeds": [0]},
    )


def read_json(path):
    return json.loads(path.read_text())


def test_generate_counterexample(tmp_path, ce_config):
    out = tmp_path / "gen"
    assert cli.main(["generate", "--config", ce_config, "--out", str(out)]) == 0
    files = sorted(p.name for p in out.glob("*.json"))
    assert files == ["counterexample.json", "manifest.json"]
    mdp = loads((out / "counterexample.json").read_text())
    assert mdp.fingerprint() == build_counterexample(0.9).fingerprint()


def test_generate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json", n_states=4, grid={"betas": [0.1], "densities": [0.25, 0.75], "seeds": [0, 1]})
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["generate", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["generate", "--config", cfg, "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert len(names) == 5
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    manifest = read_json(a / "manifest.json")
    assert len(manifest["files"]) == 4
    for entry in manifest["files"]:
        assert loads((a / entry["file"]).read_text()).fingerprint() == entry["fingerprint"]


def test_output_dir_from_environment(tmp_path, ce_config, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["generate", "--config", ce_config]) == 0
    assert (tmp_path / "env" / "counterexample.json").exists()


def test_solve_mpi_free_channel(tmp_path, ce_config):
    out = tmp_path / "s"
    assert cli.main(["solve", "--config", ce_config, "--out", str(out), "--solver", "mpi", "--beta", "0"]) == 0
    summary = read_json(out / "mpi_beta0_summary.json")
    v_star, _ = fully_observed_values(build_counterexample(0.9))
    assert summary["value"] == pytest.approx(v_star[0], abs=1e-2)
    policy = read_json(out / "mpi_beta0_policy.json")
    assert policy["architecture"] == "pull"
    assert all(1 <= t <= 4 for t in policy["tau"])
    assert read_json(out / "mpi_beta0_convergence.json")["converged"]


def test_solve_api_inits_differ(tmp_path, ce_config):
    out = tmp_path / "s"
    for solver in ("api_pe0", "api_pe1"):
        assert cli.main(["solve", "--config", ce_config, "--out", str(out), "--solver", solver, "--beta", "0.1"]) == 0
    p0 = read_json(out / "api_pe0_beta0.1_policy.json")
    p1 = read_json(out / "api_pe1_beta0.1_policy.json")
    assert (p0["encoder"], p0["decoder"]) != (p1["encoder"], p1["decoder"])
    v0 = read_json(out / "api_pe0_beta0.1_summary.json")["value"]
    v1 = read_json(out / "api_pe1_beta0.1_summary.json")["value"]
    assert v1 > v0


def test_solve_jpo_from_file(tmp_path, ce_config):
    gen = tmp_path / "gen"
    cli.main(["generate", "--config", ce_config, "--out", str(gen)])
    out = tmp_path / "s"
    rc = cli.main(["solve", str(gen / "counterexample.json"), "--config", ce_config, "--out", str(out), "--solver", "jpo", "--beta", "0.3"])
    assert rc == 0
    summary = read_json(out / "jpo_beta0.3_summary.json")
    assert summary["root_gap"] <= 1e-2
    assert summary["value"] == pytest.approx(summary["lower"], abs=1e-2)


def test_invalid_inputs(tmp_path, ce_config, capsys):
    out = str(tmp_path / "o")
    bad = write_config(tmp_path / "bad.json", family="counterexample", colour="red")
    assert cli.main(["generate", "--config", bad, "--out", out]) == cli.EXIT_INVALID
    assert cli.main(["generate", "--config", str(tmp_path / "missing.json"), "--out", out]) == cli.EXIT_INVALID
    assert cli.main(["solve", "--config", ce_config, "--out", out, "--solver", "magic"]) == cli.EXIT_INVALID
    assert cli.main(["solve", "--config", ce_config, "--out", out]) == cli.EXIT_INVALID
    assert cli.main(["sweep", "--config", ce_config, "--out", out, "--workers", "0"]) == cli.EXIT_INVALID
    assert cli.main(["solve", str(tmp_path / "nope.json"), "--out", out, "--solver", "mpi"]) == cli.EXIT_INVALID
    big = write_config(tmp_path / "big.json", n_states=14)
    assert cli.main(["solve", "--config", big, "--out", out, "--solver", "jpo"]) == cli.EXIT_INVALID
    assert "error" in capsys.readouterr().err


def test_nonconvergence_exit(tmp_path, ce_config, monkeypatch):
    def stalls(*args, **kw):
        raise ConvergenceError("iteration cap")

    monkeypatch.setattr(cli, "run_solver", stalls)
    out = tmp_path / "s"
    assert cli.main(["solve", "--config", ce_config, "--out", str(out), "--solver", "mpi"]) == cli.EXIT_NO_CONVERGENCE
    assert read_json(out / "convergence.json")["converged"] is False


def test_sweep_writes_csvs(tmp_path):
    cfg = write_config(
        tmp_path / "c.json",
        n_states=3,
        t_max=3,
        solvers=["mpi", "api_pe0"],
        grid={"betas": [0.0, 0.5, 1.0], "densities": [0.5], "seeds": [0]},
    )
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert sorted({float(r["beta"]) for r in rows}) == [0.0, 0.5, 1.0]
    for name in ("frontier.csv", "paoi.csv"):
        assert (out / name).exists()
        assert read_json(out / f"{name}.meta.json")["seeds"] == [0]


def test_sweep_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", n_states=3, t_max=3, grid={"betas": [0.0, 0.5], "densities": [0.5], "seeds": [0, 1]})
    out = tmp_path / "sw"
    rc = cli.main(["sweep", "--config", cfg, "--out", str(out), "--workers", "1", "--seed", "1", "--beta", "0.5", "--solver", "mpi"])
    assert rc == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["solver"], r["seed"], r["beta"]) for r in rows] == [("mpi", "1", "0.5")]


def test_bench_respects_jpo_cap(tmp_path):
    cfg = write_config(
        tmp_path / "b.json",
        n_states=2,
        t_max=3,
        epsilon=1e-2,
        solvers=["mpi", "jpo"],
        bench_sizes=[2, 3],
        bench_jpo_sizes=[2, 3],
        bench_reps=1,
        jpo_cap=2,
    )
    out = tmp_path / "bench"
    assert cli.main(["bench", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "bench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["solver"], r["n_states"]) for r in rows] == [("mpi", "2"), ("mpi", "3"), ("jpo", "2")]
    assert np.all([float(r["median_s"]) > 0 for r in rows])
