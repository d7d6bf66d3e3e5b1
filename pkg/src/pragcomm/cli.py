"""Command-line entry point: ``pragcomm {generate,solve,sweep,bench,verify}``.

Settings come from built-in defaults, then the ``--config`` JSON file,
then command-line flags; later sources win. The output directory is
``--out``, else the config's ``output_dir``, else ``$PRAGCOMM_OUT``, else
``./results``.

Exit status: 0 success, 2 some sweep cells failed, 3 a solver did not
converge, 4 invalid configuration or input.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import mdp as mdp_io
from .evaluation import evaluate_exact
from .experiments import (
    BENCH_HEADER,
    FRONTIER_HEADER,
    PAOI_HEADER,
    SOLVERS,
    SWEEP_HEADER,
    ExperimentConfig,
    SweepGrid,
    make_instance,
    metadata,
    pareto_sweep,
    run_solver,
    runtime_bench,
    write_csv,
    write_sidecar,
)
from .mdp import ConvergenceError

log = logging.getLogger("pragcomm")

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INVALID = 4
OUT_ENV = "PRAGCOMM_OUT"


class InvalidInput(Exception):
    pass


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise InvalidInput(f"cannot read config: {err}") from err
    try:
        cfg = ExperimentConfig.from_document(doc)
        overrides = {}
        if getattr(args, "seed", None) is not None:
            overrides["grid"] = dataclasses.replace(cfg.grid, seeds=(args.seed,))
        if getattr(args, "beta", None) is not None and getattr(args, "command", "") == "sweep":
            overrides["grid"] = dataclasses.replace(overrides.get("grid", cfg.grid), betas=(args.beta,))
        if getattr(args, "solver", None) and getattr(args, "command", "") in ("sweep", "bench"):
            overrides["solvers"] = tuple(args.solver.split(","))
        if overrides:
            cfg = ExperimentConfig.from_document({**cfg.to_document(), **_as_doc(overrides)})
    except (TypeError, ValueError) as err:
        raise InvalidInput(f"invalid config: {err}") from err
    return cfg


def _as_doc(overrides: dict) -> dict:
    out = dict(overrides)
    if "grid" in out:
        out["grid"] = {k: list(v) for k, v in dataclasses.asdict(out["grid"]).items()}
    if "solvers" in out:
        out["solvers"] = list(out["solvers"])
    return out


def output_dir(args, cfg: ExperimentConfig) -> Path:
    root = args.out or cfg.output_dir or os.environ.get(OUT_ENV) or "results"
    path = Path(root)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise InvalidInput(f"cannot create output directory {path}: {err}") from err
    return path


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    cells = [(0, 0.0)] if cfg.family in ("counterexample", "from_file") else list(cfg.grid.cells())
    manifest = []
    for seed, d in cells:
        mdp = make_instance(cfg, seed, d)
        name = cfg.family if len(cells) == 1 and cfg.family == "counterexample" else f"{cfg.family}_s{seed}_d{d:g}"
        path = out / f"{name}.json"
        path.write_text(mdp_io.dumps(mdp))
        manifest.append({"file": path.name, "seed": seed, "d": d, "fingerprint": mdp.fingerprint()})
    _write_json(out / "manifest.json", {"files": manifest, **metadata(cfg)})
    print(f"wrote {len(manifest)} MDP file(s) to {out}")
    return EXIT_OK


def policy_document(outcome, mdp, beta: float, t_max: int) -> dict:
    jp = outcome.policy
    doc = {
        "solver": outcome.solver,
        "architecture": jp.architecture,
        "decoder": jp.decoder.table.tolist(),
        "encoder": jp.encoder.table.tolist(),
        "metadata": {"beta": beta, "gamma": mdp.discount, "t_max": t_max, "mdp": mdp.fingerprint()},
    }
    if jp.architecture in ("pull", "periodic"):
        # delay after which each last update triggers the next one
        fire = jp.encoder.table[0, 1:, :]
        doc["tau"] = (np.argmax(fire == 1, axis=0) + 1).tolist()
    return doc


def cmd_solve(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    if args.solver not in SOLVERS:
        raise InvalidInput(f"unknown solver {args.solver!r}; choose from {', '.join(SOLVERS)}")
    if args.mdp:
        try:
            mdp = mdp_io.loads(Path(args.mdp).read_text())
        except (OSError, ValueError, KeyError) as err:
            raise InvalidInput(f"cannot read MDP: {err}") from err
    else:
        mdp = make_instance(cfg, cfg.grid.seeds[0], cfg.grid.densities[0])
    if args.solver == "jpo" and mdp.n_states > cfg.jpo_cap:
        raise InvalidInput(f"jpo is limited to {cfg.jpo_cap} states")
    beta = args.beta if args.beta is not None else cfg.grid.betas[0]
    hc = cfg.horizon
    try:
        outcome = run_solver(args.solver, mdp, beta, hc)
    except ConvergenceError as err:
        _write_json(out / "convergence.json", {"solver": args.solver, "converged": False, "error": str(err)})
        log.error("%s", err)
        return EXIT_NO_CONVERGENCE
    res = evaluate_exact(mdp, beta, outcome.policy, hc)
    stem = f"{args.solver}_beta{beta:g}"
    _write_json(out / f"{stem}_policy.json", policy_document(outcome, mdp, beta, hc.t_max))
    summary = {
        "solver": args.solver,
        "beta": beta,
        "value": res.reward,
        "reward": res.reward_raw,
        "channel_use": res.channel_use,
        "channel_rate": res.channel_rate,
        **outcome.extra,
    }
    _write_json(out / f"{stem}_summary.json", summary)
    _write_json(
        out / f"{stem}_convergence.json",
        {"solver": args.solver, "converged": outcome.converged, "rounds": outcome.rounds, "wall_ms": outcome.wall_ms},
    )
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if outcome.converged else EXIT_NO_CONVERGENCE


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    result = pareto_sweep(cfg, workers=args.workers)
    meta = metadata(cfg, failures=result.failures)
    for name, header, rows in (
        ("sweep.csv", SWEEP_HEADER, result.rows),
        ("frontier.csv", FRONTIER_HEADER, result.frontier),
        ("paoi.csv", PAOI_HEADER, result.paoi),
    ):
        write_csv(out / name, header, rows)
        write_sidecar(out / name, meta)
    print(f"{len(result.rows)} cells solved, {len(result.failures)} failed; output in {out}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    solvers = [s for s in cfg.solvers if s != "periodic"]
    rows = runtime_bench(
        cfg.bench_sizes,
        cfg.bench_reps,
        solvers,
        jpo_sizes=cfg.bench_jpo_sizes,
        t_max=cfg.t_max,
        beta=cfg.bench_beta,
        epsilon=cfg.epsilon,
        jpo_cap=cfg.jpo_cap,
    )
    write_csv(out / "bench.csv", BENCH_HEADER, rows)
    write_sidecar(out / "bench.csv", metadata(cfg))
    for r in rows:
        print(f"{r['solver']:>8} |S|={r['n_states']:<3} median {r['median_s']:.4f}s")
    return EXIT_OK


def cmd_verify(args) -> int:
    suite = Path(__file__).resolve().parents[2] / "tests" / "test_acceptance.py"
    if not suite.exists():
        raise InvalidInput(f"acceptance suite not found at {suite}")
    cmd = [sys.executable, "-m", "pytest", str(suite), "-s", "-q"]
    return subprocess.call(cmd)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--beta", type=float, help="communication cost")
    common.add_argument("--solver", help=f"one of {', '.join(SOLVERS)} (comma list for sweep/bench)")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pragcomm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write MDP instances and a manifest")
    solve = sub.add_parser("solve", parents=[common], help="solve one instance")
    solve.add_argument("mdp", nargs="?", help="serialized MDP (default: first config cell)")
    sub.add_parser("sweep", parents=[common], help="beta/density sweep with frontier CSVs")
    sub.add_parser("bench", parents=[common], help="runtime versus state count")
    sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "solve" and not args.solver:
        print("error: solve needs --solver", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except InvalidInput as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
