"""Parameter sweeps, trade-off frontiers and runtime benchmarks."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import JointPolicy, evaluate_exact
from .jpo import DEFAULT_STATE_CAP, solve_jpo
from .mdp import (
    ControlledMarkovProcess,
    DEFAULT_GAMMA,
    ConvergenceError,
    HorizonConfig,
    build_counterexample,
    control_instance,
    estimation_instance,
    loads,
)
from .pull import solve_mpi, solve_periodic
from .push import solve_api, standard_inits

log = logging.getLogger(__name__)

SOLVERS = ("mpi", "periodic", "api_pe0", "api_pe1", "jpo")
FAMILIES = ("control_two_peak", "estimation", "counterexample", "from_file")
SWEEP_HEADER = ("solver", "init", "seed", "d", "beta", "reward", "channel_use", "rounds", "wall_ms", "converged")
PAOI_HEADER = ("solver", "init", "seed", "d", "beta", "s_last", "peak", "mass")
FRONTIER_HEADER = ("solver", "seed", "d", "channel_use", "reward", "beta")
BENCH_HEADER = ("solver", "n_states", "reps", "median_s", "min_s", "max_s")

DEFAULT_BETAS = tuple(round(0.1 * i, 10) for i in range(21))


def default_densities(n_states: int, rows: int = 14, top: float = 0.95) -> tuple[float, ...]:
    return tuple(float(x) for x in np.round(np.linspace(1.0 / n_states, top, rows), 6))


@dataclass(frozen=True)
class SweepGrid:
    betas: tuple[float, ...] = DEFAULT_BETAS
    densities: tuple[float, ...] = (0.5,)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("betas", "densities", "seeds"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"sweep grid needs at least one value in {name}")
            if list(vals) != sorted(vals):
                raise ValueError(f"{name} must be sorted")
            object.__setattr__(self, name, vals)

    def cells(self):
        for seed in self.seeds:
            for d in self.densities:
                yield seed, d


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "control_two_peak"
    n_states: int = 5
    n_actions: int = 2
    gamma: float = DEFAULT_GAMMA
    t_max: int = 5
    epsilon: float = 1e-3
    grid: SweepGrid = field(default_factory=SweepGrid)
    solvers: tuple[str, ...] = ("mpi", "periodic", "api_pe0", "api_pe1")
    output_dir: str = ""  # empty: --out, then $PRAGCOMM_OUT, then ./results
    mdp_file: str | None = None
    bench_sizes: tuple[int, ...] = (2, 4, 6, 8, 10)
    bench_jpo_sizes: tuple[int, ...] = (2, 4, 6, 8, 10)
    bench_reps: int = 3
    bench_beta: float = 0.3
    jpo_cap: int = DEFAULT_STATE_CAP

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        bad = [s for s in self.solvers if s not in SOLVERS]
        if bad:
            raise ValueError(f"unknown solvers {bad}")
        if "jpo" in self.solvers and self.n_states > self.jpo_cap:
            raise ValueError(f"jpo needs n_states <= {self.jpo_cap}")
        if self.family == "from_file" and not self.mdp_file:
            raise ValueError("from_file family needs mdp_file")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        object.__setattr__(self, "solvers", tuple(self.solvers))
        object.__setattr__(self, "bench_sizes", tuple(self.bench_sizes))
        object.__setattr__(self, "bench_jpo_sizes", tuple(self.bench_jpo_sizes))

    @property
    def horizon(self) -> HorizonConfig:
        return HorizonConfig(t_max=self.t_max, epsilon=self.epsilon)

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["grid"] = {k: list(v) for k, v in doc["grid"].items()}
        for k in ("solvers", "bench_sizes", "bench_jpo_sizes"):
            doc[k] = list(doc[k])
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        grid = doc.pop("grid", None)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        if grid is not None:
            kwargs["grid"] = SweepGrid(**{k: tuple(v) for k, v in grid.items()})
        return cls(**kwargs)

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_document(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def make_instance(cfg: ExperimentConfig, seed: int, d: float) -> ControlledMarkovProcess:
    if cfg.family == "control_two_peak":
        return control_instance(seed, cfg.n_states, cfg.n_actions, d, cfg.gamma)
    if cfg.family == "estimation":
        return estimation_instance(seed, cfg.n_states, d, cfg.gamma)
    if cfg.family == "counterexample":
        return build_counterexample(cfg.gamma)
    return loads(Path(cfg.mdp_file).read_text())


# -- single solves -----------------------------------------------------------

@dataclass
class SolveOutcome:
    solver: str
    init: str
    policy: JointPolicy
    value: float
    rounds: int
    converged: bool
    wall_ms: float
    extra: dict = field(default_factory=dict)


def run_solver(solver: str, mdp: ControlledMarkovProcess, beta: float, hc: HorizonConfig) -> SolveOutcome:
    start = time.perf_counter()
    extra = {}
    if solver == "mpi":
        sol = solve_mpi(mdp, beta, hc)
        jp = JointPolicy.pull(sol.pi_d, sol.tau)
        rounds, converged, init = sol.iterations, True, ""
    elif solver == "periodic":
        sol = solve_periodic(mdp, beta, hc)
        jp = JointPolicy.pull(sol.pi_d, sol.tau, "periodic")
        rounds, converged, init = len(sol.by_period), True, ""
        extra["period"] = sol.period
    elif solver in ("api_pe0", "api_pe1"):
        init = solver[-3:]
        enc = standard_inits(mdp, hc)[int(init[-1])]
        policy, report = solve_api(mdp, beta, enc, hc)
        jp = JointPolicy.push(policy)
        rounds, converged = report.rounds, report.converged
        extra["gap"] = report.final_gap
    elif solver == "jpo":
        res = solve_jpo(mdp, beta, hc.epsilon, hc)
        jp = JointPolicy.push(res.policy)
        rounds, converged, init = res.backups, res.converged, ""
        extra["lower"] = res.value
        extra["root_gap"] = max(res.root_gaps)
        extra["first_step_value"] = res.first_step.value
    else:
        raise ValueError(f"unknown solver {solver!r}")
    wall = (time.perf_counter() - start) * 1e3
    value = evaluate_exact(mdp, beta, jp, hc).reward
    return SolveOutcome(solver, init, jp, value, rounds, converged, wall, extra)


# -- sweeps ------------------------------------------------------------------

def _sweep_cell(args):
    cfg, seed, d, beta, solver = args
    key = dict(solver=solver, seed=seed, d=d, beta=beta)
    try:
        mdp = make_instance(cfg, seed, d)
        out = run_solver(solver, mdp, beta, cfg.horizon)
    except (ConvergenceError, ValueError, np.linalg.LinAlgError) as err:
        return key, None, str(err)
    res = evaluate_exact(mdp, beta, out.policy, cfg.horizon)
    row = {
        "solver": solver,
        "init": out.init,
        "seed": seed,
        "d": d,
        "beta": beta,
        # per-step average reward and long-run transmission frequency
        "reward": res.reward_raw * (1 - mdp.discount),
        "channel_use": res.channel_rate,
        "rounds": out.rounds,
        "wall_ms": round(out.wall_ms, 3),
        "converged": out.converged,
    }
    paoi = [
        {**{k: row[k] for k in ("solver", "init", "seed", "d", "beta")}, "s_last": j, "peak": p, "mass": float(res.paoi[j, p])}
        for j in range(res.paoi.shape[0])
        for p in range(1, res.paoi.shape[1])
        if res.paoi[j, p] > 0
    ]
    return key, (row, paoi), None


@dataclass
class SweepResult:
    rows: list[dict]
    paoi: list[dict]
    frontier: list[dict]
    failures: list[dict]


def upper_hull(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Upper-left convex frontier of (channel_use, reward) points, by monotone chain.

    Time sharing makes every point on the hull achievable; the rising part
    is the trade-off frontier.
    """
    pts = sorted(set(points))
    hull: list[tuple[float, float]] = []
    for p in pts:
        # drop the last point while it does not make a right turn
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    # keep the part where more channel use buys more reward
    top = max(range(len(hull)), key=lambda i: (hull[i][1], -hull[i][0]))
    return hull[: top + 1]


def frontier_rows(rows: list[dict]) -> list[dict]:
    out = []
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["solver"], r["init"], r["seed"], r["d"]), []).append(r)
    for (solver, init, seed, d), grp in sorted(groups.items()):
        by_point = {(r["channel_use"], r["reward"]): r["beta"] for r in grp}
        for x, y in upper_hull(list(by_point)):
            out.append({"solver": solver, "seed": seed, "d": d, "channel_use": x, "reward": y, "beta": by_point[(x, y)]})
    return out


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def pareto_sweep(cfg: ExperimentConfig, grid: SweepGrid | None = None, solvers=None, workers: int | None = None) -> SweepResult:
    """Solve and evaluate every (seed, d, beta, solver) cell.

    Cells run on a process pool of ``workers`` (1 runs inline). Failed
    cells are recorded and the sweep continues. Output order is fixed by
    the cell keys, so results do not depend on scheduling.
    """
    grid = grid or cfg.grid
    solvers = tuple(solvers or cfg.solvers)
    tasks = [
        (cfg, seed, d, beta, solver)
        for seed, d in grid.cells()
        for beta in grid.betas
        for solver in solvers
    ]
    workers = workers or default_workers()
    if workers == 1:
        results = [_sweep_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    rows, paoi, failures = [], [], []
    for key, payload, err in results:
        if payload is None:
            failures.append({**key, "error": err})
            log.warning("sweep cell %s failed: %s", key, err)
            continue
        rows.append(payload[0])
        paoi.extend(payload[1])
    order = {s: i for i, s in enumerate(SOLVERS)}
    rows.sort(key=lambda r: (r["seed"], r["d"], order[r["solver"]], r["beta"]))
    return SweepResult(rows, paoi, frontier_rows(rows), failures)


# -- benchmark ---------------------------------------------------------------

def bench_instance(seed: int, n_states: int, gamma: float = 0.9) -> ControlledMarkovProcess:
    mdp = control_instance(seed, n_states, 2, 0.5, gamma)
    return mdp.with_initial(np.eye(n_states)[0])


def runtime_bench(
    sizes,
    reps: int = 3,
    solvers=("mpi", "api_pe0", "api_pe1", "jpo"),
    jpo_sizes=None,
    t_max: int = 3,
    beta: float = 0.3,
    epsilon: float = 1e-2,
    jpo_cap: int = DEFAULT_STATE_CAP,
) -> list[dict]:
    """Median, min and max wall time per solver and state count.

    Instances are control MDPs at density 0.5 starting from state 0. JPO
    rows are skipped above ``jpo_cap`` and outside ``jpo_sizes``.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be sorted")
    jpo_sizes = set(sizes if jpo_sizes is None else jpo_sizes)
    hc = HorizonConfig(t_max=t_max, epsilon=epsilon)
    rows = []
    for solver in solvers:
        for n in sizes:
            if solver == "jpo" and (n > jpo_cap or n not in jpo_sizes):
                continue
            times = []
            for rep in range(reps):
                mdp = bench_instance(rep, n)
                start = time.perf_counter()
                if solver == "jpo":
                    solve_jpo(mdp, beta, epsilon, hc)
                else:
                    run_solver(solver, mdp, beta, hc)
                times.append(time.perf_counter() - start)
            rows.append(
                {
                    "solver": solver,
                    "n_states": n,
                    "reps": reps,
                    "median_s": float(np.median(times)),
                    "min_s": float(np.min(times)),
                    "max_s": float(np.max(times)),
                }
            )
    return rows


def loglog_slope(sizes, times) -> float:
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def local_slopes(sizes, times) -> np.ndarray:
    """Elasticity between consecutive sizes: d log t / d log n."""
    s, t = np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float))
    return np.diff(t) / np.diff(s)


# -- output ------------------------------------------------------------------

def write_csv(path: Path, header, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in header})


def metadata(cfg: ExperimentConfig | None, **extra) -> dict:
    import scipy

    doc = {
        "versions": {
            "pragcomm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }
    if cfg is not None:
        doc["config_hash"] = cfg.digest()
        doc["seeds"] = list(cfg.grid.seeds)
        doc["config"] = cfg.to_document()
    return doc


def write_sidecar(path: Path, meta: dict):
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
