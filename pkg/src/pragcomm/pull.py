"""Pull-based remote control: modified policy iteration and the periodic baseline.

The decoder alone decides when to request an update. Its knowledge is the
pair ``<delta, s_last>``; between pulls it runs the open-loop action plan
stored in column ``s_last`` of the decoder table, and pulls after
``tau[s_last]`` steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .belief import DecoderPolicy, EncoderPolicy, naive_beliefs
from .mdp import ControlledMarkovProcess, ConvergenceError, HorizonConfig
from .renewal import TIE_TOL, _argmax_first, pull_plan_sets

log = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 2000


@dataclass(frozen=True, eq=False)
class PullSchedule:
    tau: np.ndarray

    def __post_init__(self):
        t = np.array(self.tau, dtype=np.int64)
        if t.ndim != 1 or np.any(t < 1):
            raise ValueError("pull delays must be >= 1")
        t.setflags(write=False)
        object.__setattr__(self, "tau", t)

    def __getitem__(self, s):
        return int(self.tau[s])

    def __len__(self):
        return len(self.tau)

    def __eq__(self, other):
        return isinstance(other, PullSchedule) and np.array_equal(self.tau, other.tau)

    def __hash__(self):
        return hash(self.tau.tobytes())

    def as_encoder(self, t_max: int) -> EncoderPolicy:
        return EncoderPolicy.from_schedule(self.tau, t_max)

    @classmethod
    def constant(cls, period: int, n_states: int) -> "PullSchedule":
        return cls(np.full(n_states, period))


@dataclass(frozen=True, eq=False)
class PullValueTable:
    """``v[delta, s_last]``; row 0 holds the values right after an update."""

    v: np.ndarray

    def at_update(self) -> np.ndarray:
        return self.v[0]

    def weighted(self, xi) -> float:
        return float(np.dot(xi, self.v[0]))


@dataclass
class PullSolution:
    pi_d: DecoderPolicy
    tau: PullSchedule
    values: PullValueTable
    iterations: int = 0
    history: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.pi_d, self.tau, self.values))


def _check_tau(tau: PullSchedule, cfg: HorizonConfig):
    if np.any(tau.tau > cfg.t_max):
        raise ValueError("pull delays must not exceed t_max")


def _stage_rewards(mdp, pi_d: DecoderPolicy, beliefs: np.ndarray) -> np.ndarray:
    """R[delta, j]: expected reward at elapsed time delta under the naive belief."""
    rbar = mdp.expected_reward()
    return np.einsum("dsj,djs->dj", beliefs, rbar[pi_d.table])


def _fill_table(mdp, beta, tau, cfg, beliefs, R, v0) -> np.ndarray:
    t_max, gamma = cfg.t_max, mdp.discount
    n = mdp.n_states
    v = np.zeros((t_max + 1, n))
    v[0] = v0
    pull_value = np.einsum("dsj,s->dj", beliefs, v0 - beta)
    v[t_max] = pull_value[t_max]
    for delta in range(t_max - 1, 0, -1):
        pulls = tau.tau == delta
        v[delta] = np.where(pulls, pull_value[delta], R[delta] + gamma * v[delta + 1])
    return v


def evaluate_pull(
    mdp: ControlledMarkovProcess,
    beta: float,
    pi_d: DecoderPolicy,
    tau: PullSchedule,
    cfg: HorizonConfig,
    method: str = "auto",
) -> PullValueTable:
    """Value of ``(pi_d, tau)`` at every decoder state ``<delta, s_last>``.

    ``v[delta, j]`` is the expected discounted return from elapsed time delta
    given the naive belief there. Entries with ``delta > tau[j]`` are
    never visited; they carry the value of continuing blind until ``t_max``.
    Row ``tau[j]`` (and row ``t_max``) is the pull instant: expected value
    after the update, minus beta.
    """
    _check_tau(tau, cfg)
    t_max, gamma, n = cfg.t_max, mdp.discount, mdp.n_states
    beliefs = naive_beliefs(mdp, pi_d)[: t_max + 1]
    R = _stage_rewards(mdp, pi_d, beliefs)
    if method == "auto":
        method = "direct" if (t_max + 1) * n <= DIRECT_SOLVE_LIMIT else "iterative"
    cols = np.arange(n)
    # v0[j] = sum_{d<m} gamma^d R[d,j] + gamma^m <w_m, v0 - beta>
    disc = gamma ** np.arange(t_max + 1)
    m = tau.tau
    mask = np.arange(t_max + 1)[:, None] < m[None, :]
    gain = (disc[:, None] * R * mask).sum(axis=0)
    W = beliefs[m, :, cols] * (gamma**m)[:, None]  # (j, s)
    rhs = gain - beta * W.sum(axis=1)
    if method == "direct":
        v0 = np.linalg.solve(np.eye(n) - W, rhs)
        return PullValueTable(_fill_table(mdp, beta, tau, cfg, beliefs, R, v0))
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")
    tol = cfg.epsilon * (1 - gamma) / (2 * gamma) if gamma > 0 else cfg.epsilon
    v0 = np.zeros(n)
    resid = np.inf
    for _ in range(cfg.max_iter * 10):
        new = rhs + W @ v0
        resid = np.max(np.abs(new - v0))
        v0 = new
        if resid < tol:
            return PullValueTable(_fill_table(mdp, beta, tau, cfg, beliefs, R, v0))
    raise ConvergenceError(f"pull evaluation did not converge (residual {resid:.3g})")


def improve_control(
    mdp: ControlledMarkovProcess,
    beta: float,
    v: PullValueTable,
    tau: PullSchedule,
    cfg: HorizonConfig,
) -> DecoderPolicy:
    """Belief-aware greedy control for fixed pull delays.

    For each last update ``j`` the whole blind stretch ``delta = 0..tau[j]-1``
    is chosen at once, scoring every action sequence by its expected reward
    plus the discounted post-pull value. Ties go to the lexicographically
    smallest sequence. Unvisited entries are set to action 0.
    """
    _check_tau(tau, cfg)
    sets = pull_plan_sets(mdp, v.at_update(), beta, int(tau.tau.max()))
    table = np.zeros((cfg.t_max + 1, mdp.n_states), dtype=np.int64)
    for j in range(mdp.n_states):
        vecs, plans = sets[tau[j]]
        best = _argmax_first(vecs[:, j], plans)
        table[: tau[j], j] = plans[best]
    return DecoderPolicy(table)


def pull_values_by_delay(mdp, beta, pi_d: DecoderPolicy, v: PullValueTable, cfg: HorizonConfig) -> np.ndarray:
    """score[m-1, j]: value from ``<0, j>`` of pulling after m steps under pi_d."""
    t_max, gamma = cfg.t_max, mdp.discount
    beliefs = naive_beliefs(mdp, pi_d)[: t_max + 1]
    R = _stage_rewards(mdp, pi_d, beliefs)
    v0 = v.at_update()
    disc = gamma ** np.arange(t_max + 1)
    running = np.cumsum(disc[:, None] * R, axis=0)  # running[d] = sum_{k<=d}
    terminal = np.einsum("dsj,s->dj", beliefs, v0 - beta) * disc[:, None]
    m = np.arange(1, t_max + 1)
    return running[m - 1] + terminal[m]


def improve_comm(
    mdp: ControlledMarkovProcess,
    beta: float,
    pi_d: DecoderPolicy,
    v: PullValueTable,
    cfg: HorizonConfig,
) -> PullSchedule:
    """Pick, for every last update, the delay whose blind stretch scores best.

    Equivalent to summing trajectory beliefs over all unpulled state
    sequences; the sum is carried by forward belief propagation.
    """
    score = pull_values_by_delay(mdp, beta, pi_d, v, cfg)
    top = score.max(axis=0)
    # first delay within tolerance of the best
    tau = np.argmax(score >= top - TIE_TOL, axis=0) + 1
    return PullSchedule(tau)


def _policy_iteration(mdp, beta, cfg, allowed, pi_d=None, tau=None) -> PullSolution:
    n, t_max = mdp.n_states, cfg.t_max
    if pi_d is None:
        pi_d = DecoderPolicy(np.zeros((t_max + 1, n), dtype=np.int64))
    if tau is None:
        tau = PullSchedule.constant(max(allowed), n)
    history = []
    for it in range(1, cfg.max_iter + 1):
        v = evaluate_pull(mdp, beta, pi_d, tau, cfg)
        history.append(v.weighted(mdp.initial_dist))
        v0 = v.at_update()
        sets = pull_plan_sets(mdp, v0, beta, max(allowed))
        table = pi_d.table.copy()
        new_tau = tau.tau.copy()
        changed = False
        for j in range(n):
            best_val, best_m, best_plan = -np.inf, None, None
            for m in allowed:
                vecs, plans = sets[m]
                k = _argmax_first(vecs[:, j], plans)
                if vecs[k, j] > best_val + TIE_TOL:
                    best_val, best_m, best_plan = vecs[k, j], m, plans[k]
            if best_val > v0[j] + TIE_TOL * max(1.0, abs(v0[j])):
                table[:, j] = 0
                table[:best_m, j] = best_plan
                new_tau[j] = best_m
                changed = True
        if not changed:
            return PullSolution(pi_d, tau, v, it, history)
        pi_d, tau = DecoderPolicy(table), PullSchedule(new_tau)
    raise ConvergenceError(f"policy iteration exceeded {cfg.max_iter} iterations")


def solve_mpi(
    mdp: ControlledMarkovProcess,
    beta: float,
    cfg: HorizonConfig,
    init: tuple[DecoderPolicy, PullSchedule] | None = None,
) -> PullSolution:
    """Optimal pull-based joint policy by modified policy iteration.

    Each round evaluates the current pair exactly, then improves the pull
    delay and the blind action stretch of every last-update state together.
    An entry changes only on strict improvement, so the loop stops at a
    fixed point.
    """
    pi_d, tau = init if init is not None else (None, None)
    sol = _policy_iteration(mdp, beta, cfg, range(1, cfg.t_max + 1), pi_d, tau)
    log.debug("MPI converged in %d iterations", sol.iterations)
    return sol


@dataclass
class PeriodicSolution:
    period: int
    pi_d: DecoderPolicy
    value: float
    by_period: dict[int, float]

    def __iter__(self):
        return iter((self.period, self.pi_d, self.value))

    @property
    def tau(self) -> PullSchedule:
        return PullSchedule.constant(self.period, self.pi_d.table.shape[1])


def solve_periodic(mdp: ControlledMarkovProcess, beta: float, cfg: HorizonConfig) -> PeriodicSolution:
    """Best fixed update period, each with its optimal blind control."""
    best = None
    by_period = {}
    for period in range(1, cfg.t_max + 1):
        sol = _policy_iteration(
            mdp, beta, cfg, [period], tau=PullSchedule.constant(period, mdp.n_states)
        )
        value = sol.values.weighted(mdp.initial_dist)
        by_period[period] = value
        if best is None or value > best[2] + TIE_TOL:
            best = (period, sol.pi_d, value)
    return PeriodicSolution(best[0], best[1], best[2], by_period)
