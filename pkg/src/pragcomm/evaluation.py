"""Ground truth for joint policies: exact chains, Monte Carlo, brute force.

The exact evaluator builds the Markov chain on ``<s, delta, s_last>`` that a
joint policy induces and solves the discounted linear systems for reward
and channel use separately. It does not go through the renewal algebra the
solvers use, so the two can check each other.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .belief import DecoderPolicy, EncoderPolicy
from .mdp import ControlledMarkovProcess, HorizonConfig
from .pull import PullSchedule
from .push import PolicySet, encoder_best_response, potential
from .renewal import TIE_TOL, _argmax_first, cycle_stats, long_run_rates, masked_plan_sets, renewal_values

log = logging.getLogger(__name__)

CHAIN_CAP = 200_000
BRUTE_STATES = 4
BRUTE_T_MAX = 3
BRUTE_ACTIONS = 3
MC_RUNS = 32


@dataclass(frozen=True)
class JointPolicy:
    encoder: EncoderPolicy
    decoder: DecoderPolicy
    architecture: str = "push"

    def __post_init__(self):
        if self.architecture not in ("pull", "push", "periodic"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.encoder.t_max != self.decoder.t_max:
            raise ValueError("encoder and decoder disagree on t_max")
        if self.encoder.table.shape[0] != self.decoder.table.shape[1]:
            raise ValueError("encoder and decoder disagree on the state count")

    @property
    def t_max(self) -> int:
        return self.decoder.t_max

    @classmethod
    def pull(cls, pi_d: DecoderPolicy, tau: PullSchedule, architecture: str = "pull") -> "JointPolicy":
        return cls(tau.as_encoder(pi_d.t_max), pi_d, architecture)

    @classmethod
    def push(cls, policy: PolicySet) -> "JointPolicy":
        return cls(policy.pi_e, policy.pi_d, "push")


@dataclass
class EvalResult:
    reward: float  # xi-weighted discounted reward minus beta times channel use
    reward_raw: float  # without the channel term
    channel_use: float  # discounted transmission count
    channel_rate: float  # long-run transmissions per step
    paoi: np.ndarray  # paoi[s_last, peak], rows sum to 1
    method: str = "exact"
    stderr: float | None = None
    discount: float = 0.0

    @property
    def estimation_rate(self) -> float:
        """Discount-weighted fraction of correct guesses (for 0/1 estimation rewards)."""
        return self.reward_raw * (1 - self.discount)


def _chain(mdp: ControlledMarkovProcess, jp: JointPolicy):
    """Sparse transition matrix, reward, and per-step discounted transmission vectors."""
    n, t_max = mdp.n_states, jp.t_max
    P = mdp.transitions
    rbar = mdp.expected_reward()
    enc, dec = jp.encoder.table, jp.decoder.table

    def idx(s, delta, j):
        return (delta * n + j) * n + s

    size = n * t_max * n
    rows, cols, vals, tx_vals = [], [], [], []
    r = np.zeros(size)
    s = np.arange(n)
    for delta in range(t_max):
        for j in range(n):
            a = dec[delta, j]
            r[idx(s, delta, j)] = rbar[a]
            c = enc[:, delta + 1, j] if delta + 1 < t_max else np.ones(n, dtype=np.int8)
            for sn in range(n):
                p = P[a][:, sn]
                live = p > 0
                src = idx(s[live], delta, j)
                dst = idx(sn, 0, sn) if c[sn] else idx(sn, delta + 1, j)
                rows.append(src)
                cols.append(np.full(live.sum(), dst))
                vals.append(p[live])
                tx_vals.append(p[live] * c[sn])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    M = sparse.csr_matrix((np.concatenate(vals), (rows, cols)), shape=(size, size))
    tx = np.bincount(rows, weights=np.concatenate(tx_vals), minlength=size)
    starts = idx(s, 0, s)
    return M, r, tx, starts


def chain_size(mdp: ControlledMarkovProcess, t_max: int) -> int:
    return mdp.n_states * t_max * mdp.n_states


def paoi_profile(mdp: ControlledMarkovProcess, beta: float, jp: JointPolicy, cfg: HorizonConfig | None = None) -> np.ndarray:
    """hist[s_last, peak]: distribution of the age reached at the next transmission.

    The peak is ``delta + 1`` where delta is the age when the decoder last
    acted, i.e. the age the update resets. Rows sum to 1; column 0 is empty.
    """
    stats = cycle_stats(mdp, jp.encoder.table, jp.decoder.table)
    hist = stats.paoi
    return hist / hist.sum(axis=1, keepdims=True)


def evaluate_exact(
    mdp: ControlledMarkovProcess,
    beta: float,
    jp: JointPolicy,
    cfg: HorizonConfig | None = None,
    cap: int = CHAIN_CAP,
) -> EvalResult:
    """Discounted reward and channel use from the induced chain, xi-weighted.

    The decoder starts at ``<0, s0>`` (the initial state is known). Falls
    back to Monte Carlo when the chain has more than ``cap`` states.
    """
    if cfg is not None and cfg.t_max != jp.t_max:
        raise ValueError("policy horizon does not match config")
    if chain_size(mdp, jp.t_max) > cap:
        log.warning("chain too large for exact evaluation, simulating")
        return simulate(mdp, beta, jp, horizon=int(np.ceil(40 / (1 - mdp.discount))), seed=0)
    gamma = mdp.discount
    M, r, tx, starts = _chain(mdp, jp)
    A = (sparse.identity(M.shape[0], format="csc") - gamma * M).tocsc()
    reward = spsolve(A, r)
    comm = spsolve(A, gamma * tx)
    xi = mdp.initial_dist
    R, C = float(xi @ reward[starts]), float(xi @ comm[starts])
    stats = cycle_stats(mdp, jp.encoder.table, jp.decoder.table)
    _, rate = long_run_rates(stats, xi)
    return EvalResult(R - beta * C, R, C, rate, paoi_profile(mdp, beta, jp), "exact", None, gamma)


def simulate(
    mdp: ControlledMarkovProcess,
    beta: float,
    jp: JointPolicy,
    horizon: int,
    seed: int,
    runs: int = MC_RUNS,
) -> EvalResult:
    """Seeded rollouts of the joint policy; stderr is over the ``runs`` trajectories."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    n, t_max, gamma = mdp.n_states, jp.t_max, mdp.discount
    cum = np.cumsum(mdp.transitions, axis=2)
    cum[:, :, -1] = 1.0
    enc, dec = jp.encoder.table, jp.decoder.table
    s = rng.choice(n, size=runs, p=mdp.initial_dist)
    j = s.copy()
    delta = np.zeros(runs, dtype=np.int64)
    reward = np.zeros(runs)
    comm = np.zeros(runs)
    sends = np.zeros(runs)
    peaks = np.zeros((n, t_max + 1))
    disc = 1.0
    for _ in range(horizon):
        a = dec[delta, j]
        u = rng.random(runs)
        sn = (cum[a, s] < u[:, None]).sum(axis=1)
        reward += disc * mdp.reward[s, a, sn]
        age = delta + 1
        c = np.where(age >= t_max, 1, enc[sn, np.minimum(age, t_max), j]).astype(bool)
        disc *= gamma
        comm += disc * c
        sends += c
        np.add.at(peaks, (j[c], age[c]), 1)
        j = np.where(c, sn, j)
        delta = np.where(c, 0, age)
        s = sn
    value = reward - beta * comm
    totals = peaks.sum(axis=1, keepdims=True)
    hist = np.divide(peaks, totals, out=np.zeros_like(peaks), where=totals > 0)
    stderr = float(value.std(ddof=1) / np.sqrt(runs)) if runs > 1 else 0.0
    res = EvalResult(
        float(value.mean()),
        float(reward.mean()),
        float(comm.mean()),
        float(sends.mean() / horizon),
        hist,
        "monte_carlo",
        stderr,
        gamma,
    )
    return res


# -- oracles -----------------------------------------------------------------

def fully_observed_values(mdp: ControlledMarkovProcess) -> tuple[np.ndarray, np.ndarray]:
    """Howard policy iteration on the plain MDP: (values, policy)."""
    rbar = mdp.expected_reward()
    gamma, n = mdp.discount, mdp.n_states
    policy = np.zeros(n, dtype=np.int64)
    s = np.arange(n)
    while True:
        P = mdp.transitions[policy, s]
        v = np.linalg.solve(np.eye(n) - gamma * P, rbar[policy, s])
        q = rbar + gamma * mdp.transitions @ v
        best = q.max(axis=0)
        improve = best > q[policy, s] + TIE_TOL * np.maximum(1, np.abs(best))
        if not improve.any():
            return v, policy
        policy = np.where(improve, q.argmax(axis=0), policy)


@dataclass
class _Columns:
    """Cycle statistics of every candidate (encoder column, decoder column) pair."""

    enc: np.ndarray  # (K, S, T+1) transmit tables for one s_last
    dec: np.ndarray  # (K, T+1)
    reward: np.ndarray  # (S_last, K)
    comm: np.ndarray
    kernel: np.ndarray  # (S_last, K, S)


def _column_candidates(mdp, t_max: int, pull_only: bool):
    n, k = mdp.n_states, mdp.n_actions
    out = []
    if pull_only:
        for tau in range(1, t_max + 1):
            e = np.zeros((n, t_max + 1), dtype=np.int8)
            e[:, tau:] = 1
            for plan in product(range(k), repeat=tau):
                d = np.zeros(t_max + 1, dtype=np.int64)
                d[:tau] = plan
                out.append((e, d))
        return out
    for bits in product((0, 1), repeat=n * (t_max - 1)):
        e = np.zeros((n, t_max + 1), dtype=np.int8)
        e[:, 1:t_max] = np.array(bits, dtype=np.int8).reshape(n, t_max - 1)
        e[:, t_max] = 1
        for plan in product(range(k), repeat=t_max):
            d = np.zeros(t_max + 1, dtype=np.int64)
            d[:t_max] = plan
            out.append((e, d))
    return out


def _column_stats(mdp, t_max: int, cands) -> _Columns:
    n = mdp.n_states
    gamma = mdp.discount
    rbar = mdp.expected_reward()
    E = np.stack([e for e, _ in cands])
    D = np.stack([d for _, d in cands])
    K = len(cands)
    reward = np.zeros((n, K))
    comm = np.zeros((n, K))
    kernel = np.zeros((n, K, n))
    for j in range(n):
        q = np.zeros((K, n))
        q[:, j] = 1.0
        for delta in range(t_max):
            a = D[:, delta]
            reward[j] += gamma**delta * np.einsum("ks,ks->k", q, rbar[a])
            q = np.einsum("ks,kst->kt", q, mdp.transitions[a])
            c = E[:, :, delta + 1]
            tx = q * c
            kernel[j] += gamma ** (delta + 1) * tx
            comm[j] += gamma ** (delta + 1) * tx.sum(axis=1)
            q = q * (1 - c)
    return _Columns(E, D, reward, comm, kernel)


def _best_columns(cols: _Columns, beta: float, gamma: float, max_iter: int = 1000):
    """Policy iteration over per-s_last column choices (a semi-MDP on updates)."""
    n = cols.reward.shape[0]
    score = cols.reward - beta * cols.comm
    choice = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for _ in range(max_iter):
        Kc = cols.kernel[rows, choice]
        v = np.linalg.solve(np.eye(n) - Kc, score[rows, choice])
        q = score + cols.kernel @ v
        best = q.max(axis=1)
        cur = q[rows, choice]
        improve = best > cur + TIE_TOL * np.maximum(1, np.abs(best))
        if not improve.any():
            return choice, v
        choice = np.where(improve, q.argmax(axis=1), choice)
    raise RuntimeError("column policy iteration did not converge")


def brute_force_joint(
    mdp: ControlledMarkovProcess,
    beta: float,
    cfg: HorizonConfig,
    pull_only: bool = False,
) -> tuple[JointPolicy, float]:
    """Best deterministic joint table by exhaustive enumeration.

    Every transmission restarts the process at ``<0, s>``, so a joint table
    is a choice of one (encoder column, decoder column) pair per ``s_last``.
    All pairs are enumerated and scored exactly; the best combination is
    found by policy iteration over those choices, which is exact for a
    finite semi-MDP. ``pull_only`` keeps encoders that fire at a fixed delay.
    """
    n, t_max = mdp.n_states, cfg.t_max
    if n > BRUTE_STATES or t_max > BRUTE_T_MAX or mdp.n_actions > BRUTE_ACTIONS:
        raise ValueError(
            f"brute force is limited to |S| <= {BRUTE_STATES}, T_max <= {BRUTE_T_MAX}, |A| <= {BRUTE_ACTIONS}"
        )
    cols = _column_stats(mdp, t_max, _column_candidates(mdp, t_max, pull_only))
    choice, v = _best_columns(cols, beta, mdp.discount)
    enc = np.stack([cols.enc[choice[j]] for j in range(n)], axis=2)
    dec = np.stack([cols.dec[choice[j]] for j in range(n)], axis=1)
    jp = JointPolicy(EncoderPolicy(enc), DecoderPolicy(dec), "pull" if pull_only else "push")
    return jp, float(mdp.initial_dist @ v)


# -- equilibrium checks ------------------------------------------------------

def exact_decoder_response(mdp, beta: float, enc: EncoderPolicy, cfg: HorizonConfig) -> DecoderPolicy:
    """Globally optimal decoder against a fixed encoder.

    Policy iteration over whole open-loop plans per ``s_last``: each column
    is replaced by its best plan when that is strictly better.
    """
    n, t_max = mdp.n_states, cfg.t_max
    table = np.zeros((t_max + 1, n), dtype=np.int64)
    for _ in range(cfg.max_iter):
        v0 = renewal_values(cycle_stats(mdp, enc.table, table), beta)
        changed = False
        for j in range(n):
            masks = enc.table[:, :, j].T.astype(float)
            masks[t_max] = 1.0
            vecs, plans = masked_plan_sets(mdp, v0, beta, masks)[0]
            k = _argmax_first(vecs[:, j], plans)
            if vecs[k, j] > v0[j] + TIE_TOL * max(1.0, abs(v0[j])):
                table[:t_max, j] = plans[k]
                changed = True
        if not changed:
            return DecoderPolicy(table)
    raise RuntimeError("decoder plan iteration did not converge")


def unilateral_deviation_gap(mdp, beta: float, pi_d: DecoderPolicy, pi_e: EncoderPolicy, cfg: HorizonConfig) -> float:
    """Largest xi-weighted gain from replacing one agent's policy by its exact best response."""
    base = potential(mdp, beta, pi_d, pi_e)
    gain_d = potential(mdp, beta, exact_decoder_response(mdp, beta, pi_e, cfg), pi_e) - base
    gain_e = potential(mdp, beta, pi_d, encoder_best_response(mdp, beta, pi_d, cfg)) - base
    return max(0.0, gain_d, gain_e)


def is_nash(mdp, beta, pi_d, pi_e, cfg, tol: float = 1e-9) -> bool:
    return unilateral_deviation_gap(mdp, beta, pi_d, pi_e, cfg) <= tol


# -- remote estimation -------------------------------------------------------

def _likeliest(row: np.ndarray) -> int:
    return int(np.argmax(row >= row.max() - TIE_TOL))


def perfect_estimation_decoder(mdp: ControlledMarkovProcess, t_max: int) -> DecoderPolicy:
    """Guess the one-hot-propagated likeliest state: ``j, m(j), m(m(j)), ...``."""
    P = mdp.transitions[0]
    n = mdp.n_states
    table = np.zeros((t_max + 1, n), dtype=np.int64)
    for j in range(n):
        b = j
        for delta in range(t_max + 1):
            table[delta, j] = b
            b = _likeliest(P[b])
    return DecoderPolicy(table)


def perfect_estimation_policy(mdp: ControlledMarkovProcess, t_max: int = 5) -> EncoderPolicy:
    """Transmit exactly when the new state is not the decoder's likeliest guess.

    Silence then always means "the likeliest state happened", so the
    decoder's belief stays one-hot. Ties go to the lowest state index on
    both sides.
    """
    if not mdp.is_estimation:
        raise ValueError("perfect estimation needs an estimation MDP")
    n = mdp.n_states
    guess = perfect_estimation_decoder(mdp, t_max).table
    table = np.ones((n, t_max + 1, n), dtype=np.int8)
    for j in range(n):
        for delta in range(1, t_max):
            table[guess[delta, j], delta, j] = 0
    return EncoderPolicy(table)


def exempt_state_pair(mdp: ControlledMarkovProcess, s: int, t_max: int) -> tuple[DecoderPolicy, EncoderPolicy]:
    """Encoder that transmits unless the new state is ``s``; decoder that guesses s on silence."""
    n = mdp.n_states
    enc = np.ones((n, t_max + 1, n), dtype=np.int8)
    enc[s, 1:t_max, :] = 0
    dec = np.full((t_max + 1, n), s, dtype=np.int64)
    dec[0] = np.arange(n)
    return DecoderPolicy(dec), EncoderPolicy(enc)


def min_channel_perfect_tables(mdp: ControlledMarkovProcess, t_max: int) -> float:
    """Least xi-weighted discounted channel use over encoders that allow perfect estimation.

    An encoder column allows it when every silent branch leaves a one-hot
    belief; the decoder then guesses that state. Found by enumerating all
    encoder columns and minimizing over per-s_last choices.
    """
    n = mdp.n_states
    P = mdp.transitions[0]
    cands = []
    for bits in product((0, 1), repeat=n * (t_max - 1)):
        e = np.zeros((n, t_max + 1), dtype=np.int8)
        e[:, 1:t_max] = np.array(bits, dtype=np.int8).reshape(n, t_max - 1)
        e[:, t_max] = 1
        cands.append(e)
    per_column = []
    for j in range(n):
        ok = []
        for e in cands:
            w = np.eye(n)[j]
            d = np.zeros(t_max + 1, dtype=np.int64)
            d[0] = j
            good = True
            for delta in range(1, t_max):
                kept = (1 - e[:, delta]) * (P.T @ w)
                if kept.sum() <= 1e-15:
                    break
                if np.count_nonzero(kept > 1e-15) > 1:
                    good = False
                    break
                w = kept / kept.sum()
                d[delta] = int(np.argmax(w))
            if good:
                ok.append((e, d))
        per_column.append(ok)
    # channel use only: score zero reward, so maximizing -comm minimizes it
    all_cands = [c for col in per_column for c in col]
    cols = _column_stats(mdp, t_max, all_cands)
    allowed = np.zeros((n, len(all_cands)), dtype=bool)
    offset = 0
    for j, col in enumerate(per_column):
        allowed[j, offset : offset + len(col)] = True
        offset += len(col)
    masked = _Columns(cols.enc, cols.dec, np.where(allowed, 0.0, -1e9), cols.comm, cols.kernel)
    _, v = _best_columns(masked, 1.0, mdp.discount)
    return -float(mdp.initial_dist @ v)


def exemption_channel_use(mdp: ControlledMarkovProcess, exempt) -> np.ndarray:
    """Discounted channel use from each known state, without a forced update.

    ``exempt[s]`` is the one next state in which the encoder stays silent
    after s (-1 for none). Silence then identifies the state, so estimation
    is perfect and the chain evolves independently of the encoder.
    """
    P = mdp.transitions[0]
    n, gamma = mdp.n_states, mdp.discount
    exempt = np.asarray(exempt)
    sent = np.ones((n, n))
    has = exempt >= 0
    sent[np.flatnonzero(has), exempt[has]] = 0.0
    step = gamma * (P * sent).sum(axis=1)
    return np.linalg.solve(np.eye(n) - gamma * P, step)


def min_channel_exemption(mdp: ControlledMarkovProcess) -> tuple[np.ndarray, float]:
    """Best exemption map over all (|S|+1)^|S| choices, xi-weighted, no forced update."""
    n = mdp.n_states
    best = None
    for choice in product(range(-1, n), repeat=n):
        use = float(mdp.initial_dist @ exemption_channel_use(mdp, choice))
        if best is None or use < best[1] - TIE_TOL:
            best = (np.array(choice), use)
    return best


def two_state_grid_values(mdp: ControlledMarkovProcess, beta: float, points: int = 2001, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Joint-policy optimum of a 2-state push problem with no forced update.

    Value iteration on a uniform grid over p = Pr(state 1), linear
    interpolation in between. Returns (grid, values). Serves as an oracle
    for the unbounded centralized POMDP.
    """
    if mdp.n_states != 2:
        raise ValueError("grid oracle needs exactly 2 states")
    gamma = mdp.discount
    grid = np.linspace(0.0, 1.0, points)
    W = np.stack([1 - grid, grid], axis=1)  # (G, 2)
    rbar = mdp.expected_reward()  # (A, 2)
    comm = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=float)
    v = np.zeros(points)
    while True:
        corner = v[[0, -1]]
        best = np.full(points, -np.inf)
        for a in range(mdp.n_actions):
            m = W @ mdp.transitions[a]  # (G, 2) predicted mass
            base = W @ rbar[a]
            for c in comm:
                sent = m @ (c * (corner - beta))
                u = m * (1 - c)
                mass = u.sum(axis=1)
                p = np.divide(u[:, 1], mass, out=np.zeros(points), where=mass > 0)
                silent = mass * np.interp(p, grid, v)
                best = np.maximum(best, base + gamma * (sent + silent))
        if np.max(np.abs(best - v)) < tol * (1 - gamma):
            return grid, best
        v = best
