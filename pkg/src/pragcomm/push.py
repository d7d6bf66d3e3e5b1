"""Push-based remote control by alternating best responses.

The encoder sees the state and decides when to transmit; the decoder sees
only ``<delta, s_last>`` but knows the encoder's table, so silence itself is
informative. Both agents share one reward, which makes the alternation an
iterated best response in an exact potential game.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .belief import DecoderPolicy, EncoderPolicy
from .mdp import ControlledMarkovProcess, ConvergenceError, HorizonConfig
from .renewal import (
    TIE_TOL,
    best_masked_plan,
    cycle_stats,
    reached_entries,
    renewal_values,
)

log = logging.getLogger(__name__)

DEFAULT_ROUNDS = 200


@dataclass
class PolicySet:
    pi_d: DecoderPolicy
    pi_e: EncoderPolicy

    def __iter__(self):
        return iter((self.pi_d, self.pi_e))


@dataclass
class EquilibriumReport:
    rounds: int
    converged: bool
    final_gap: float
    history: list[float] = field(default_factory=list)


def standard_inits(mdp: ControlledMarkovProcess, cfg: HorizonConfig) -> tuple[EncoderPolicy, EncoderPolicy]:
    """The never-transmit and always-transmit encoders."""
    n = mdp.n_states
    return EncoderPolicy.never(n, cfg.t_max), EncoderPolicy.always(n, cfg.t_max)


def joint_value(mdp, beta, pi_d: DecoderPolicy, pi_e: EncoderPolicy) -> np.ndarray:
    """Values at ``<0, s>`` for every s (reward minus beta times channel use)."""
    return renewal_values(cycle_stats(mdp, pi_e.table, pi_d.table), beta)


def potential(mdp, beta, pi_d, pi_e) -> float:
    return float(mdp.initial_dist @ joint_value(mdp, beta, pi_d, pi_e))


def _masks(enc: EncoderPolicy, s_last: int) -> np.ndarray:
    m = enc.table[:, :, s_last].T.astype(float)
    m[-1] = 1.0
    return m


def implicit_beliefs(mdp, enc: EncoderPolicy, pi_d: DecoderPolicy) -> np.ndarray:
    """Posterior beliefs ``out[delta, :, s_last]``; all-zero where silence is impossible."""
    n, t_max = mdp.n_states, enc.t_max
    out = np.zeros((t_max + 1, n, n))
    for j in range(n):
        w = np.eye(n)[j]
        out[0, :, j] = w
        for delta in range(1, t_max + 1):
            w = (1 - enc.mask(delta, j)) * (mdp.transitions[pi_d.act(delta - 1, j)].T @ w)
            total = w.sum()
            if total <= 1e-15:
                break
            w = w / total
            out[delta, :, j] = w
    return out


def _estimation_response(mdp, enc_table: np.ndarray) -> np.ndarray:
    # actions do not move the chain, so guess the mode of the implicit belief
    n, t_max = mdp.n_states, enc_table.shape[1] - 1
    P = mdp.transitions[0]
    table = np.zeros((t_max + 1, n), dtype=np.int64)
    for j in range(n):
        w = np.eye(n)[j]
        table[0, j] = j
        for delta in range(1, t_max):
            pred = P.T @ w
            kept = (1 - enc_table[:, delta, j]) * pred
            w = kept / kept.sum() if kept.sum() > 1e-15 else pred
            table[delta, j] = int(np.argmax(w >= w.max() - TIE_TOL))
    return table


def _arrival_values(mdp, beta, dec_table, enc_table, v0) -> np.ndarray:
    """arr[delta, s, j]: value on arriving at s at elapsed time delta, before the encoder decides."""
    n, t_max = mdp.n_states, dec_table.shape[0] - 1
    gamma, rbar = mdp.discount, mdp.expected_reward()
    term = v0 - beta
    arr = np.empty((t_max + 1, n, n))
    arr[t_max] = term[:, None]
    for delta in range(t_max - 1, -1, -1):
        a = dec_table[delta]
        acting = rbar[a].T + gamma * np.einsum("jst,tj->sj", mdp.transitions[a], arr[delta + 1])
        c = enc_table[:, delta, :] if delta > 0 else 0.0
        arr[delta] = c * term[:, None] + (1 - c) * acting
    return arr


def _lookahead(mdp, w, arrival_next) -> np.ndarray:
    # q[a] = sum_s w(s) [r(s, a) + gamma sum_s' P(s'|s, a) arrival(s')]
    rbar = mdp.expected_reward()
    return rbar @ w + mdp.discount * np.einsum("s,ast,t->a", w, mdp.transitions, arrival_next)


def _sweep(mdp, enc: EncoderPolicy, table, arr, j, fill: bool) -> bool:
    """One forward pass over column j; returns whether an entry changed.

    Without ``fill`` only entries that silence can reach are improved; with
    it, only the unreachable ones, each for the predicted belief that
    ignores the impossible silence.
    """
    t_max = table.shape[0] - 1
    w = np.eye(mdp.n_states)[j]
    reached = True
    changed = False
    for delta in range(t_max):
        if delta > 0:
            pred = mdp.transitions[table[delta - 1, j]].T @ w
            kept = (1 - enc.mask(delta, j)) * pred
            if reached and kept.sum() > 1e-15:
                w = kept / kept.sum()
            else:
                w = pred / pred.sum()
                reached = False
        if reached == fill:
            continue
        q = _lookahead(mdp, w, arr[delta + 1, :, j])
        cur = table[delta, j]
        best = _first_max(q)
        if q[best] > q[cur] + TIE_TOL * max(1.0, abs(q[cur])):
            table[delta, j] = best
            changed = True
    return changed


def _first_max(q: np.ndarray) -> int:
    return int(np.argmax(q >= q.max() - TIE_TOL * max(1.0, abs(q.max()))))


def _decoder_pi(mdp, beta, enc: EncoderPolicy, cfg, start: DecoderPolicy | None) -> np.ndarray:
    n, t_max = mdp.n_states, cfg.t_max
    if start is None:
        table = np.zeros((t_max + 1, n), dtype=np.int64)
    else:
        table = start.table.copy()
    for _ in range(cfg.max_iter):
        v0 = renewal_values(cycle_stats(mdp, enc.table, table), beta)
        arr = _arrival_values(mdp, beta, table, enc.table, v0)
        changed = False
        for j in range(n):
            changed |= _sweep(mdp, enc, table, arr, j, fill=False)
        if not changed:
            break
    else:
        raise ConvergenceError("decoder policy iteration did not converge")
    columns, _, _ = reached_entries(mdp, enc.table, table)
    if start is not None:
        # columns the joint policy never enters keep their old entries
        table[:, ~columns] = start.table[:, ~columns]
        v0 = renewal_values(cycle_stats(mdp, enc.table, table), beta)
        arr = _arrival_values(mdp, beta, table, enc.table, v0)
    # a single pass: these entries carry no mass, so there is nothing to converge
    for j in np.flatnonzero(columns):
        _sweep(mdp, enc, table, arr, j, fill=True)
    return table


def decoder_best_response(
    mdp: ControlledMarkovProcess,
    beta: float,
    enc: EncoderPolicy,
    cfg: HorizonConfig,
    current: DecoderPolicy | None = None,
    fast_estimation: bool = True,
) -> DecoderPolicy:
    """Decoder policy iteration against a fixed encoder.

    Evaluates the pair exactly, then sweeps each column ``s_last`` from
    ``delta = 0`` upward, choosing the action with the best belief-weighted
    one-step lookahead; the implicit-information belief of each entry is
    propagated through the actions already improved. Starts from ``current``
    (all action 0 if None) and changes an entry only on strict gain, so the
    value never decreases.

    Entries that silence never reaches do not affect the value. They are
    filled afterwards as if the decoder ignored the contradicting silence
    and kept its predicted belief, which lets a later encoder exploit them.
    """
    if enc.t_max != cfg.t_max:
        raise ValueError("encoder horizon does not match config")
    if fast_estimation and mdp.is_estimation:
        return DecoderPolicy(_estimation_response(mdp, enc.table))
    return DecoderPolicy(_decoder_pi(mdp, beta, enc, cfg, current))


def encoder_continuation(mdp, beta, dec: DecoderPolicy, enc_table: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """cont[delta, s, j]: value of staying silent on arrival at s at elapsed time delta."""
    n, t_max = mdp.n_states, dec.t_max
    gamma = mdp.discount
    rbar = mdp.expected_reward()
    term = v0 - beta
    cont = np.zeros((t_max + 1, n, n))
    arrival = np.repeat(term[:, None], n, axis=1)  # arrival[s, j] at t_max
    for delta in range(t_max - 1, 0, -1):
        a = dec.table[delta]
        acting = rbar[a].T + gamma * np.einsum("jst,tj->sj", mdp.transitions[a], arrival)
        cont[delta] = acting
        c = enc_table[:, delta, :]
        arrival = c * term[:, None] + (1 - c) * acting
    return cont


def encoder_best_response(
    mdp: ControlledMarkovProcess,
    beta: float,
    dec: DecoderPolicy,
    cfg: HorizonConfig,
    current: EncoderPolicy | None = None,
) -> EncoderPolicy:
    """Optimal transmit table against a fixed decoder (fully observed MDP).

    Exact ties go to silence when beta > 0 and to transmission when beta = 0.
    """
    n, t_max = mdp.n_states, cfg.t_max
    if current is None:
        table = EncoderPolicy.always(n, t_max).table.copy()
    else:
        table = current.table.copy()
    table[:, 0, :] = 0
    table[:, t_max, :] = 1
    for _ in range(cfg.max_iter):
        v0 = renewal_values(cycle_stats(mdp, table, dec.table), beta)
        cont = encoder_continuation(mdp, beta, dec, table, v0)
        tx = (v0 - beta)[:, None]
        new = table.copy()
        for delta in range(1, t_max):
            scale = TIE_TOL * np.maximum(1.0, np.abs(cont[delta]))
            better_tx = tx > cont[delta] + scale
            better_silent = cont[delta] > tx + scale
            new[:, delta, :] = np.where(better_tx, 1, np.where(better_silent, 0, table[:, delta, :]))
        if np.array_equal(new, table):
            break
        table = new
    else:
        raise ConvergenceError("encoder policy iteration did not converge")
    # canonical tie rule, greedy against the optimal values
    prefer = 1 if beta == 0 else 0
    for delta in range(1, t_max):
        scale = TIE_TOL * np.maximum(1.0, np.abs(cont[delta])) * 1e3
        tie = np.abs(tx - cont[delta]) <= scale
        table[:, delta, :] = np.where(tie, prefer, table[:, delta, :])
    if current is not None and beta > 0:
        # entries the joint policy never visits keep their old decision;
        # a free channel has no reason to stay silent anywhere
        _, _, seen = reached_entries(mdp, table, dec.table)
        table = np.where(seen, table, current.table)
    return EncoderPolicy(table)


def solve_api(
    mdp: ControlledMarkovProcess,
    beta: float,
    init: EncoderPolicy,
    cfg: HorizonConfig,
    max_rounds: int = DEFAULT_ROUNDS,
) -> tuple[PolicySet, EquilibriumReport]:
    """Alternate decoder and encoder best responses until neither changes."""
    pi_e = init
    pi_d = DecoderPolicy.constant(0, mdp.n_states, cfg.t_max)
    history = []
    seen = set()
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        new_d = decoder_best_response(mdp, beta, pi_e, cfg, current=pi_d)
        new_e = encoder_best_response(mdp, beta, new_d, cfg, current=pi_e)
        history.append(potential(mdp, beta, new_d, new_e))
        key = (new_d.fingerprint, new_e.fingerprint)
        if (new_d == pi_d and new_e == pi_e) or key in seen:
            pi_d, pi_e = new_d, new_e
            converged = True
            break
        seen.add(key)
        pi_d, pi_e = new_d, new_e
    gap = equilibrium_gap(mdp, beta, pi_d, pi_e, cfg)
    if not converged:
        log.warning("API hit the round cap (%d) with gap %.3g", max_rounds, gap)
    converged = converged and gap <= cfg.epsilon
    return PolicySet(pi_d, pi_e), EquilibriumReport(rounds, converged, gap, history)


def equilibrium_gap(mdp, beta, pi_d, pi_e, cfg) -> float:
    """Largest gain either agent can obtain by deviating alone."""
    base = potential(mdp, beta, pi_d, pi_e)
    br_d = decoder_best_response(mdp, beta, pi_e, cfg, current=pi_d)
    br_e = encoder_best_response(mdp, beta, pi_d, cfg, current=pi_e)
    gain_d = potential(mdp, beta, br_d, pi_e) - base
    gain_e = potential(mdp, beta, pi_d, br_e) - base
    return max(0.0, gain_d, gain_e)
