"""Renewal-cycle machinery shared by the solvers and the evaluator.

Every transmission resets the decoder to ``<0, s>``, so a joint policy is a
semi-Markov process over the last transmitted state. A cycle starts right
after a transmission of ``s_last`` and ends at the next transmission.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import ControlledMarkovProcess

TIE_TOL = 1e-12


@dataclass
class CycleStats:
    reward: np.ndarray  # discounted reward collected inside the cycle, per s_last
    comm: np.ndarray  # discounted transmission count (the closing transmission)
    kernel: np.ndarray  # kernel[j, s'] = sum_delta gamma^delta Pr(next update is s' at delta)
    reward_undisc: np.ndarray
    length: np.ndarray  # expected cycle length
    jump: np.ndarray  # jump[j, s'] = Pr(next update is s')
    paoi: np.ndarray  # paoi[j, delta] = Pr(cycle ends at elapsed time delta)


def cycle_stats(mdp: ControlledMarkovProcess, enc_table: np.ndarray, dec_table: np.ndarray) -> CycleStats:
    n = mdp.n_states
    t_max = dec_table.shape[0] - 1
    gamma = mdp.discount
    P = mdp.transitions
    rbar = mdp.expected_reward()  # (A, S)
    cols = np.arange(n)
    q = np.eye(n)  # q[s, j]: unnormalized mass at state s for s_last j
    reward = np.zeros(n)
    reward_u = np.zeros(n)
    kernel = np.zeros((n, n))
    jump = np.zeros((n, n))
    paoi = np.zeros((n, t_max + 1))
    length = np.zeros(n)
    for delta in range(t_max):
        a = dec_table[delta]
        step_r = np.einsum("sj,js->j", q, rbar[a])
        reward += gamma**delta * step_r
        reward_u += step_r
        length += q.sum(axis=0)
        q = np.einsum("jst,sj->tj", P[a], q)
        c = enc_table[:, delta + 1, :] if delta + 1 < t_max else np.ones((n, n))
        tx = q * c
        kernel += gamma ** (delta + 1) * tx.T
        jump += tx.T
        paoi[cols, delta + 1] = tx.sum(axis=0)
        q = q * (1 - c)
    comm = np.einsum("jd,d->j", paoi, gamma ** np.arange(t_max + 1))
    return CycleStats(reward, comm, kernel, reward_u, length, jump, paoi)


def renewal_values(stats: CycleStats, beta: float) -> np.ndarray:
    """Value at ``<0, s>`` for every s: solves V = R - beta*C + K V."""
    n = len(stats.reward)
    return np.linalg.solve(np.eye(n) - stats.kernel, stats.reward - beta * stats.comm)


def renewal_parts(stats: CycleStats) -> tuple[np.ndarray, np.ndarray]:
    """Reward and channel-use values at ``<0, s>``, separately."""
    n = len(stats.reward)
    A = np.eye(n) - stats.kernel
    return np.linalg.solve(A, stats.reward), np.linalg.solve(A, stats.comm)


def stationary_updates(stats: CycleStats, xi: np.ndarray, iters: int = 4000) -> np.ndarray:
    """Long-run frequency of each last-update state (Cesaro average from xi)."""
    pi = np.asarray(xi, dtype=float).copy()
    acc = np.zeros_like(pi)
    for _ in range(iters):
        acc += pi
        pi = pi @ stats.jump
    return acc / iters


def long_run_rates(stats: CycleStats, xi: np.ndarray) -> tuple[float, float]:
    """(average reward per step, average transmissions per step)."""
    pi = stationary_updates(stats, xi)
    mean_len = float(pi @ stats.length)
    return float(pi @ stats.reward_undisc) / mean_len, 1.0 / mean_len


# -- plan search -------------------------------------------------------------

def prune(vectors: np.ndarray, plans: list[tuple]) -> tuple[np.ndarray, list[tuple]]:
    """Drop pointwise-dominated vectors; on exact ties keep the smaller plan."""
    if len(plans) <= 1:
        return vectors, plans
    order = sorted(range(len(plans)), key=lambda i: plans[i])
    vectors = vectors[order]
    plans = [plans[i] for i in order]
    keep = np.ones(len(plans), dtype=bool)
    for i in range(len(plans)):
        if not keep[i]:
            continue
        others = keep.copy()
        others[i] = False
        # earlier-or-equal vector dominating i
        dom = np.all(vectors[others] >= vectors[i] - TIE_TOL, axis=1)
        idx = np.flatnonzero(others)[dom]
        for k in idx:
            strictly = np.any(vectors[k] > vectors[i] + TIE_TOL)
            if strictly or k < i:
                keep[i] = False
                break
    return vectors[keep], [p for p, k in zip(plans, keep) if k]


def _expand(mdp, arrival: np.ndarray, plans: list[tuple]):
    """One step back: acting vectors r^a + gamma P^a h for each action and h."""
    rbar = mdp.expected_reward()
    gamma = mdp.discount
    vecs = rbar[:, None, :] + gamma * np.einsum("ast,ht->ahs", mdp.transitions, arrival)
    k = mdp.n_actions
    out_plans = [(a,) + p for a in range(k) for p in plans]
    return vecs.reshape(k * len(plans), -1), out_plans


def masked_plan_sets(mdp: ControlledMarkovProcess, v0: np.ndarray, beta: float, masks: np.ndarray):
    """Pruned suffix sets: ``sets[delta] = (vectors, plans)`` for acting at ``delta``.

    ``masks[delta]`` is the encoder's transmit vector over the current state at
    elapsed time ``delta`` (rows 1..t_max; row t_max must be all ones).
    ``vectors[k, s]`` is the value of running ``plans[k]`` from state s.
    """
    t_max = masks.shape[0] - 1
    term = v0 - beta
    arrival = term[None, :]
    plans: list[tuple] = [()]
    sets = [None] * t_max
    for delta in range(t_max - 1, -1, -1):
        acting, plans = _expand(mdp, arrival, plans)
        acting, plans = prune(acting, plans)
        sets[delta] = (acting, plans)
        c = masks[delta]
        arrival = c * term + (1 - c) * acting
    return sets


def best_masked_plan(
    mdp: ControlledMarkovProcess,
    v0: np.ndarray,
    beta: float,
    masks: np.ndarray,
    s_last: int,
) -> tuple[float, tuple[int, ...]]:
    """Best open-loop action sequence from ``<0, s_last>``.

    Returns (value at e_{s_last}, actions for delta = 0..t_max-1).
    """
    acting, plans = masked_plan_sets(mdp, v0, beta, masks)[0]
    vals = acting[:, s_last]
    best = _argmax_first(vals, plans)
    return float(vals[best]), plans[best]


def fill_unreached(mdp, plan, masks: np.ndarray, sets, s_last: int, floor: float = 1e-15) -> tuple[int, ...]:
    """Re-plan the stretches that silence cannot reach.

    Where the encoder transmits from every state that still carries mass,
    the decoder keeps the predicted belief (ignoring the impossible silence)
    and switches to the suffix that is best for it. Reachable entries, and
    hence the value, are unchanged.
    """
    plan = list(plan)
    w = np.eye(mdp.n_states)[s_last]
    for delta in range(len(plan)):
        if delta > 0:
            pred = mdp.transitions[plan[delta - 1]].T @ w
            kept = (1 - masks[delta]) * pred
            if kept.sum() > floor:
                w = kept / kept.sum()
            else:
                w = pred / pred.sum()
                vecs, plans = sets[delta]
                k = _argmax_first(vecs @ w, plans)
                plan[delta:] = plans[k]
    return tuple(plan)


def _argmax_first(vals: np.ndarray, plans: list[tuple]) -> int:
    top = vals.max()
    cands = [i for i in range(len(vals)) if vals[i] >= top - TIE_TOL]
    return min(cands, key=lambda i: plans[i])


def pull_plan_sets(mdp: ControlledMarkovProcess, v0: np.ndarray, beta: float, t_max: int):
    """For m = 1..t_max, the pruned set of (vector, plan) that pull after m blind steps."""
    arrival = (v0 - beta)[None, :]
    plans: list[tuple] = [()]
    sets = {}
    for m in range(1, t_max + 1):
        acting, plans = _expand(mdp, arrival, plans)
        acting, plans = prune(acting, plans)
        sets[m] = (acting, plans)
        arrival = acting
    return sets


def reached_entries(mdp: ControlledMarkovProcess, enc_table: np.ndarray, dec_table: np.ndarray, floor: float = 1e-15):
    """Which table entries the joint policy visits from ``mdp.initial_dist``.

    Returns ``(columns, nodes, enc)``: last-update states that occur,
    decoder entries ``nodes[delta, j]`` with positive mass, and encoder
    entries ``enc[s, delta, j]`` (delta >= 1) where state s can be present
    when the encoder decides.
    """
    n = mdp.n_states
    t_max = dec_table.shape[0] - 1
    jump = cycle_stats(mdp, enc_table, dec_table).jump
    columns = np.asarray(mdp.initial_dist) > floor
    while True:
        grown = columns | (jump[columns].sum(axis=0) > floor)
        if np.array_equal(grown, columns):
            break
        columns = grown
    nodes = np.zeros((t_max + 1, n), dtype=bool)
    enc = np.zeros((n, t_max + 1, n), dtype=bool)
    for j in np.flatnonzero(columns):
        q = np.eye(n)[j]
        for delta in range(t_max):
            nodes[delta, j] = True
            q = mdp.transitions[dec_table[delta, j]].T @ q
            enc[:, delta + 1, j] = q > floor
            if delta + 1 < t_max:
                q = q * (1 - enc_table[:, delta + 1, j])
            if q.sum() <= floor:
                break
    return columns, nodes, enc
