"""Decoder beliefs: naive a-priori propagation and implicit-information updates."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .mdp import ControlledMarkovProcess

BELIEF_FLOOR = 1e-15
SIMPLEX_TOL = 1e-9

NAIVE = "naive"
IMPLICIT = "implicit"


class InconsistentObservation(ValueError):
    """No-transmission observed although the encoder transmits in every reachable state."""


@dataclass(frozen=True)
class DecoderState:
    delta: int
    s_last: int

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


@dataclass(frozen=True, eq=False)
class Belief:
    probs: np.ndarray
    origin: str = NAIVE

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __eq__(self, other):
        return isinstance(other, Belief) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def on_simplex(self, tol: float = SIMPLEX_TOL) -> bool:
        return bool(np.all(self.probs >= 0) and abs(self.probs.sum() - 1) <= tol)


def _table_digest(table: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(table).tobytes() + str(table.shape).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class EncoderPolicy:
    """Deterministic transmit table ``table[s, delta, s_last]`` in {0, 1}.

    Row ``delta = t_max`` is the forced transmission; ``delta = 0`` is the
    post-transmission instant and is never consulted.
    """

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.int8)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"encoder table must have shape (S, T+1, S), got {t.shape}")
        if not np.all(t[:, -1, :] == 1):
            raise ValueError("encoder must transmit at delta = t_max")
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("encoder entries must be 0 or 1")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def t_max(self) -> int:
        return self.table.shape[1] - 1

    def decide(self, s: int, delta: int, s_last: int) -> int:
        return int(self.table[s, delta, s_last])

    def mask(self, delta: int, s_last: int) -> np.ndarray:
        return self.table[:, delta, s_last].astype(float)

    def __eq__(self, other):
        return isinstance(other, EncoderPolicy) and np.array_equal(self.table, other.table)

    def __hash__(self):
        return hash(self.fingerprint)

    @property
    def fingerprint(self) -> str:
        return _table_digest(self.table)

    @classmethod
    def never(cls, n_states: int, t_max: int) -> "EncoderPolicy":
        t = np.zeros((n_states, t_max + 1, n_states), dtype=np.int8)
        t[:, t_max, :] = 1
        return cls(t)

    @classmethod
    def always(cls, n_states: int, t_max: int) -> "EncoderPolicy":
        return cls(np.ones((n_states, t_max + 1, n_states), dtype=np.int8))

    @classmethod
    def from_schedule(cls, tau: Sequence[int], t_max: int) -> "EncoderPolicy":
        """Lift a pull schedule: transmit once delta reaches tau(s_last)."""
        tau = np.asarray(tau)
        n = len(tau)
        deltas = np.arange(t_max + 1)
        fire = (deltas[:, None] >= tau[None, :]) & (deltas[:, None] >= 1)
        fire[t_max, :] = True
        t = np.broadcast_to(fire, (n, t_max + 1, n)).astype(np.int8)
        return cls(t)


@dataclass(frozen=True, eq=False)
class DecoderPolicy:
    """Deterministic action table ``table[delta, s_last]``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=np.int64)
        if t.ndim != 2:
            raise ValueError("decoder table must have shape (T+1, S)")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def t_max(self) -> int:
        return self.table.shape[0] - 1

    def act(self, delta: int, s_last: int) -> int:
        return int(self.table[delta, s_last])

    def plan(self, s_last: int) -> tuple[int, ...]:
        return tuple(int(a) for a in self.table[:, s_last])

    def __eq__(self, other):
        return isinstance(other, DecoderPolicy) and np.array_equal(self.table, other.table)

    def __hash__(self):
        return hash(self.fingerprint)

    @property
    def fingerprint(self) -> str:
        return _table_digest(self.table)

    @classmethod
    def constant(cls, action: int, n_states: int, t_max: int) -> "DecoderPolicy":
        return cls(np.full((t_max + 1, n_states), action))


def _floor(p: np.ndarray) -> np.ndarray:
    p = np.where(p < BELIEF_FLOOR, 0.0, p)
    total = p.sum()
    return p / total if total > 0 else p


def belief_reset(s: int, n_states: int) -> Belief:
    if not 0 <= s < n_states:
        raise ValueError(f"state {s} out of range")
    return Belief(np.eye(n_states)[s], NAIVE)


def prior_belief(mdp: ControlledMarkovProcess, ds: DecoderState, actions: Sequence[int]) -> Belief:
    """Belief after ``ds.delta`` blind steps from the last received state."""
    if len(actions) != ds.delta:
        raise ValueError(f"expected {ds.delta} actions, got {len(actions)}")
    w = np.eye(mdp.n_states)[ds.s_last]
    for a in actions:
        w = _floor(mdp.transitions[a].T @ w)
    return Belief(w, NAIVE)


def posterior_step(
    mdp: ControlledMarkovProcess,
    prev: Belief,
    action: int,
    enc: EncoderPolicy,
    ds: DecoderState,
) -> Belief:
    """Condition one prediction step on the encoder having stayed silent.

    ``ds`` is the decoder state reached by this step, so the silence mask is
    the encoder's row at elapsed time ``ds.delta``.
    """
    if ds.delta < 1:
        raise ValueError("posterior update needs delta >= 1")
    predicted = mdp.transitions[action].T @ prev.probs
    masked = (1.0 - enc.mask(ds.delta, ds.s_last)) * predicted
    total = masked.sum()
    if total <= BELIEF_FLOOR:
        raise InconsistentObservation(
            f"silence at delta={ds.delta}, s_last={ds.s_last} has zero probability"
        )
    return Belief(_floor(masked / total), IMPLICIT)


def trajectory_belief(
    mdp: ControlledMarkovProcess,
    start: DecoderState,
    policies,
    seq: Sequence[int],
) -> float:
    """Probability of the next ``len(seq)`` states with no pull in between."""
    pi_d, tau = policies
    m = len(seq)
    if m > pi_d.t_max:
        raise ValueError("sequence longer than t_max")
    delta, s_last = start.delta, start.s_last
    actions = [pi_d.act(k, s_last) for k in range(delta)]
    w = prior_belief(mdp, start, actions).probs
    w = mdp.transitions[pi_d.act(delta, s_last)].T @ w
    prob = w[seq[0]]
    for ell in range(1, m):
        if tau[s_last] == delta + ell:
            return 0.0
        a = pi_d.act(delta + ell, s_last)
        prob *= mdp.transitions[a, seq[ell - 1], seq[ell]]
    return float(prob)


@lru_cache(maxsize=256)
def _naive_chain(mdp: ControlledMarkovProcess, digest: str, table_bytes: bytes, shape: tuple) -> np.ndarray:
    table = np.frombuffer(table_bytes, dtype=np.int64).reshape(shape)
    n = mdp.n_states
    out = np.zeros((shape[0], n, n))
    w = np.eye(n)
    out[0] = w
    for delta in range(1, shape[0]):
        a = table[delta - 1]
        # column j is the belief for s_last = j
        w = np.einsum("jst,sj->tj", mdp.transitions[a], w)
        out[delta] = w
    return out


def naive_beliefs(mdp: ControlledMarkovProcess, pi_d: DecoderPolicy) -> np.ndarray:
    """All a-priori beliefs under ``pi_d``: ``out[delta, :, s_last]``.

    Memoized per (mdp, policy fingerprint).
    """
    t = pi_d.table
    return _naive_chain(mdp, pi_d.fingerprint, t.tobytes(), t.shape)
