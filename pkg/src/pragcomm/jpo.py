"""Joint policy optimization: the push problem as one centralized POMDP.

A joint action is ``<a, c>``: the decoder's control action and the
encoder's transmit vector over the state that comes next. The hidden state
is the true state (and, in the age-bounded variant, the elapsed time since
the last update, so that transmission is forced at ``t_max``). Observations
are the transmitted state or silence.

The solver is a heuristic-search point-based method: alpha vectors for the
lower bound, a fast informed bound plus sawtooth points for the upper
bound, gap-directed trials from every initial belief.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np

from .belief import DecoderPolicy, EncoderPolicy
from .mdp import ControlledMarkovProcess, HorizonConfig
from .push import PolicySet
from .renewal import cycle_stats, renewal_values

log = logging.getLogger(__name__)

CHI = -1  # the "no message" observation
DEFAULT_STATE_CAP = 12
PRUNE_EVERY = 50
FIB_TOL = 1e-6
FIB_MAX_ITER = 2000
MASS_FLOOR = 1e-15
IMPROVE_TOL = 1e-12
CHUNK = 512


# -- the augmented model -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class AugmentedPOMDP:
    """Centralized view of a push problem.

    Augmented actions are numbered decoder-action major, with the transmit
    vector as a binary counter: ``index = a * 2**S + sum_s c[s] * 2**s``.
    With ``t_max`` set, the model tracks the age of the last update in
    layers ``0..t_max-1`` and transmits unconditionally when the age would
    reach ``t_max``.
    """

    mdp: ControlledMarkovProcess
    beta: float
    t_max: int | None = None

    @property
    def n_states(self) -> int:
        return self.mdp.n_states

    @property
    def n_decoder_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def n_comm(self) -> int:
        return 2**self.n_states

    @property
    def n_actions(self) -> int:
        return self.n_decoder_actions * self.n_comm

    @property
    def n_layers(self) -> int:
        return 1 if self.t_max is None else self.t_max

    @property
    def discount(self) -> float:
        return self.mdp.discount

    @cached_property
    def comm(self) -> np.ndarray:
        """Row i is the transmit vector with counter value i."""
        idx = np.arange(self.n_comm)[:, None]
        return ((idx >> np.arange(self.n_states)[None, :]) & 1).astype(float)

    def action(self, index: int) -> tuple[int, tuple[int, ...]]:
        a, ci = divmod(int(index), self.n_comm)
        return a, tuple(int(x) for x in self.comm[ci])

    def index(self, a: int, c) -> int:
        return int(a) * self.n_comm + int(sum(int(v) << s for s, v in enumerate(c)))

    def transition(self, index: int) -> np.ndarray:
        # the transmit vector never moves the state
        return self.mdp.transitions[int(index) // self.n_comm]

    @cached_property
    def reward(self) -> np.ndarray:
        """``reward[index, s]``: expected reward minus the discounted channel cost."""
        rbar = self.mdp.expected_reward()  # (A, S)
        cost = self.discount * self.beta * np.einsum("ast,ct->acs", self.mdp.transitions, self.comm)
        return (rbar[:, None, :] - cost).reshape(self.n_actions, self.n_states)

    def observe(self, s_next: int, index: int) -> int:
        c = self.comm[int(index) % self.n_comm]
        return int(s_next) if c[s_next] else CHI

    def forced(self, layer: int) -> bool:
        return self.t_max is not None and layer + 1 >= self.t_max

    def next_layer(self, layer: int) -> int:
        return 0 if self.t_max is None else layer + 1


def build_augmented(
    mdp: ControlledMarkovProcess,
    beta: float,
    t_max: int | None = None,
    state_cap: int = DEFAULT_STATE_CAP,
) -> AugmentedPOMDP:
    if mdp.n_states > state_cap:
        raise ValueError(f"{mdp.n_states} states exceed the cap of {state_cap} (2^S transmit vectors)")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    if t_max is not None and t_max < 1:
        raise ValueError("t_max must be >= 1")
    return AugmentedPOMDP(mdp, float(beta), t_max)


# -- value representations ---------------------------------------------------

@dataclass(frozen=True)
class AlphaVector:
    values: np.ndarray
    action: int
    layer: int = 0


def _undominated(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Mask of rows not pointwise dominated by another row (first copy kept)."""
    n = len(vectors)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        if not keep[i]:
            continue
        ge = np.all(vectors >= vectors[i] - tol, axis=1)
        strict = np.any(vectors > vectors[i] + tol, axis=1)
        ge[i] = False
        # dominated by a strictly better vector, or an equal one seen earlier
        dom = ge & (strict | (np.arange(n) < i))
        if np.any(dom & keep):
            keep[i] = False
    return keep


class AlphaSet:
    """Lower bound: per age layer, a set of alpha vectors over states."""

    def __init__(self, n_layers: int, n_states: int):
        self.vectors = [np.empty((0, n_states)) for _ in range(n_layers)]
        self.actions: list[list[int]] = [[] for _ in range(n_layers)]

    def __len__(self):
        return sum(len(v) for v in self.vectors)

    def add(self, layer: int, values: np.ndarray, action: int):
        self.vectors[layer] = np.vstack([self.vectors[layer], values[None, :]])
        self.actions[layer].append(int(action))

    def values(self, layer: int, W: np.ndarray) -> np.ndarray:
        """max over alpha of <alpha, w> for each row of W (rows may be unnormalized)."""
        G = self.vectors[layer]
        return (np.atleast_2d(W) @ G.T).max(axis=1)

    def value(self, layer: int, w: np.ndarray) -> float:
        return float(self.values(layer, w)[0])

    def corners(self, layer: int) -> np.ndarray:
        return self.vectors[layer].max(axis=0)

    def prune(self):
        for k, G in enumerate(self.vectors):
            if len(G) > 1:
                keep = _undominated(G)
                self.vectors[k] = G[keep]
                self.actions[k] = [a for a, kp in zip(self.actions[k], keep) if kp]

    def __iter__(self):
        for k, G in enumerate(self.vectors):
            for row, a in zip(G, self.actions[k]):
                yield AlphaVector(row.copy(), a, k)


class UpperBound:
    """Fast informed bound vectors, tightened by sawtooth points."""

    def __init__(self, fib: list[np.ndarray]):
        self.fib = fib
        self.corner = [F.max(axis=0) for F in fib]
        n = fib[0].shape[1]
        self.points = [np.empty((0, n)) for _ in fib]
        self.point_values = [np.empty(0) for _ in fib]

    def values(self, layer: int, W: np.ndarray) -> np.ndarray:
        """Upper bound for each row of W; positively homogeneous, so rows may be unnormalized."""
        W = np.atleast_2d(W)
        out = np.minimum((W @ self.fib[layer].T).max(axis=1), W @ self.corner[layer])
        pts, vals = self.points[layer], self.point_values[layer]
        if len(pts) == 0:
            return out
        excess = vals - pts @ self.corner[layer]  # <= 0
        safe = np.where(pts > 0, pts, 1.0)
        for lo in range(0, len(W), CHUNK):
            X = W[lo : lo + CHUNK]
            ratio = np.where(pts[None, :, :] > 0, X[:, None, :] / safe[None, :, :], np.inf).min(axis=2)
            saw = (X @ self.corner[layer])[:, None] + ratio * excess[None, :]
            out[lo : lo + CHUNK] = np.minimum(out[lo : lo + CHUNK], saw.min(axis=1))
        return out

    def value(self, layer: int, w: np.ndarray) -> float:
        return float(self.values(layer, w)[0])

    def add(self, layer: int, w: np.ndarray, v: float):
        hot = np.flatnonzero(w > 1 - 1e-12)
        if len(hot) == 1:
            s = hot[0]
            self.corner[layer][s] = min(self.corner[layer][s], v)
            return
        self.points[layer] = np.vstack([self.points[layer], w[None, :]])
        self.point_values[layer] = np.append(self.point_values[layer], v)

    def prune(self):
        # drop points the others already imply
        for k in range(len(self.points)):
            pts, vals = self.points[k], self.point_values[k]
            keep = np.ones(len(pts), dtype=bool)
            for i in range(len(pts)):
                keep[i] = False
                self.points[k], self.point_values[k] = pts[keep], vals[keep]
                if self.value(k, pts[i]) > vals[i] + 1e-12:
                    keep[i] = True
            self.points[k], self.point_values[k] = pts[keep], vals[keep]

    @property
    def n_points(self) -> int:
        return sum(len(p) for p in self.points)


@dataclass
class ValueBounds:
    lower: AlphaSet
    upper: UpperBound

    def gap(self, layer: int, w: np.ndarray) -> float:
        return self.upper.value(layer, w) - self.lower.value(layer, w)

    def to_document(self) -> dict:
        return {
            "lower": [
                {"layer": a.layer, "action": a.action, "values": a.values.tolist()} for a in self.lower
            ],
            "fib": [F.tolist() for F in self.upper.fib],
            "corners": [c.tolist() for c in self.upper.corner],
            "points": [
                {"layer": k, "belief": p.tolist(), "value": float(v)}
                for k in range(len(self.upper.points))
                for p, v in zip(self.upper.points[k], self.upper.point_values[k])
            ],
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ValueBounds":
        fib = [np.array(F, dtype=float) for F in doc["fib"]]
        n_layers, n = len(fib), fib[0].shape[1]
        lower = AlphaSet(n_layers, n)
        for a in doc["lower"]:
            lower.add(a["layer"], np.array(a["values"], dtype=float), a["action"])
        upper = UpperBound(fib)
        upper.corner = [np.array(c, dtype=float) for c in doc["corners"]]
        for p in doc["points"]:
            upper.add(p["layer"], np.array(p["belief"], dtype=float), p["value"])
        return cls(lower, upper)

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ValueBounds":
        return cls.from_document(json.loads(text))


# -- initial bounds ----------------------------------------------------------

def _masks(pomdp: AugmentedPOMDP, layer: int) -> np.ndarray:
    """Effective transmit vectors at the next step (all ones when forced)."""
    if pomdp.forced(layer):
        return np.ones_like(pomdp.comm)
    return pomdp.comm


def blind_lower_bound(pomdp: AugmentedPOMDP, tol: float = 1e-9) -> AlphaSet:
    """Value of repeating each augmented action forever, ignoring observations.

    One vector per action and layer; the set is pruned of pointwise
    dominated vectors before it is returned.
    """
    S, K, A, C = pomdp.n_states, pomdp.n_layers, pomdp.n_decoder_actions, pomdp.n_comm
    gamma, beta = pomdp.discount, pomdp.beta
    P = pomdp.mdp.transitions
    rbar = pomdp.mdp.expected_reward()
    alpha = np.zeros((A, C, K, S))
    tx = np.stack([_masks(pomdp, k) for k in range(K)], axis=1)  # (C, K, S)
    nxt = [pomdp.next_layer(k) if not pomdp.forced(k) else 0 for k in range(K)]
    for _ in range(100000):
        # arrival value at the next state: transmit resets the age
        succ = np.stack([alpha[:, :, nxt[k], :] for k in range(K)], axis=2)  # (A, C, K, S)
        arrive = tx[None] * (alpha[:, :, 0:1, :] - beta) + (1 - tx[None]) * succ
        new = rbar[:, None, None, :] + gamma * np.einsum("ast,ackt->acks", P, arrive)
        delta = np.max(np.abs(new - alpha))
        alpha = new
        if delta < tol * (1 - gamma):
            break
    out = AlphaSet(K, S)
    for k in range(K):
        vecs = alpha[:, :, k, :].reshape(A * C, S)
        keep = _undominated(vecs)
        for i in np.flatnonzero(keep):
            out.add(k, vecs[i], int(i))
    return out


def _mdp_values(mdp: ControlledMarkovProcess, tol: float = 1e-10) -> np.ndarray:
    """Fully observed optimal values by value iteration."""
    rbar = mdp.expected_reward()
    v = np.zeros(mdp.n_states)
    gamma = mdp.discount
    while True:
        new = (rbar + gamma * mdp.transitions @ v).max(axis=0)
        if np.max(np.abs(new - v)) < tol * (1 - gamma):
            return new
        v = new


def fast_informed_bound(
    pomdp: AugmentedPOMDP, tol: float = FIB_TOL, max_iter: int = FIB_MAX_ITER
) -> list[np.ndarray]:
    """Fast informed bound, one pruned vector set per layer.

    Starts from the fully observed values, which lie above the fixed point,
    so every iterate is itself a valid upper bound; stopping at the
    iteration cap only loosens it. The bound at w is max over vectors.
    """
    S, K, A, C = pomdp.n_states, pomdp.n_layers, pomdp.n_decoder_actions, pomdp.n_comm
    gamma, beta = pomdp.discount, pomdp.beta
    P = pomdp.mdp.transitions
    rbar = pomdp.mdp.expected_reward()
    v_mdp = _mdp_values(pomdp.mdp)
    F = [v_mdp[None, :].copy() for _ in range(K)]
    for _ in range(max_iter):
        top0 = F[0].max(axis=0)
        new = []
        for k in range(K):
            tx = _masks(pomdp, k)  # (C, S)
            nxt = pomdp.next_layer(k) if not pomdp.forced(k) else 0
            G = F[nxt]
            vecs = []
            for a in range(A):
                sent = np.einsum("st,ct,t->cs", P[a], tx, top0 - beta)
                # silent branch: best vector per (c, s)
                masked = P[a][None, :, :] * (1 - tx)[:, None, :]  # (C, S, S)
                chi = np.einsum("cst,nt->csn", masked, G).max(axis=2)
                vecs.append(rbar[a][None, :] + gamma * (sent + chi))
            V = np.concatenate(vecs, axis=0)
            new.append(V[_undominated(V)])
        change = max(
            np.max(np.abs(nw.max(axis=0) - old.max(axis=0))) for nw, old in zip(new, F)
        )
        F = new
        if change < tol:
            break
    return F


def initial_belief_set(mdp: ControlledMarkovProcess) -> list[np.ndarray]:
    """One-hot beliefs on the support of xi, plus xi restricted to each support subset."""
    xi = np.asarray(mdp.initial_dist, dtype=float)
    support = np.flatnonzero(xi > 0)
    out: list[np.ndarray] = []
    seen = set()

    def push(w):
        key = tuple(np.round(w, 12))
        if key not in seen:
            seen.add(key)
            out.append(w)

    for s in support:
        push(np.eye(mdp.n_states)[s])
    for bits in product((0, 1), repeat=len(support)):
        chosen = support[np.array(bits, dtype=bool)]
        if len(chosen) == 0:
            continue
        w = np.zeros(mdp.n_states)
        w[chosen] = xi[chosen]
        push(w / w.sum())
    return out


# -- backups -----------------------------------------------------------------

@dataclass
class _Lookahead:
    q: np.ndarray  # (A, C) one-step values
    chi_arg: np.ndarray | None  # (A, C) best next-layer alpha index (lower only)
    mass: np.ndarray  # (A, S) predicted mass


def _lookahead(pomdp: AugmentedPOMDP, layer: int, w: np.ndarray, bound, corner0: np.ndarray, lower: bool):
    gamma, beta = pomdp.discount, pomdp.beta
    rbar = pomdp.mdp.expected_reward()
    m = np.einsum("s,ast->at", w, pomdp.mdp.transitions)  # (A, S)
    tx = _masks(pomdp, layer)
    imm = rbar @ w  # (A,)
    sent = m @ ((corner0 - beta)[:, None] * tx.T)  # (A, C)
    A, C, S = m.shape[0], tx.shape[0], m.shape[1]
    if pomdp.forced(layer):
        chi = np.zeros((A, C))
        arg = np.zeros((A, C), dtype=int) if lower else None
    else:
        nxt = pomdp.next_layer(layer)
        U = (1 - tx)[None, :, :] * m[:, None, :]  # (A, C, S)
        flat = U.reshape(A * C, S)
        if lower:
            scores = flat @ bound.vectors[nxt].T
            arg = scores.argmax(axis=1).reshape(A, C)
            chi = scores.max(axis=1).reshape(A, C)
        else:
            arg = None
            chi = bound.values(nxt, flat).reshape(A, C)
    q = imm[:, None] + gamma * (sent + chi)
    return _Lookahead(q, arg, m)


def _first_best(q: np.ndarray, tol: float = IMPROVE_TOL) -> int:
    flat = q.ravel()
    top = flat.max()
    return int(np.argmax(flat >= top - tol * max(1.0, abs(top))))


@dataclass
class BeliefTree:
    """Beliefs visited by the search, keyed by (layer, rounded belief)."""

    roots: list[np.ndarray]
    nodes: dict = field(default_factory=dict)

    def __post_init__(self):
        for w in self.roots:
            self.visit(0, w)

    def visit(self, layer: int, w: np.ndarray):
        key = (layer, tuple(np.round(w, 12)))
        self.nodes.setdefault(key, (layer, w))

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes.values())

    def worst_violation(self, bounds: "ValueBounds") -> float:
        """Largest lower - upper over stored nodes (<= 0 when the bounds are consistent)."""
        return max(bounds.lower.value(k, w) - bounds.upper.value(k, w) for k, w in self)


class _Solver:
    def __init__(self, pomdp: AugmentedPOMDP, bounds: ValueBounds, tree: BeliefTree):
        self.pomdp = pomdp
        self.bounds = bounds
        self.tree = tree
        self.backups = 0

    def lower_q(self, layer, w) -> _Lookahead:
        return _lookahead(self.pomdp, layer, w, self.bounds.lower, self.bounds.lower.corners(0), True)

    def upper_q(self, layer, w) -> _Lookahead:
        return _lookahead(self.pomdp, layer, w, self.bounds.upper, self.bounds.upper.corner[0], False)

    def backup(self, layer: int, w: np.ndarray):
        p = self.pomdp
        gamma, beta = p.discount, p.beta
        lo = self.lower_q(layer, w)
        best = _first_best(lo.q)
        a, ci = divmod(best, p.n_comm)
        if lo.q.ravel()[best] > self.bounds.lower.value(layer, w) + IMPROVE_TOL:
            tx = _masks(p, layer)[ci]
            L0 = self.bounds.lower.vectors[0]
            top_idx = L0.argmax(axis=0)
            sent_val = L0[top_idx, np.arange(p.n_states)] - beta
            if p.forced(layer):
                silent = np.zeros(p.n_states)
            else:
                silent = self.bounds.lower.vectors[p.next_layer(layer)][lo.chi_arg[a, ci]]
            arrive = tx * sent_val + (1 - tx) * silent
            alpha = p.mdp.expected_reward()[a] + gamma * p.mdp.transitions[a] @ arrive
            self.bounds.lower.add(layer, alpha, best)
        up = self.upper_q(layer, w)
        v = float(up.q.max())
        if v < self.bounds.upper.value(layer, w) - IMPROVE_TOL:
            self.bounds.upper.add(layer, w, v)
        self.backups += 1
        if self.backups % PRUNE_EVERY == 0:
            self.bounds.lower.prune()
            self.bounds.upper.prune()

    def trial(self, layer: int, w: np.ndarray, epsilon: float, max_depth: int):
        """One gap-directed descent from a root, then backups on the way up."""
        p = self.pomdp
        gamma = p.discount
        path = []
        depth = 0
        while depth < max_depth:
            gap = self.bounds.gap(layer, w)
            if gap <= epsilon * gamma ** (-depth):
                break
            path.append((layer, w))
            self.tree.visit(layer, w)
            up = self.upper_q(layer, w)
            best = _first_best(up.q)
            a, ci = divmod(best, p.n_comm)
            tx = _masks(p, layer)[ci]
            m = up.mass[a]
            target = epsilon * gamma ** (-(depth + 1))
            cands = []
            for s in np.flatnonzero(tx * m > MASS_FLOOR):
                e = np.eye(p.n_states)[s]
                cands.append((m[s] * (self.bounds.gap(0, e) - target), 0, e))
            u = (1 - tx) * m
            if not p.forced(layer) and u.sum() > MASS_FLOOR:
                nb = u / u.sum()
                nxt = p.next_layer(layer)
                cands.append((u.sum() * (self.bounds.gap(nxt, nb) - target), nxt, nb))
            if not cands:
                break
            score, layer, w = max(cands, key=lambda t: t[0])
            if score <= 0:
                break
            depth += 1
        for lw in reversed(path):
            self.backup(*lw)
        return len(path)


# -- the solver --------------------------------------------------------------

@dataclass
class EncoderFirstStep:
    """Transmit rule for the initial state, and its value under the lower bound."""

    rule: np.ndarray
    value: float


@dataclass
class JPOResult:
    bounds: ValueBounds
    policy: PolicySet
    first_step: EncoderFirstStep
    roots: list[np.ndarray]
    pomdp: AugmentedPOMDP
    converged: bool
    backups: int = 0
    elapsed: float = 0.0
    root_gaps: list[float] = field(default_factory=list)
    tree: BeliefTree | None = None

    def __iter__(self):
        return iter((self.bounds, self.policy, self.first_step))

    @property
    def value(self) -> float:
        """xi-weighted lower bound at the one-hot roots (the initial state is known)."""
        xi = self.pomdp.mdp.initial_dist
        lows = np.array([self.bounds.lower.value(0, e) for e in np.eye(self.pomdp.n_states)])
        return float(xi @ lows)


def first_step_rule(bounds: ValueBounds, mdp: ControlledMarkovProcess, beta: float) -> EncoderFirstStep:
    """Best initial transmit rule: pay beta to reveal, or let silence shape the belief."""
    xi = np.asarray(mdp.initial_dist, dtype=float)
    support = np.flatnonzero(xi > 0)
    best = None
    for bits in product((0, 1), repeat=len(support)):
        rule = np.zeros(mdp.n_states, dtype=np.int8)
        rule[support] = bits
        value = 0.0
        for s in support[rule[support] == 1]:
            value += xi[s] * (bounds.lower.value(0, np.eye(mdp.n_states)[s]) - beta)
        quiet = support[rule[support] == 0]
        if len(quiet):
            w = np.zeros(mdp.n_states)
            w[quiet] = xi[quiet]
            value += w.sum() * bounds.lower.value(0, w / w.sum())
        # counter order over the support: first strict improvement wins
        if best is None or value > best.value + IMPROVE_TOL:
            best = EncoderFirstStep(rule, float(value))
    return best


def solve_jpo(
    mdp: ControlledMarkovProcess,
    beta: float,
    epsilon: float,
    cfg: HorizonConfig,
    bounded: bool = True,
    max_backups: int = 200_000,
    time_limit: float | None = None,
    warm: ValueBounds | None = None,
    max_depth: int = 1000,
    state_cap: int = DEFAULT_STATE_CAP,
) -> JPOResult:
    """Solve the centralized POMDP until every initial belief has gap <= epsilon.

    With ``bounded`` the age of the last update is part of the hidden state
    and transmission is forced at ``cfg.t_max``, which makes the problem
    the same as the one the tabular solvers face. Otherwise the POMDP has
    no horizon on silence and the extracted tables are truncated at
    ``cfg.t_max``.
    """
    start = time.perf_counter()
    pomdp = build_augmented(mdp, beta, cfg.t_max if bounded else None, state_cap)
    if warm is None:
        bounds = ValueBounds(blind_lower_bound(pomdp), UpperBound(fast_informed_bound(pomdp)))
    else:
        bounds = warm
    roots = initial_belief_set(mdp)
    tree = BeliefTree(roots)
    solver = _Solver(pomdp, bounds, tree)
    converged = False
    while True:
        gaps = [bounds.gap(0, w) for w in roots]
        worst = int(np.argmax(gaps))
        if gaps[worst] <= epsilon:
            converged = True
            break
        if solver.backups >= max_backups:
            break
        if time_limit is not None and time.perf_counter() - start > time_limit:
            break
        if solver.trial(0, roots[worst], epsilon, max_depth) == 0:
            # the root itself still has a gap; back it up directly
            solver.backup(0, roots[worst])
    bounds.lower.prune()
    bounds.upper.prune()
    gaps = [bounds.gap(0, w) for w in roots]
    if not converged:
        log.warning("JPO stopped with root gap %.3g after %d backups", max(gaps), solver.backups)
    enc, dec = extract_policies(bounds, pomdp, cfg)
    first = first_step_rule(bounds, mdp, beta)
    return JPOResult(
        bounds,
        PolicySet(dec, enc),
        first,
        roots,
        pomdp,
        converged,
        solver.backups,
        time.perf_counter() - start,
        gaps,
        tree,
    )


# -- policies ----------------------------------------------------------------

def _greedy(pomdp: AugmentedPOMDP, bounds: ValueBounds, layer: int, w: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Lower-bound greedy joint action at w: (decoder action, transmit vector, predicted mass)."""
    la = _lookahead(pomdp, layer, w, bounds.lower, bounds.lower.corners(0), True)
    best = _first_best(la.q)
    a, ci = divmod(best, pomdp.n_comm)
    m = la.mass[a]
    c = _masks(pomdp, layer)[ci] * (m > MASS_FLOOR)
    return a, c, m


def _run_belief_policy(pomdp, bounds, cfg, w0):
    """Decoder actions and transmit vectors along the silent branch from w0 (age 0)."""
    t_max = cfg.t_max
    actions, sends = [], []
    w = w0
    for delta in range(t_max):
        layer = delta if pomdp.t_max is not None else 0
        a, c, m = _greedy(pomdp, bounds, layer, w)
        if delta + 1 == t_max:
            c = np.ones_like(c)
        actions.append(a)
        sends.append(c)
        u = (1 - c) * m
        if u.sum() <= MASS_FLOOR:
            break
        w = u / u.sum()
    return actions, sends


def extract_policies(bounds: ValueBounds, pomdp: AugmentedPOMDP, cfg: HorizonConfig) -> tuple[EncoderPolicy, DecoderPolicy]:
    """Tabulate the greedy joint policy over ``<delta, s_last>``.

    Each column starts from the one-hot belief of the last update and
    follows the silent branch; entries past the point where silence is
    impossible keep action 0 and transmit 0. Transmit entries for states
    the belief cannot reach are 0.
    """
    if pomdp.t_max is not None and pomdp.t_max != cfg.t_max:
        raise ValueError("bounded model and config disagree on t_max")
    n, t_max = pomdp.n_states, cfg.t_max
    enc = np.zeros((n, t_max + 1, n), dtype=np.int8)
    enc[:, t_max, :] = 1
    dec = np.zeros((t_max + 1, n), dtype=np.int64)
    for j in range(n):
        actions, sends = _run_belief_policy(pomdp, bounds, cfg, np.eye(n)[j])
        for delta, (a, c) in enumerate(zip(actions, sends)):
            dec[delta, j] = a
            if delta + 1 < t_max:
                enc[:, delta + 1, j] = c
    return EncoderPolicy(enc), DecoderPolicy(dec)


def policy_value_from(result: JPOResult, cfg: HorizonConfig, w0: np.ndarray) -> float:
    """Exact value of the extracted policy when the decoder starts from belief w0 at age 0."""
    pomdp, bounds = result.pomdp, result.bounds
    mdp, beta = pomdp.mdp, pomdp.beta
    pi_d, pi_e = result.policy
    v0 = renewal_values(cycle_stats(mdp, pi_e.table, pi_d.table), beta)
    hot = np.flatnonzero(w0 > 1 - 1e-12)
    if len(hot) == 1:
        return float(v0[hot[0]])
    actions, sends = _run_belief_policy(pomdp, bounds, cfg, w0)
    gamma = mdp.discount
    rbar = mdp.expected_reward()
    q = np.asarray(w0, dtype=float).copy()
    total = 0.0
    for delta, (a, c) in enumerate(zip(actions, sends)):
        total += gamma**delta * float(q @ rbar[a])
        q = mdp.transitions[a].T @ q
        total += gamma ** (delta + 1) * float((c * q) @ (v0 - beta))
        q = (1 - c) * q
    return total
