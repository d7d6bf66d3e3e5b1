"""Controlled Markov processes and the experiment families built on them.

Arrays follow the layout ``transitions[a, s, s']`` and ``reward[s, a, s']``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

ROW_TOL = 1e-9

# two-peak reward levels
R_HIGH = 2.0
R_LOW = 1.0
R_NEIGHBOR = 0.5
NEIGHBOR_RADIUS = 1

DEFAULT_GAMMA = 0.95


@dataclass(frozen=True, eq=False)
class ControlledMarkovProcess:
    transitions: np.ndarray
    reward: np.ndarray
    discount: float = DEFAULT_GAMMA
    initial_dist: np.ndarray | None = None
    family: str = "custom"
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.transitions, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValueError(f"transitions must have shape (A, S, S), got {P.shape}")
        n_actions, n_states = P.shape[0], P.shape[1]
        if r.shape != (n_states, n_actions, n_states):
            raise ValueError(
                f"reward must have shape {(n_states, n_actions, n_states)}, got {r.shape}"
            )
        if self.initial_dist is None:
            xi = np.full(n_states, 1.0 / n_states)
        else:
            xi = np.array(self.initial_dist, dtype=float)
        for arr in (P, r, xi):
            arr.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", xi)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def is_estimation(self) -> bool:
        return self.family == "estimation"

    def expected_reward(self) -> np.ndarray:
        """Expected one-step reward, shape (A, S): sum_s' P[a,s,s'] r[s,a,s']."""
        return np.einsum("ast,sat->as", self.transitions, self.reward)

    def with_discount(self, gamma: float) -> "ControlledMarkovProcess":
        return ControlledMarkovProcess(
            self.transitions, self.reward, gamma, self.initial_dist, self.family, self.metadata
        )

    def with_initial(self, xi) -> "ControlledMarkovProcess":
        return ControlledMarkovProcess(
            self.transitions, self.reward, self.discount, xi, self.family, self.metadata
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


def validate(mdp: ControlledMarkovProcess) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    P = mdp.transitions
    for a in range(mdp.n_actions):
        for s in range(mdp.n_states):
            row = P[a, s]
            if np.any(row < 0):
                problems.append(f"negative transition probability at (a={a}, s={s})")
            if abs(row.sum() - 1.0) > ROW_TOL:
                problems.append(f"transition row (a={a}, s={s}) sums to {row.sum():.12g}")
    if not np.all(np.isfinite(mdp.reward)):
        problems.append("reward has non-finite entries")
    xi = mdp.initial_dist
    if np.any(xi < 0) or abs(xi.sum() - 1.0) > ROW_TOL:
        problems.append(f"initial_dist is not a distribution (sum {xi.sum():.12g})")
    if not 0.0 <= mdp.discount < 1.0:
        problems.append(f"discount {mdp.discount} outside [0, 1)")
    return problems


def check(mdp: ControlledMarkovProcess) -> ControlledMarkovProcess:
    problems = validate(mdp)
    if problems:
        raise ValueError("invalid MDP: " + "; ".join(problems))
    return mdp


def circular_distance(i, j, n: int):
    d = np.abs(np.asarray(i) - np.asarray(j)) % n
    return np.minimum(d, n - d)


def generate_deterministic_base(
    seed: int, n_states: int, n_actions: int, gamma: float = DEFAULT_GAMMA
) -> ControlledMarkovProcess:
    """Random MDP whose rows are one-hot; successors drawn uniformly.

    The reward tensor is zero; attach one with :func:`two_peak_reward`.
    """
    if n_states < 2:
        raise ValueError("need at least 2 states")
    rng = np.random.default_rng(seed)
    succ = rng.integers(0, n_states, size=(n_actions, n_states))
    P = np.zeros((n_actions, n_states, n_states))
    a_idx, s_idx = np.meshgrid(np.arange(n_actions), np.arange(n_states), indexing="ij")
    P[a_idx, s_idx, succ] = 1.0
    reward = np.zeros((n_states, n_actions, n_states))
    return ControlledMarkovProcess(
        P, reward, gamma, family="deterministic", metadata={"seed": int(seed), "d": 1.0 / n_states}
    )


def spread_size(d: float, n_states: int) -> int:
    """Number of nonzero entries requested by density ``d``, clamped to [1, |S|]."""
    if not 0.0 < d <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {d}")
    return int(min(max(round(d * n_states), 1), n_states))


def density_profile(m: int, n_states: int, center: int, normalize: bool = True) -> np.ndarray:
    """Linear-decay row of width ``m`` centred on ``center`` (circular distance)."""
    if m < 1 or m > n_states:
        raise ValueError(f"spread {m} outside [1, {n_states}]")
    dist = circular_distance(np.arange(n_states), center, n_states)
    window = dist < m / 2
    numer = (5 + (dist == 0)) * m / 5 - 2 * dist
    row = np.where(window, numer, 0.0) / ((m - 1) ** 2 / 2 + 6 * m / 5)
    if normalize:
        row = row / row.sum()
    return row


def densify(base: ControlledMarkovProcess, d: float) -> ControlledMarkovProcess:
    """Spread every deterministic transition over its circular neighbourhood.

    Rows are always renormalised; for odd spreads the raw profile already
    sums to one.
    """
    P = base.transitions
    if not np.all((P == 0) | (P == 1)):
        raise ValueError("densify needs a deterministic base MDP")
    n = base.n_states
    m = spread_size(d, n)
    profiles = np.stack([density_profile(m, n, c) for c in range(n)])
    centers = P.argmax(axis=2)
    newP = profiles[centers]
    meta = dict(base.metadata, d=float(d), m=m)
    return ControlledMarkovProcess(newP, base.reward, base.discount, base.initial_dist, base.family, meta)


def density(P: np.ndarray) -> float:
    """Fraction of nonzero entries of a transition tensor."""
    return float(np.count_nonzero(P) / P.size)


def two_peak_reward(
    n_states: int,
    n_actions: int,
    target: int,
    secondary: int,
    high: float = R_HIGH,
    low: float = R_LOW,
    neighbor: float = R_NEIGHBOR,
) -> np.ndarray:
    """Reward tensor that depends only on the arrival state."""
    if target == secondary:
        raise ValueError("target and secondary peaks must differ")
    arrival = np.zeros(n_states)
    near = circular_distance(np.arange(n_states), secondary, n_states) <= NEIGHBOR_RADIUS
    arrival[near] = neighbor
    arrival[secondary] = low
    arrival[target] = high
    return np.broadcast_to(arrival, (n_states, n_actions, n_states)).copy()


def control_instance(
    seed: int, n_states: int, n_actions: int, d: float, gamma: float = DEFAULT_GAMMA
) -> ControlledMarkovProcess:
    """One member of the two-peak control family at density ``d``."""
    base = generate_deterministic_base(seed, n_states, n_actions, gamma)
    rng = np.random.default_rng([seed, 1])
    target, secondary = (int(x) for x in rng.choice(n_states, size=2, replace=False))
    reward = two_peak_reward(n_states, n_actions, target, secondary)
    dense = densify(base, d)
    meta = dict(dense.metadata, target=target, secondary=secondary)
    return ControlledMarkovProcess(dense.transitions, reward, gamma, None, "control_two_peak", meta)


def estimation_mdp(chain, n_states: int | None = None, gamma: float = DEFAULT_GAMMA, initial_dist=None):
    """Remote estimation: actions are state guesses, reward 1 for a correct guess."""
    chain = np.asarray(chain, dtype=float)
    n = chain.shape[0] if n_states is None else n_states
    if chain.shape != (n, n):
        raise ValueError(f"chain must be {n}x{n}, got {chain.shape}")
    if np.any(chain < 0) or np.any(np.abs(chain.sum(axis=1) - 1) > ROW_TOL):
        raise ValueError("chain rows must be probability vectors")
    P = np.broadcast_to(chain, (n, n, n)).copy()
    reward = np.broadcast_to(np.eye(n)[:, :, None], (n, n, n)).copy()
    return ControlledMarkovProcess(P, reward, gamma, initial_dist, "estimation")


def estimation_instance(seed: int, n_states: int, d: float, gamma: float = DEFAULT_GAMMA):
    """Estimation chain from the density family (single action slice)."""
    base = generate_deterministic_base(seed, n_states, 1, gamma)
    chain = densify(base, d).transitions[0]
    mdp = estimation_mdp(chain, gamma=gamma)
    meta = {"seed": int(seed), "d": float(d)}
    return ControlledMarkovProcess(mdp.transitions, mdp.reward, gamma, None, "estimation", meta)


def random_mdp(seed: int, n_states: int, n_actions: int, gamma: float = DEFAULT_GAMMA):
    """Dense random MDP (Dirichlet rows, uniform rewards on [0, 1])."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, 0.5), size=(n_actions, n_states))
    r = rng.uniform(0, 1, size=(n_states, n_actions, n_states))
    return ControlledMarkovProcess(P, r, gamma, family="random", metadata={"seed": int(seed)})


COUNTEREXAMPLE_A1 = [
    [0, 1, 0, 0, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 0, 1, 0],
    [1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1],
]
COUNTEREXAMPLE_A2 = [
    [0, 0.5, 0, 0, 0.5],
    [0, 1, 0, 0, 0],
    [0, 0, 1, 0, 0],
    [0, 0, 0, 1, 0],
    [1, 0, 0, 0, 0],
]


def build_counterexample(gamma: float = 0.9) -> ControlledMarkovProcess:
    """Five-state, two-action MDP where alternating best responses can stall.

    Any transition into state 0 earns 1. The process starts in state 0.
    """
    P = np.array([COUNTEREXAMPLE_A1, COUNTEREXAMPLE_A2], dtype=float)
    r = np.zeros((5, 2, 5))
    r[:, :, 0] = 1.0
    return ControlledMarkovProcess(P, r, gamma, np.eye(5)[0], "counterexample")


# -- serialization ---------------------------------------------------------

def to_document(mdp: ControlledMarkovProcess) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.discount,
        "initial_dist": mdp.initial_dist.tolist(),
        "transitions": mdp.transitions.tolist(),
        "reward": mdp.reward.ravel().tolist(),
        "metadata": dict(mdp.metadata, family=mdp.family),
    }


def from_document(doc: dict) -> ControlledMarkovProcess:
    n, k = doc["n_states"], doc["n_actions"]
    meta = dict(doc.get("metadata", {}))
    family = meta.pop("family", "custom")
    return ControlledMarkovProcess(
        np.array(doc["transitions"], dtype=float).reshape(k, n, n),
        np.array(doc["reward"], dtype=float).reshape(n, k, n),
        doc["gamma"],
        doc["initial_dist"],
        family,
        meta,
    )


def dumps(mdp: ControlledMarkovProcess) -> str:
    return json.dumps(to_document(mdp), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> ControlledMarkovProcess:
    return from_document(json.loads(text))


@dataclass(frozen=True)
class CommunicationCost:
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("communication cost must be nonnegative")


@dataclass(frozen=True)
class HorizonConfig:
    """Maximum inter-transmission time and convergence settings."""

    t_max: int = 5
    epsilon: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


class ConvergenceError(RuntimeError):
    pass
