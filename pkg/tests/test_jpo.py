import numpy as np
import pytest

from conftest import instance_set
from pragcomm.evaluation import JointPolicy, brute_force_joint, evaluate_exact, fully_observed_values, two_state_grid_values
from pragcomm.jpo import (
    CHI,
    AlphaSet,
    ValueBounds,
    blind_lower_bound,
    build_augmented,
    fast_informed_bound,
    initial_belief_set,
    policy_value_from,
    solve_jpo,
)
from pragcomm.mdp import ControlledMarkovProcess, HorizonConfig, estimation_mdp, random_mdp
from pragcomm.push import potential, solve_api, standard_inits


def test_action_enumeration():
    pomdp = build_augmented(random_mdp(0, 3, 2, 0.9), 0.5)
    assert pomdp.n_actions == 16
    assert pomdp.action(0) == (0, (0, 0, 0))
    assert pomdp.action(9) == (1, (1, 0, 0))
    for i in range(16):
        assert pomdp.index(*pomdp.action(i)) == i


def test_all_ones_reward_and_silent_observation():
    mdp = random_mdp(2, 3, 2, 0.9)
    beta = 0.7
    pomdp = build_augmented(mdp, beta)
    rbar = mdp.expected_reward()
    for a in range(2):
        ones = pomdp.index(a, (1, 1, 1))
        zeros = pomdp.index(a, (0, 0, 0))
        assert np.allclose(pomdp.reward[ones], rbar[a] - mdp.discount * beta)
        assert np.allclose(pomdp.reward[zeros], rbar[a])
        assert all(pomdp.observe(s, zeros) == CHI for s in range(3))
        assert [pomdp.observe(s, ones) for s in range(3)] == [0, 1, 2]


def test_transitions_ignore_transmit_vector():
    pomdp = build_augmented(random_mdp(4, 3, 2, 0.9), 0.2)
    for a in range(2):
        ref = pomdp.transition(pomdp.index(a, (0, 0, 0)))
        for ci in range(pomdp.n_comm):
            assert np.array_equal(pomdp.transition(a * pomdp.n_comm + ci), ref)


def test_build_checks_inputs():
    with pytest.raises(ValueError):
        build_augmented(random_mdp(0, 5, 2, 0.9), 0.1, state_cap=4)
    with pytest.raises(ValueError):
        build_augmented(random_mdp(0, 2, 2, 0.9), -0.1)


def test_blind_bound_zero_reward():
    P = random_mdp(1, 3, 2, 0.9).transitions
    mdp = ControlledMarkovProcess(P, np.zeros((3, 2, 3)), 0.9)
    lb = blind_lower_bound(build_augmented(mdp, 0.0))
    assert all(np.allclose(a.values, 0.0) for a in lb)


def test_blind_bound_single_state():
    P = np.ones((2, 1, 1))
    r = np.array([0.4, 1.0]).reshape(1, 2, 1)
    lb = blind_lower_bound(build_augmented(ControlledMarkovProcess(P, r, 0.9), 0.0))
    assert lb.value(0, np.ones(1)) == pytest.approx(10.0, abs=1e-7)


def test_fib_fully_observed_is_mdp_value(small_mdp):
    # t_max = 1 forces transmission every step
    pomdp = build_augmented(small_mdp, 0.0, t_max=1)
    fib = fast_informed_bound(pomdp, tol=1e-10)
    v_star, _ = fully_observed_values(small_mdp)
    assert np.allclose(fib[0].max(axis=0), v_star, atol=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_fib_above_blind(seed):
    mdp = random_mdp(seed, 3, 2, 0.9)
    pomdp = build_augmented(mdp, 0.4, t_max=3)
    lb = blind_lower_bound(pomdp)
    fib = fast_informed_bound(pomdp)
    W = np.random.default_rng(seed).dirichlet(np.ones(3), size=200)
    for k in range(3):
        assert np.all((W @ fib[k].T).max(axis=1) >= lb.values(k, W) - 1e-9)


def _two_state_chain(seed):
    chain = np.random.default_rng(seed).dirichlet(np.ones(2), size=2)
    return estimation_mdp(chain, gamma=0.9)


@pytest.mark.parametrize("seed", range(3))
def test_initial_bounds_bracket_grid_oracle(seed):
    mdp = _two_state_chain(seed)
    beta = 0.3
    grid, v = two_state_grid_values(mdp, beta)
    pomdp = build_augmented(mdp, beta)
    lb = blind_lower_bound(pomdp)
    fib = fast_informed_bound(pomdp, tol=1e-9)
    W = np.stack([1 - grid, grid], axis=1)
    assert np.all(lb.values(0, W) <= v + 1e-6)
    assert np.all(fib[0].max(axis=0) >= v[[0, -1]] - 1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_unbounded_jpo_matches_grid_oracle(seed):
    mdp = _two_state_chain(seed)
    beta, eps = 0.3, 1e-3
    grid, v = two_state_grid_values(mdp, beta)
    res = solve_jpo(mdp, beta, eps, HorizonConfig(t_max=5), bounded=False)
    assert res.converged
    for s, ref in ((0, v[0]), (1, v[-1])):
        w = np.eye(2)[s]
        assert res.bounds.lower.value(0, w) <= ref + 1e-6
        assert res.bounds.upper.value(0, w) >= ref - 1e-6
        assert res.bounds.lower.value(0, w) == pytest.approx(ref, abs=eps + 1e-4)


def test_initial_belief_sets():
    def make(xi):
        return random_mdp(0, 3, 2, 0.9).with_initial(xi)

    assert len(initial_belief_set(make([1, 0, 0]))) == 1
    two = initial_belief_set(make([0.5, 0.5, 0]))
    assert len(two) == 3
    assert any(np.allclose(w, [0.5, 0.5, 0]) for w in two)
    assert len(initial_belief_set(make([1 / 3, 1 / 3, 1 / 3]))) == 7


def test_certificate_and_sandwich():
    mdp = random_mdp(5, 3, 2, 0.9).with_initial([0.5, 0.25, 0.25])
    eps = 1e-3
    res = solve_jpo(mdp, 0.3, eps, HorizonConfig(t_max=3))
    assert res.converged
    assert len(res.roots) == 7
    for w in res.roots:
        assert res.bounds.gap(0, w) <= eps
    assert res.tree.worst_violation(res.bounds) <= 1e-9


def test_lower_bound_only_grows():
    mdp = random_mdp(6, 3, 2, 0.9)
    pomdp = build_augmented(mdp, 0.3, t_max=3)
    lb = blind_lower_bound(pomdp)
    W = np.random.default_rng(0).dirichlet(np.ones(3), size=100)
    before = [lb.values(k, W) for k in range(3)]
    res = solve_jpo(mdp, 0.3, 1e-3, HorizonConfig(t_max=3))
    for k in range(3):
        assert np.all(res.bounds.lower.values(k, W) >= before[k] - 1e-12)


def test_prune_keeps_the_max():
    rng = np.random.default_rng(1)
    G = AlphaSet(1, 3)
    for i in range(40):
        G.add(0, rng.normal(size=3), i)
    G.add(0, G.vectors[0][0] - 0.5, 99)
    W = rng.dirichlet(np.ones(3), size=300)
    before = G.values(0, W)
    G.prune()
    assert len(G) < 41
    assert np.allclose(G.values(0, W), before, atol=1e-12)


def test_serialization_and_warm_restart():
    mdp = random_mdp(7, 3, 2, 0.9)
    cfg = HorizonConfig(t_max=3)
    res = solve_jpo(mdp, 0.4, 1e-2, cfg)
    text = res.bounds.dumps()
    back = ValueBounds.loads(text)
    W = np.random.default_rng(2).dirichlet(np.ones(3), size=50)
    for k in range(3):
        assert np.allclose(back.lower.values(k, W), res.bounds.lower.values(k, W))
        assert np.allclose(back.upper.values(k, W), res.bounds.upper.values(k, W))
    again = solve_jpo(mdp, 0.4, 1e-2, cfg, warm=back)
    assert again.converged
    assert again.backups == 0


def test_budget_exhaustion_reports_unconverged():
    mdp = random_mdp(8, 4, 2, 0.9)
    res = solve_jpo(mdp, 0.3, 1e-6, HorizonConfig(t_max=3), max_backups=3)
    assert not res.converged
    assert max(res.root_gaps) > 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_free_channel_reaches_fully_observed_value(seed):
    mdp = random_mdp(seed, 3, 2, 0.9)
    eps = 1e-3
    v_star, _ = fully_observed_values(mdp)
    res = solve_jpo(mdp, 0.0, eps, HorizonConfig(t_max=3))
    for s in range(3):
        assert res.bounds.lower.value(0, np.eye(3)[s]) == pytest.approx(v_star[s], abs=eps)


def test_counterexample_beats_api(counterexample):
    cfg = HorizonConfig(t_max=4)
    beta, eps = 0.3, 1e-2
    api = max(potential(counterexample, beta, *solve_api(counterexample, beta, init, cfg)[0]) for init in standard_inits(counterexample, cfg))
    res = solve_jpo(counterexample, beta, eps, cfg)
    assert res.converged
    assert res.value >= api - eps


def test_matches_brute_force_on_tiny_instances():
    eps = 1e-3
    for mdp in instance_set()[:9]:
        cfg = HorizonConfig(t_max=3)
        for beta in (0.0, 0.5):
            res = solve_jpo(mdp, beta, eps, cfg)
            _, best = brute_force_joint(mdp, beta, cfg)
            assert res.converged
            assert res.value == pytest.approx(best, abs=eps)


def test_extracted_policy_reproduces_lower_bound():
    eps = 1e-3
    for mdp in instance_set()[:6]:
        cfg = HorizonConfig(t_max=3)
        res = solve_jpo(mdp, 0.3, eps, cfg)
        pi_d, pi_e = res.policy
        exact = evaluate_exact(mdp, 0.3, JointPolicy.push(res.policy), cfg)
        assert exact.reward == pytest.approx(res.value, abs=eps)
        for s in range(mdp.n_states):
            e = np.eye(mdp.n_states)[s]
            assert policy_value_from(res, cfg, e) >= res.bounds.lower.value(0, e) - eps


def test_extraction_zeroes_unreachable_transmits(counterexample):
    cfg = HorizonConfig(t_max=4)
    res = solve_jpo(counterexample, 0.3, 1e-2, cfg)
    pi_d, pi_e = res.policy
    # after a reveal of state 2 the next state is 3 for sure (under a1) or 2 (under a2)
    a = pi_d.table[0, 2]
    reach = np.flatnonzero(counterexample.transitions[a][2] > 0)
    off = np.setdiff1d(np.arange(5), reach)
    assert np.all(pi_e.table[off, 1, 2] == 0)


def test_first_step_rule_free_initial_state(counterexample):
    res = solve_jpo(counterexample, 0.3, 1e-2, HorizonConfig(t_max=4))
    # a known initial state is never worth paying for
    assert res.first_step.rule.sum() == 0
    assert res.first_step.value == pytest.approx(res.value, abs=1e-12)
