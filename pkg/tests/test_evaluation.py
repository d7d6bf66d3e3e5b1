import numpy as np
import pytest

from conftest import instance_set
from pragcomm.belief import DecoderPolicy, EncoderPolicy
from pragcomm.evaluation import (
    JointPolicy,
    brute_force_joint,
    evaluate_exact,
    exempt_state_pair,
    exemption_channel_use,
    fully_observed_values,
    is_nash,
    min_channel_exemption,
    min_channel_perfect_tables,
    paoi_profile,
    perfect_estimation_decoder,
    perfect_estimation_policy,
    simulate,
    unilateral_deviation_gap,
)
from pragcomm.mdp import HorizonConfig, estimation_mdp, random_mdp
from pragcomm.pull import PullSchedule, solve_mpi
from pragcomm.push import PolicySet, solve_api, standard_inits


def dirichlet_chain(seed, n):
    return estimation_mdp(np.random.default_rng(seed).dirichlet(np.ones(n), size=n), gamma=0.9)


def random_encoder(rng, n, t_max):
    table = rng.integers(0, 2, size=(n, t_max + 1, n))
    table[:, 0, :] = 0
    table[:, t_max, :] = 1
    return EncoderPolicy(table)


def silent_a1(n, t_max):
    return JointPolicy(EncoderPolicy.never(n, t_max), DecoderPolicy.constant(0, n, t_max))


def test_joint_policy_checks_shapes():
    with pytest.raises(ValueError):
        JointPolicy(EncoderPolicy.never(3, 4), DecoderPolicy.constant(0, 3, 5))
    with pytest.raises(ValueError):
        JointPolicy(EncoderPolicy.never(3, 4), DecoderPolicy.constant(0, 3, 4), "broadcast")


@pytest.mark.parametrize("t_max", [3, 4, 6])
def test_counterexample_silent_cycle(counterexample, t_max):
    g = 0.9
    # walk 0 -> 1 -> 2 -> 3 -> 0 by hand; reward 1 on each entry into 0
    reward, s, disc = 0.0, 0, 1.0
    comm = 0.0
    for t in range(3000):
        s = (s + 1) % 4
        disc *= g
        if s == 0:
            reward += disc / g
        if (t + 1) % t_max == 0:
            comm += disc
    res = evaluate_exact(counterexample, 0.2, silent_a1(5, t_max), HorizonConfig(t_max=t_max))
    assert res.reward_raw == pytest.approx(reward, abs=1e-10)
    assert res.reward_raw == pytest.approx(g**3 / (1 - g**4), abs=1e-10)
    assert res.channel_use == pytest.approx(comm, abs=1e-10)
    assert res.reward == pytest.approx(reward - 0.2 * comm, abs=1e-10)
    assert res.channel_rate == pytest.approx(1 / t_max)


def test_free_channel_has_no_cost_term(small_mdp):
    jp = JointPolicy(EncoderPolicy.always(3, 3), DecoderPolicy.constant(1, 3, 3))
    res = evaluate_exact(small_mdp, 0.0, jp)
    assert res.reward == res.reward_raw
    assert res.channel_use == pytest.approx(0.9 / 0.1)


def test_horizon_mismatch(small_mdp):
    with pytest.raises(ValueError):
        evaluate_exact(small_mdp, 0.1, silent_a1(3, 3), HorizonConfig(t_max=4))


def test_exact_matches_monte_carlo_periodic(counterexample):
    t_max = 4
    pi_d = DecoderPolicy(np.tile(np.array([[1], [0], [1], [0], [0]]), (1, 5)))
    jp = JointPolicy.pull(pi_d, PullSchedule.constant(2, 5), "periodic")
    exact = evaluate_exact(counterexample, 0.1, jp, HorizonConfig(t_max=t_max))
    mc = simulate(counterexample, 0.1, jp, horizon=400, seed=3, runs=400)
    assert mc.stderr > 0
    assert abs(mc.reward - exact.reward) <= 3 * mc.stderr


def test_exact_matches_monte_carlo_long_run():
    mdp = random_mdp(9, 4, 2, 0.9)
    cfg = HorizonConfig(t_max=4)
    (dec, enc), _ = solve_api(mdp, 0.3, standard_inits(mdp, cfg)[1], cfg)
    jp = JointPolicy.push(PolicySet(dec, enc))
    exact = evaluate_exact(mdp, 0.3, jp, cfg)
    mc = simulate(mdp, 0.3, jp, horizon=100_000, seed=1)
    assert abs(mc.reward - exact.reward) <= 3 * mc.stderr
    assert mc.channel_rate == pytest.approx(exact.channel_rate, abs=0.01)


@pytest.mark.parametrize("seed", range(4))
def test_exact_matches_monte_carlo_random_policies(seed):
    mdp = random_mdp(seed, 3, 2, 0.9)
    rng = np.random.default_rng(seed)
    jp = JointPolicy(random_encoder(rng, 3, 3), DecoderPolicy(rng.integers(0, 2, size=(4, 3))))
    exact = evaluate_exact(mdp, 0.5, jp)
    mc = simulate(mdp, 0.5, jp, horizon=300, seed=seed, runs=300)
    assert abs(mc.reward - exact.reward) <= 3 * mc.stderr


def test_deterministic_rollouts_have_no_spread(counterexample):
    jp = silent_a1(5, 4)
    a = simulate(counterexample, 0.2, jp, horizon=200, seed=0)
    b = simulate(counterexample, 0.2, jp, horizon=200, seed=7)
    assert a.stderr == 0.0
    assert a.reward == b.reward


def test_simulation_is_reproducible(small_mdp):
    jp = JointPolicy(EncoderPolicy.always(3, 3), DecoderPolicy.constant(1, 3, 3))
    a = simulate(small_mdp, 0.2, jp, horizon=100, seed=5)
    b = simulate(small_mdp, 0.2, jp, horizon=100, seed=5)
    assert a.reward == b.reward and a.channel_use == b.channel_use
    with pytest.raises(ValueError):
        simulate(small_mdp, 0.2, jp, horizon=0, seed=5)


def test_channel_use_bounded():
    for seed in range(5):
        mdp = random_mdp(seed, 3, 2, 0.9)
        rng = np.random.default_rng(seed)
        jp = JointPolicy(random_encoder(rng, 3, 4), DecoderPolicy(rng.integers(0, 2, size=(5, 3))))
        for res in (evaluate_exact(mdp, 0.1, jp), simulate(mdp, 0.1, jp, 200, seed)):
            assert 0.0 <= res.channel_use <= 1 / (1 - mdp.discount) + 1e-9
            assert 0.0 <= res.channel_rate <= 1.0


def test_paoi_pull_is_point_mass(small_mdp):
    tau = PullSchedule([2, 4, 1])
    jp = JointPolicy.pull(DecoderPolicy.constant(0, 3, 4), tau)
    hist = paoi_profile(small_mdp, 0.1, jp)
    assert np.allclose(hist.sum(axis=1), 1.0)
    for j, t in enumerate(tau.tau):
        assert hist[j, t] == pytest.approx(1.0)


def test_paoi_always_and_push(small_mdp):
    jp = JointPolicy(EncoderPolicy.always(3, 4), DecoderPolicy.constant(0, 3, 4))
    hist = paoi_profile(small_mdp, 0.1, jp)
    assert np.allclose(hist[:, 1], 1.0)
    rng = np.random.default_rng(0)
    hist = paoi_profile(small_mdp, 0.1, JointPolicy(random_encoder(rng, 3, 4), DecoderPolicy.constant(0, 3, 4)))
    assert np.allclose(hist.sum(axis=1), 1.0)
    assert np.all(hist[:, 0] == 0)


def test_paoi_matches_simulation(small_mdp):
    rng = np.random.default_rng(4)
    jp = JointPolicy(random_encoder(rng, 3, 4), DecoderPolicy(rng.integers(0, 2, size=(5, 3))))
    exact = paoi_profile(small_mdp, 0.1, jp)
    mc = simulate(small_mdp, 0.1, jp, horizon=20_000, seed=0).paoi
    seen = mc.sum(axis=1) > 0
    assert np.allclose(exact[seen], mc[seen], atol=0.03)


def test_brute_force_free_channel_is_fully_observed():
    for mdp in instance_set()[:10]:
        v_star, _ = fully_observed_values(mdp)
        _, best = brute_force_joint(mdp, 0.0, HorizonConfig(t_max=3))
        assert best == pytest.approx(float(mdp.initial_dist @ v_star), abs=1e-8)


def test_brute_force_pull_matches_mpi():
    for mdp in instance_set()[:10]:
        cfg = HorizonConfig(t_max=3, epsilon=1e-9)
        jp, best = brute_force_joint(mdp, 0.4, cfg, pull_only=True)
        sol = solve_mpi(mdp, 0.4, cfg)
        assert best == pytest.approx(sol.values.weighted(mdp.initial_dist), abs=1e-7)
        assert evaluate_exact(mdp, 0.4, jp, cfg).reward == pytest.approx(best, abs=1e-8)


def test_brute_force_size_bound():
    with pytest.raises(ValueError):
        brute_force_joint(random_mdp(0, 5, 2, 0.9), 0.1, HorizonConfig(t_max=3))
    with pytest.raises(ValueError):
        brute_force_joint(random_mdp(0, 3, 2, 0.9), 0.1, HorizonConfig(t_max=4))


def test_fully_observed_values_solve_bellman(small_mdp):
    v, policy = fully_observed_values(small_mdp)
    q = small_mdp.expected_reward() + small_mdp.discount * small_mdp.transitions @ v
    assert np.allclose(q.max(axis=0), v, atol=1e-10)
    assert np.array_equal(q.argmax(axis=0), policy)


@pytest.mark.parametrize("seed", range(4))
def test_perfect_estimation_is_perfect(seed):
    mdp = dirichlet_chain(seed, 4)
    cfg = HorizonConfig(t_max=5)
    jp = JointPolicy(perfect_estimation_policy(mdp, 5), perfect_estimation_decoder(mdp, 5))
    res = evaluate_exact(mdp, 0.0, jp, cfg)
    assert res.estimation_rate == pytest.approx(1.0, abs=1e-12)


def test_perfect_estimation_needs_estimation_mdp(small_mdp):
    with pytest.raises(ValueError):
        perfect_estimation_policy(small_mdp)


@pytest.mark.parametrize("seed", range(4))
def test_perfect_estimation_saves_the_likeliest_mass(seed):
    mdp = dirichlet_chain(seed, 3)
    P, g = mdp.transitions[0], mdp.discount
    t_max = 200  # effectively no forced update
    jp = JointPolicy(perfect_estimation_policy(mdp, t_max), perfect_estimation_decoder(mdp, t_max))
    res = evaluate_exact(mdp, 0.0, jp)
    # always-transmit use minus the discounted probability of hitting the guess
    saved = np.linalg.solve(np.eye(3) - g * P, g * P.max(axis=1))
    assert res.channel_use == pytest.approx(g / (1 - g) - mdp.initial_dist @ saved, abs=1e-6)


@pytest.mark.parametrize("n", [3, 4])
def test_likeliest_exemption_is_minimal(n):
    for seed in range(10):
        mdp = dirichlet_chain(seed, n)
        greedy = [int(np.argmax(mdp.transitions[0][s])) for s in range(n)]
        _, best = min_channel_exemption(mdp)
        assert mdp.initial_dist @ exemption_channel_use(mdp, greedy) == pytest.approx(best, abs=1e-12)


def test_forced_update_can_break_likeliest_minimality():
    # with an update forced every 3 steps, other perfect tables can be cheaper
    mdp = dirichlet_chain(5, 4)
    jp = JointPolicy(perfect_estimation_policy(mdp, 3), perfect_estimation_decoder(mdp, 3))
    greedy = evaluate_exact(mdp, 0.0, jp).channel_use
    best = min_channel_perfect_tables(mdp, 3)
    assert best < greedy - 1e-3
    for seed in range(4):
        chain = dirichlet_chain(seed, 3)
        jp = JointPolicy(perfect_estimation_policy(chain, 3), perfect_estimation_decoder(chain, 3))
        assert min_channel_perfect_tables(chain, 3) == pytest.approx(evaluate_exact(chain, 0.0, jp).channel_use, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_exempt_pairs_are_equilibria(seed):
    mdp = dirichlet_chain(seed, 3)
    cfg = HorizonConfig(t_max=3)
    for s in range(3):
        dec, enc = exempt_state_pair(mdp, s, 3)
        assert is_nash(mdp, 0.5, dec, enc, cfg)


def test_unilateral_gap_detects_bad_pairs(counterexample):
    cfg = HorizonConfig(t_max=4)
    # a2 forever after state 1 strands the process
    dec = DecoderPolicy.constant(1, 5, 4)
    assert unilateral_deviation_gap(counterexample, 0.1, dec, EncoderPolicy.never(5, 4), cfg) > 0.1
