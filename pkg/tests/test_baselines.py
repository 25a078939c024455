import csv
import itertools

import numpy as np
import pytest
from scipy import stats

from haml import baselines
from haml.baselines import (
    Haa2cConfig,
    SoftmaxPolicyParams,
    brute_force_optimum,
    haa2c_step,
    naive_simultaneous_step,
    sample_trajectories,
    shared_policy_optimum,
)
from haml.engine import EngineConfig, PermutationSampler, haml_step
from haml.exact_eval import best_response, evaluate
from haml.game_model import (
    JointPolicy,
    MarkovGame,
    build_prop1_game,
    build_prop2_game,
    dirac_joint_policy,
    random_game,
    random_joint_policy,
    uniform_joint_policy,
)


def prop2_start(p0=0.7):
    return JointPolicy((np.array([[p0, 1 - p0]]),) * 2)


def test_naive_step_falls_into_trap():
    game = build_prop2_game()
    new = naive_simultaneous_step(game, prop2_start())
    assert all(t.tolist() == [[0.0, 1.0]] for t in new.tables)
    j_new = evaluate(game, new).j
    assert j_new == -1.0
    worst = min(evaluate(game, dirac_joint_policy(game, a)).j for a in itertools.product(range(2), repeat=2))
    assert j_new == worst


def test_trap_paired_with_sequential_update():
    game = build_prop2_game()
    start = prop2_start()
    j0 = evaluate(game, start).j
    assert evaluate(game, naive_simultaneous_step(game, start)).j < j0
    _, rec = haml_step(game, start, EngineConfig(iterations=1), 0)
    assert rec.j_after > j0


def test_naive_step_keeps_equilibrium():
    game = build_prop2_game()
    ne = dirac_joint_policy(game, [0, 1])
    assert naive_simultaneous_step(game, ne).allclose(ne)


@pytest.mark.parametrize("n, ratio", [(2, 0.5), (4, 0.125), (6, 0.03125)])
def test_shared_policy_ratio(n, ratio):
    game = build_prop1_game(n)
    p_star, j_share = shared_policy_optimum(game)
    _, j_opt = brute_force_optimum(game)
    assert j_opt == 1.0
    assert j_share / j_opt == pytest.approx(ratio, abs=1e-9)
    assert p_star == pytest.approx(0.5, abs=1e-6)


def test_shared_return_closed_form():
    # two winning joint actions, each with probability p^{n/2} (1-p)^{n/2}
    game = build_prop1_game(4)
    for p in (0.1, 0.5, 0.8):
        assert baselines.shared_return(game, p) == pytest.approx(2 * p**2 * (1 - p)**2, abs=1e-15)


def test_brute_force_optimum_values():
    assert brute_force_optimum(build_prop2_game())[1] == 2.0
    game = random_game(3, 1, 3, [3], 0.9)
    _, j_star = brute_force_optimum(game)
    assert j_star == pytest.approx(best_response(game, uniform_joint_policy(game), 0).value, abs=1e-9)


def test_single_state_trajectories_stay_put():
    game = build_prop2_game()
    trajs = sample_trajectories(game, uniform_joint_policy(game), horizon=10, count=3, seed=0)
    assert all(np.all(t.states == 0) and t.final_state == 0 for t in trajs)


def test_mean_reward_matches_exact_return():
    game = build_prop2_game()
    pi = uniform_joint_policy(game)
    trajs = sample_trajectories(game, pi, horizon=1000, count=100, seed=42)
    rewards = np.concatenate([t.rewards for t in trajs])
    assert rewards.size == 100_000
    sigma = np.sqrt(np.mean((np.array([0.0, 2.0, 2.0, -1.0]) - 0.75) ** 2) / rewards.size)
    assert abs(rewards.mean() - evaluate(game, pi).j) <= 3 * sigma


def test_trajectories_are_deterministic(tmp_path):
    game = random_game(2, 2, 3, [2, 3], 0.9)
    pi = random_joint_policy(game, 2)
    a = sample_trajectories(game, pi, 20, 5, seed=9)
    b = sample_trajectories(game, pi, 20, 5, seed=9)
    c = sample_trajectories(game, pi, 20, 5, seed=10)
    assert all(np.array_equal(x.actions, y.actions) and np.array_equal(x.states, y.states) for x, y in zip(a, b))
    assert any(not np.array_equal(x.actions, y.actions) for x, y in zip(a, c))
    baselines.write_trajectories_csv(a, tmp_path / "a.csv")
    baselines.write_trajectories_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 5 * 20


def test_sampled_actions_pass_chi_squared():
    game = random_game(5, 2, 2, [2, 3], 0.9)
    pi = random_joint_policy(game, 5)
    trajs = sample_trajectories(game, pi, horizon=50, count=200, seed=3)
    states = np.concatenate([t.states for t in trajs])
    joint = np.concatenate([t.joint_actions for t in trajs])
    probs = pi.joint_probs()
    for s in range(game.n_states):
        observed = np.bincount(joint[states == s], minlength=game.n_joint)
        expected = probs[s] * observed.sum()
        assert stats.chisquare(observed, expected).pvalue > 1e-4


def test_visit_frequencies_follow_occupancy():
    game = random_game(8, 2, 3, [2, 2], 0.9)
    pi = random_joint_policy(game, 8)
    trajs = sample_trajectories(game, pi, horizon=30, count=3000, seed=1)
    freq = baselines.visit_frequencies(game, trajs)
    np.testing.assert_allclose(freq, baselines.undiscounted_occupancy(game, pi, 30), atol=0.02)


def test_constant_reward_leaves_logits_unchanged():
    game = MarkovGame(2, 2, (2, 3), np.full((2, 6, 2), 0.5), np.ones((2, 6)), 0.9, np.full(2, 0.5))
    rng = np.random.default_rng(0)
    params = SoftmaxPolicyParams((rng.normal(size=(2, 2)), rng.normal(size=(2, 3))))
    new, _ = haa2c_step(game, params, Haa2cConfig())
    for a, b in zip(params.logits, new.logits):
        np.testing.assert_allclose(a, b, atol=1e-12)


def _random_setup(seed, gamma=0.9):
    rng = np.random.default_rng(seed)
    game = random_game(seed, 3, 2, [2, 3, 2], gamma)
    params = SoftmaxPolicyParams(tuple(rng.normal(size=(2, k)) for k in game.action_counts))
    preds = [(0, baselines.softmax(rng.normal(size=(2, 2)), axis=1)),
             (2, baselines.softmax(rng.normal(size=(2, 2)), axis=1))]
    return game, params, preds, rng


@pytest.mark.parametrize("seed", range(5))
def test_exact_gradient_matches_central_differences(seed):
    game, params, preds, rng = _random_setup(seed)
    old = params.policy()
    obj = baselines.exact_objective(game, evaluate(game, old), old, 1, preds)
    logits = rng.normal(size=(2, 3))
    grad = obj.grad_logits(logits)
    h = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        fd[idx] = (obj.value_logits(logits + e) - obj.value_logits(logits - e)) / (2 * h)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(grad) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_joint_ratio_objective_is_an_identity(seed):
    game, params, preds, rng = _random_setup(seed)
    old = params.policy()
    ev = evaluate(game, old)
    cand = baselines.softmax(rng.normal(size=(2, 3)), axis=1)
    direct = baselines.direct_objective(game, ev, old, 1, cand, preds)
    assert abs(baselines.importance_weighted_objective(game, ev, old, 1, cand, preds) - direct) <= 1e-12
    # the exact per-agent objective differs from the direct form only by the predecessors' own term
    base = baselines.direct_objective(game, ev, old, 1, old.tables[1], preds)
    obj = baselines.exact_objective(game, ev, old, 1, preds)
    assert obj.value(cand) - obj.value(old.tables[1]) == pytest.approx(direct - base, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_monte_carlo_objective_unbiased_by_enumeration(seed):
    game, params, preds, rng = _random_setup(seed, gamma=0.0)
    old = params.policy()
    batch = baselines.enumerate_one_step_batch(game, old)
    assert batch.probabilities.sum() == pytest.approx(1.0, abs=1e-15)
    cand = baselines.softmax(rng.normal(size=(2, 3)), axis=1)
    exact = baselines.importance_weighted_objective(game, evaluate(game, old), old, 1, cand, preds)
    assert abs(baselines.mc_objective(batch, old, 1, cand, preds) - exact) <= 1e-12


def test_monte_carlo_gradient_matches_differences():
    game, params, preds, rng = _random_setup(11)
    old = params.policy()
    batch = baselines.build_batch(game, old, Haa2cConfig(mode="monte_carlo", batch=4, horizon=10), seed=2)
    logits = rng.normal(size=(2, 3))
    grad = baselines.mc_grad_logits(batch, old, 1, logits, preds)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        fd = (baselines.mc_objective(batch, old, 1, baselines.softmax(logits + e, axis=1), preds)
              - baselines.mc_objective(batch, old, 1, baselines.softmax(logits - e, axis=1), preds)) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_gae_with_zero_lambda_is_td_error():
    game = random_game(1, 1, 2, [2], 0.9)
    pi = uniform_joint_policy(game)
    traj = sample_trajectories(game, pi, 8, 1, seed=0)[0]
    v = evaluate(game, pi).v
    adv = baselines.gae_advantages(traj, v, game.gamma, 0.0)
    nxt = np.append(traj.states[1:], traj.final_state)
    np.testing.assert_allclose(adv, traj.rewards + game.gamma * v[nxt] - v[traj.states], atol=1e-15)


def test_exact_mode_small_steps_do_not_decrease_return():
    for seed in range(10):
        game = random_game(seed, 2, 3, [2, 3], 0.9)
        rng = np.random.default_rng(seed)
        params = SoftmaxPolicyParams(tuple(rng.normal(size=(3, k)) for k in game.action_counts))
        cfg = Haa2cConfig(learning_rate=0.05, permutations=PermutationSampler(seed=seed))
        for k in range(10):
            j0 = evaluate(game, params.policy()).j
            params, _ = haa2c_step(game, params, cfg, k)
            assert evaluate(game, params.policy()).j >= j0 - 1e-12


def test_monte_carlo_mode_is_seeded():
    game, params, _, _ = _random_setup(4)
    cfg = Haa2cConfig(mode="monte_carlo", batch=4, horizon=8, critic="batch_mean")
    a, _ = haa2c_step(game, params, cfg, 0, seed=5)
    b, _ = haa2c_step(game, params, cfg, 0, seed=5)
    c, _ = haa2c_step(game, params, cfg, 0, seed=6)
    assert all(np.array_equal(x, y) for x, y in zip(a.logits, b.logits))
    assert any(not np.array_equal(x, y) for x, y in zip(a.logits, c.logits))


def test_invalid_haa2c_config():
    with pytest.raises(ValueError):
        Haa2cConfig(mode="offline")
    with pytest.raises(ValueError):
        Haa2cConfig(critic="neural")
    with pytest.raises(baselines.BaselineError):
        SoftmaxPolicyParams((np.array([[np.inf, 0.0]]),))


def test_brute_force_guard():
    game = random_game(0, 1, 8, [8], 0.5)
    with pytest.raises(baselines.BaselineError):
        brute_force_optimum(game)
