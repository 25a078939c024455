import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from strategies import games_and_policies
from haml.drift import DriftUndefinedError, HadfSpec, StateWeighting
from haml.exact_eval import evaluate
from haml.game_model import JointPolicy, MarkovGame, build_prop2_game, random_game, random_joint_policy
from haml.mirror import (
    expected_hamo,
    hamo_state,
    happo_identity_residual,
    happo_objective,
    happo_terms,
    make_context,
)

SPECS = [HadfSpec("trivial"), HadfSpec("kl_penalty", tau=0.5), HadfSpec("clip_relu", epsilon=0.3),
         HadfSpec("squared_l2", tau=1.5)]


def prop2_context(p0, agent=0, hadf=HadfSpec("trivial"), preds=()):
    game = build_prop2_game()
    pi = JointPolicy((np.array([[p0, 1 - p0]]),) * 2)
    ev = evaluate(game, pi)
    return make_context(game, ev, pi, agent, preds, hadf, np.ones(1))


@given(games_and_policies(), st.integers(0, 2**31 - 1))
def test_old_candidate_scores_zero(gp, seed):
    game, pi = gp
    ev = evaluate(game, pi)
    rng = np.random.default_rng(seed)
    agent = int(rng.integers(game.n_agents))
    preds = [(j, rng.dirichlet(np.ones(game.action_counts[j]), size=game.n_states))
             for j in range(game.n_agents) if j != agent]
    beta = StateWeighting().resolve(game, ev)
    for hadf in SPECS:
        ctx = make_context(game, ev, pi, agent, preds, hadf, beta, StateWeighting("uniform").resolve(game, ev))
        for s in range(game.n_states):
            assert abs(hamo_state(ctx, pi.tables[agent], s)) <= 1e-12
        assert abs(expected_hamo(ctx, pi.tables[agent])) <= 1e-12


def test_prop2_dirac_candidate():
    # co-player at 0.7: Q(1) = 0.7*2 + 0.3*(-1) = 1.1 and V = 0.75
    ctx = prop2_context(0.7)
    assert expected_hamo(ctx, np.array([[0.0, 1.0]])) == pytest.approx(0.35, abs=1e-15)
    # co-player uniform: Q(1) = 0.5*2 + 0.5*(-1) = 0.5
    assert expected_hamo(prop2_context(0.5), np.array([[0.0, 1.0]])) == pytest.approx(-0.25, abs=1e-15)


def test_nu_equal_beta_cancels():
    game = random_game(4, 2, 3, [3, 2], 0.9)
    pi = random_joint_policy(game, 4)
    ev = evaluate(game, pi)
    beta = StateWeighting().resolve(game, ev)
    ctx = make_context(game, ev, pi, 0, [], HadfSpec("kl_penalty", tau=0.8), beta)
    cand = random_joint_policy(game, 5).tables[0]
    assert np.array_equal(ctx.drift_scale, np.ones(3))
    np.testing.assert_allclose(ctx.hamo_rows(cand), ctx.advantage_rows(cand) - ctx.drift_rows(cand), atol=0)
    nu = np.array([0.5, 0.25, 0.25])
    scaled = make_context(game, ev, pi, 0, [], HadfSpec("kl_penalty", tau=0.8), beta, nu)
    np.testing.assert_allclose(scaled.hamo_rows(cand),
                               ctx.advantage_rows(cand) - nu / beta * ctx.drift_rows(cand), rtol=1e-14)


def test_single_state_expected_equals_state():
    game = random_game(5, 3, 1, [2, 2, 3], 0.5)
    pi = random_joint_policy(game, 5)
    ev = evaluate(game, pi)
    ctx = make_context(game, ev, pi, 2, [(0, pi.tables[0][:, ::-1])], HadfSpec("clip_relu"), np.ones(1))
    cand = random_joint_policy(game, 6).tables[2]
    assert expected_hamo(ctx, cand) == pytest.approx(hamo_state(ctx, cand, 0), abs=1e-15)


@given(games_and_policies(), st.integers(0, 2**31 - 1))
def test_trivial_hamo_matches_enumerated_advantage(gp, seed):
    game, pi = gp
    ev = evaluate(game, pi)
    q = oracles.joint_q(game, ev.v)
    rng = np.random.default_rng(seed)
    agent = game.n_agents - 1
    cand = rng.dirichlet(np.ones(game.action_counts[agent]), size=game.n_states)
    beta = StateWeighting().resolve(game, ev)
    ctx = make_context(game, ev, pi, agent, [], HadfSpec("trivial"), beta)
    ref = sum(beta[s] * sum(cand[s, a] * (oracles.subset_q(game, pi.tables, q, s, [agent], [a]) - ev.v[s])
                            for a in range(game.action_counts[agent])) for s in range(game.n_states))
    assert expected_hamo(ctx, cand) == pytest.approx(ref, abs=1e-10)


def test_trivial_hamo_with_predecessor_matches_enumeration():
    game = random_game(8, 3, 2, [2, 3, 2], 0.9)
    pi = random_joint_policy(game, 8)
    ev = evaluate(game, pi)
    q = oracles.joint_q(game, ev.v)
    new0 = random_joint_policy(game, 9).tables[0]
    cand = random_joint_policy(game, 10).tables[2]
    ctx = make_context(game, ev, pi, 2, [(0, new0)], HadfSpec("trivial"), np.array([0.4, 0.6]))
    ref = 0.0
    for s, b in enumerate([0.4, 0.6]):
        for a0 in range(2):
            q0 = oracles.subset_q(game, pi.tables, q, s, [0], [a0])
            for a in range(2):
                ref += b * new0[s, a0] * cand[s, a] * (oracles.subset_q(game, pi.tables, q, s, [0, 2], [a0, a]) - q0)
    assert expected_hamo(ctx, cand) == pytest.approx(ref, abs=1e-12)


def test_happo_worked_instance():
    objective, expected, relu = happo_terms([0.5, 0.5], [0.8, 0.2], [[1.0, -1.0]], [1.0], 0.2)
    assert objective == pytest.approx(0.5 * 1.2 + 0.5 * -0.8, abs=1e-15)
    assert expected == pytest.approx(0.6) and relu == pytest.approx(0.4)
    assert objective == pytest.approx(0.2, abs=1e-15)


def test_happo_context_forms():
    game = MarkovGame(1, 1, (2,), np.ones((1, 2, 1)), np.array([[1.0, -1.0]]), 0.0, np.ones(1))
    pi = JointPolicy((np.full((1, 2), 0.5),))
    ctx = make_context(game, evaluate(game, pi), pi, 0, [], HadfSpec("clip_relu", epsilon=0.2), np.ones(1))
    cand = np.array([[0.8, 0.2]])
    assert happo_objective(ctx, cand, 0) == pytest.approx(0.2, abs=1e-15)
    assert happo_identity_residual(ctx, cand, 0) <= 1e-15


def test_happo_candidate_equals_old():
    game = random_game(2, 2, 2, [2, 3], 0.9)
    pi = random_joint_policy(game, 2)
    ev = evaluate(game, pi)
    pred = random_joint_policy(game, 3).tables[0]
    ctx = make_context(game, ev, pi, 1, [(0, pred)], HadfSpec("clip_relu"), np.full(2, 0.5))
    for s in range(2):
        expected = float(ctx.seq.weights[s] @ ctx.seq.joint_adv[s] @ pi.tables[1][s])
        assert happo_objective(ctx, pi.tables[1], s) == pytest.approx(expected, abs=1e-14)
        assert happo_identity_residual(ctx, pi.tables[1], s) <= 1e-14
        for p in range(2):
            assert happo_identity_residual(ctx, random_joint_policy(game, 4 + p).tables[1], s, pred_action=p) <= 1e-12


@given(st.integers(0, 2**31 - 1))
def test_happo_identity_random(seed):
    rng = np.random.default_rng(seed)
    k, preds = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    old = 0.9 * rng.dirichlet(np.ones(k)) + 0.1 / k
    cand = rng.dirichlet(np.ones(k))
    adv = rng.normal(scale=5.0, size=(preds, k))
    w = rng.dirichlet(np.ones(preds))
    o, e, r = happo_terms(old, cand, adv, w, float(rng.uniform(0.05, 0.95)))
    assert abs(o - (e - r)) <= 1e-10
    assert r >= 0.0


def test_happo_requires_positive_old():
    with pytest.raises(DriftUndefinedError):
        happo_terms([1.0, 0.0], [0.5, 0.5], [[1.0, 1.0]], [1.0], 0.2)


def test_context_rejects_agent_among_predecessors():
    ctx_args = prop2_context(0.5)
    with pytest.raises(ValueError):
        make_context(ctx_args.game, ctx_args.ev, ctx_args.pi, 0, [(0, np.array([[1.0, 0.0]]))],
                     HadfSpec(), np.ones(1))
