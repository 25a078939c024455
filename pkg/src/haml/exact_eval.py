"""Exact policy evaluation by dense linear algebra.

All multi-agent quantities are obtained by contracting the joint tensor
``[S, A_0, ..., A_{n-1}]`` against per-agent policy tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from haml.game_model import JointPolicy, MarkovGame


@dataclass(frozen=True, eq=False)
class EvalBundle:
    v: np.ndarray
    q: np.ndarray
    rho: np.ndarray
    j: float
    gamma: float

    @property
    def rho_normalized(self) -> np.ndarray:
        return (1.0 - self.gamma) * self.rho


@dataclass(frozen=True)
class BestResponse:
    agent: int
    policy: np.ndarray
    value: float


def _policy_matrices(game: MarkovGame, pi: JointPolicy):
    probs = pi.joint_probs()
    r_pi = np.einsum("sj,sj->s", probs, game.reward)
    p_pi = np.einsum("sj,sjt->st", probs, game.transition)
    return r_pi, p_pi


def evaluate(game: MarkovGame, pi: JointPolicy) -> EvalBundle:
    """V, joint Q, discounted visitation and J for ``pi`` via one LU factorisation."""
    pi.check_game(game)
    r_pi, p_pi = _policy_matrices(game, pi)
    system = np.eye(game.n_states) - game.gamma * p_pi
    lu = linalg.lu_factor(system, check_finite=False)
    assert np.all(np.isfinite(lu[0])) and np.min(np.abs(np.diag(lu[0]))) > 0.0, "singular system"
    v = linalg.lu_solve(lu, r_pi, check_finite=False)
    rho = linalg.lu_solve(lu, game.initial, trans=1, check_finite=False)
    q = game.reward + game.gamma * game.transition @ v
    return EvalBundle(v=v, q=q, rho=rho, j=float(game.initial @ v), gamma=game.gamma)


def contract(tensor: np.ndarray, tables: Mapping[int, np.ndarray] | Sequence[np.ndarray],
             keep: Sequence[int], n_agents: int) -> np.ndarray:
    """Marginalise agent axes not in ``keep`` under their state-conditioned tables.

    ``tensor`` has axes ``[S, A_0, ..., A_{n-1}, *trailing]``; the result keeps
    ``[S, *(A_k for k in sorted(keep)), *trailing]``.
    """
    keep = set(keep)
    out = tensor
    # contract from the last agent so earlier axis positions stay valid
    for agent in range(n_agents - 1, -1, -1):
        if agent in keep:
            continue
        axis = 1 + agent
        table = tables[agent]
        shape = [1] * out.ndim
        shape[0] = table.shape[0]
        shape[axis] = table.shape[1]
        out = (out * table.reshape(shape)).sum(axis=axis)
    return out


def _q_tensor(game: MarkovGame, ev: EvalBundle) -> np.ndarray:
    return ev.q.reshape(game.joint_shape)


def marginal_q(game: MarkovGame, ev: EvalBundle, tables, subset: Sequence[int]) -> np.ndarray:
    """``Q^{subset}`` for all states and subset actions, axes in the given subset order."""
    subset = list(subset)
    if len(set(subset)) != len(subset):
        raise ValueError(f"duplicate agents in {subset}")
    t = contract(_q_tensor(game, ev), tables, subset, game.n_agents)
    order = sorted(subset)
    return np.moveaxis(t, [1 + order.index(a) for a in subset], range(1, 1 + len(subset)))


def multi_agent_q(game, ev: EvalBundle, pi: JointPolicy, s: int,
                  subset: Sequence[int], actions: Sequence[int]) -> float:
    """Q^{subset}(s, actions) with the remaining agents drawn from ``pi``."""
    if len(actions) != len(subset):
        raise ValueError("one action per subset agent required")
    t = marginal_q(game, ev, pi.tables, subset)
    return float(t[(s, *actions)])


def multi_agent_advantage(game, ev: EvalBundle, pi: JointPolicy, s: int,
                          predecessors: Sequence[int], pred_actions: Sequence[int],
                          subset: Sequence[int], actions: Sequence[int]) -> float:
    if set(predecessors) & set(subset):
        raise ValueError("predecessors and subset must be disjoint")
    both = multi_agent_q(game, ev, pi, s, [*predecessors, *subset], [*pred_actions, *actions])
    return both - multi_agent_q(game, ev, pi, s, predecessors, pred_actions)


def check_advantage_decomposition(game, pi: JointPolicy, s: int, permutation: Sequence[int],
                                  actions: Sequence[int], ev: EvalBundle | None = None) -> float:
    """|A^{i_{1:m}}(s, a) - sum_j A^{i_j}(s, a^{i_{1:j-1}}, a^{i_j})|."""
    ev = evaluate(game, pi) if ev is None else ev
    perm, actions = list(permutation), list(actions)
    lhs = multi_agent_advantage(game, ev, pi, s, [], [], perm, actions)
    rhs = sum(
        multi_agent_advantage(game, ev, pi, s, perm[:j], actions[:j], [perm[j]], [actions[j]])
        for j in range(len(perm))
    )
    return abs(lhs - rhs)


def decomposition_residuals(game, pi: JointPolicy, permutation: Sequence[int],
                            ev: EvalBundle | None = None) -> np.ndarray:
    """Advantage-decomposition residuals for every state and every action tuple of ``permutation``."""
    ev = evaluate(game, pi) if ev is None else ev
    perm = list(permutation)
    m = len(perm)
    v = ev.v.reshape((-1,) + (1,) * m)
    lhs = marginal_q(game, ev, pi.tables, perm) - v
    rhs = np.zeros_like(lhs)
    for j in range(m):
        upper = marginal_q(game, ev, pi.tables, perm[: j + 1])
        lower = marginal_q(game, ev, pi.tables, perm[:j])
        term = upper - lower[(...,) + (None,)]
        rhs = rhs + term.reshape(term.shape + (1,) * (m - j - 1))
    return np.abs(lhs - rhs)


@dataclass(frozen=True, eq=False)
class SequentialAdvantage:
    """Advantage tensors of one agent given ordered predecessors' updated tables.

    ``weights[s, p]`` is the predecessors' joint probability of their joint
    action ``p`` (mixed radix in predecessor order), ``joint_adv[s, p, a]`` is
    ``A^{pred + agent}(s, p, a)`` and ``agent_adv[s, p, a]`` is
    ``A^{agent}(s, p, a)``, both for the frozen old joint policy.
    """

    weights: np.ndarray
    joint_adv: np.ndarray
    agent_adv: np.ndarray

    @cached_property
    def expected_adv(self) -> np.ndarray:
        """``[S, A_i]`` expectation of ``agent_adv`` over predecessor actions."""
        return np.einsum("sp,spa->sa", self.weights, self.agent_adv)


def sequential_advantage(game: MarkovGame, ev: EvalBundle, pi: JointPolicy, agent: int,
                         predecessors: Sequence[tuple[int, np.ndarray]] = ()) -> SequentialAdvantage:
    pred_agents = [j for j, _ in predecessors]
    if agent in pred_agents or len(set(pred_agents)) != len(pred_agents):
        raise ValueError("predecessors must be distinct and exclude the agent")
    S = game.n_states
    q_joint = marginal_q(game, ev, pi.tables, [*pred_agents, agent])
    q_joint = q_joint.reshape(S, -1, game.action_counts[agent])
    weights = np.ones((S, 1))
    for _, table in predecessors:
        weights = (weights[:, :, None] * table[:, None, :]).reshape(S, -1)
    q_pred = np.einsum("spa,sa->sp", q_joint, pi.tables[agent])
    return SequentialAdvantage(
        weights=weights,
        joint_adv=q_joint - ev.v[:, None, None],
        agent_adv=q_joint - q_pred[:, :, None],
    )


def induced_mdp(game: MarkovGame, pi: JointPolicy, agent: int):
    """Single-agent reward ``[S, A_i]`` and kernel ``[S, A_i, S]`` with others fixed."""
    r = contract(game.reward_tensor(), pi.tables, [agent], game.n_agents)
    p = contract(game.transition.reshape(*game.joint_shape, game.n_states),
                 pi.tables, [agent], game.n_agents)
    return r, p


def solve_mdp(r: np.ndarray, p: np.ndarray, gamma: float, v0: np.ndarray | None = None,
              max_iterations: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal values and greedy actions of a finite MDP by policy iteration.

    The first policy is greedy with respect to ``v0`` (zeros by default).  A
    state switches action only on a strict gain above a relative ``1e-13``,
    so the loop terminates and the returned values are those of an exact
    linear solve.
    """
    S = r.shape[0]
    v = np.zeros(S) if v0 is None else np.asarray(v0, dtype=float)
    idx = np.arange(S)
    actions = np.argmax(r + gamma * p @ v, axis=1)
    for _ in range(max_iterations):
        v = np.linalg.solve(np.eye(S) - gamma * p[idx, actions], r[idx, actions])
        q = r + gamma * p @ v
        best = np.argmax(q, axis=1)
        improve = q[idx, best] > q[idx, actions] + 1e-13 * (1.0 + np.abs(v))
        if not improve.any():
            return v, actions
        actions = np.where(improve, best, actions)
    raise RuntimeError("policy iteration did not terminate")


def best_response(game: MarkovGame, pi: JointPolicy, agent: int,
                  ev: EvalBundle | None = None) -> BestResponse:
    if not 0 <= agent < game.n_agents:
        raise ValueError(f"agent {agent} out of range")
    r, p = induced_mdp(game, pi, agent)
    v0 = None if ev is None else ev.v
    v, actions = solve_mdp(r, p, game.gamma, v0=v0)
    table = np.zeros((game.n_states, game.action_counts[agent]))
    table[np.arange(game.n_states), actions] = 1.0
    return BestResponse(agent=agent, policy=table, value=float(game.initial @ v))


def nash_gap(game: MarkovGame, pi: JointPolicy, ev: EvalBundle | None = None) -> float:
    """Largest unilateral gain in J available to any single agent."""
    ev = evaluate(game, pi) if ev is None else ev
    return max(best_response(game, pi, i, ev).value - ev.j for i in range(game.n_agents))


def joint_action_count(game: MarkovGame, agents: Sequence[int]) -> int:
    return math.prod(game.action_counts[a] for a in agents)
