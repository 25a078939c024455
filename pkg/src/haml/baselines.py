"""Contrast algorithms and trap demonstrations.

* :func:`naive_simultaneous_step` -- every agent greedily improves against the
  *old* policies of all others, all at once.
* :func:`shared_policy_optimum` -- best return when all agents must share one
  Bernoulli policy.
* :func:`haa2c_step` -- tabular softmax sequential advantage actor-critic in
  exact and Monte-Carlo modes.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import softmax

from haml.engine import PermutationSampler
from haml.exact_eval import EvalBundle, contract, evaluate, marginal_q
from haml.game_model import JointPolicy, MarkovGame, decode_joint_action

BRUTE_FORCE_LIMIT = 10**7


class BaselineError(RuntimeError):
    pass


def naive_simultaneous_step(game: MarkovGame, pi: JointPolicy) -> JointPolicy:
    """All agents take a greedy step against the old policies of everyone else."""
    ev = evaluate(game, pi)
    tables = []
    for i, k in enumerate(game.action_counts):
        q_i = marginal_q(game, ev, pi.tables, [i])
        best = np.argmax(q_i, axis=1)
        table = np.zeros((game.n_states, k))
        table[np.arange(game.n_states), best] = 1.0
        tables.append(table)
    return JointPolicy(tuple(tables))


def shared_return(game: MarkovGame, p: float) -> float:
    """J when every agent plays action 0 with probability ``p`` at every state."""
    table = np.tile([p, 1.0 - p], (game.n_states, 1))
    return evaluate(game, JointPolicy((table,) * game.n_agents)).j


def shared_policy_optimum(game: MarkovGame, grid_resolution: int = 1001) -> tuple[float, float]:
    """Grid search then golden-section refinement of the shared Bernoulli parameter."""
    if game.n_states != 1 or set(game.action_counts) != {2}:
        raise ValueError("shared optimum needs a single-state game with binary actions for every agent")
    grid = np.linspace(0.0, 1.0, grid_resolution)
    values = np.array([shared_return(game, p) for p in grid])
    b = int(np.argmax(values))
    lo, hi = grid[max(b - 1, 0)], grid[min(b + 1, grid_resolution - 1)]
    if lo < grid[b] < hi:
        res = optimize.minimize_scalar(lambda p: -shared_return(game, p), bracket=(lo, grid[b], hi),
                                       method="golden", tol=1e-10)
        p_star = float(res.x)
    else:
        p_star = float(grid[b])
    j_star = shared_return(game, p_star)
    if values[b] > j_star:
        p_star, j_star = float(grid[b]), float(values[b])
    return p_star, j_star


def brute_force_optimum(game: MarkovGame) -> tuple[JointPolicy, float]:
    """Best deterministic joint policy by exhaustive enumeration."""
    count = game.n_joint ** game.n_states
    if count > BRUTE_FORCE_LIMIT:
        raise BaselineError(f"{count} deterministic joint policies exceed the limit {BRUTE_FORCE_LIMIT}")
    best_j, best_pi = -math.inf, None
    for choice in itertools.product(range(game.n_joint), repeat=game.n_states):
        per_state = [decode_joint_action(c, game.action_counts) for c in choice]
        tables = []
        for i, k in enumerate(game.action_counts):
            t = np.zeros((game.n_states, k))
            t[np.arange(game.n_states), [a[i] for a in per_state]] = 1.0
            tables.append(t)
        pi = JointPolicy(tuple(tables))
        j = evaluate(game, pi).j
        if j > best_j:
            best_j, best_pi = j, pi
    return best_pi, best_j


# -- trajectories ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    joint_actions: np.ndarray
    rewards: np.ndarray
    final_state: int
    seed: int
    index: int

    @property
    def horizon(self) -> int:
        return len(self.rewards)

    def discounted_return(self, gamma: float) -> float:
        return float(self.rewards @ gamma ** np.arange(self.horizon))


def sample_trajectories(game: MarkovGame, pi: JointPolicy, horizon: int, count: int,
                        seed: int) -> list[Trajectory]:
    """``count`` rollouts of length ``horizon``; trajectory ``b`` uses the ``b``-th spawned seed."""
    if horizon < 1 or count < 1:
        raise ValueError("horizon and count must be >= 1")
    children = np.random.SeedSequence(seed).spawn(count)
    cum_pol = [np.cumsum(t, axis=1) for t in pi.tables]
    cum_p = np.cumsum(game.transition, axis=2)
    cum_d = np.cumsum(game.initial)
    out = []
    for b, child in enumerate(children):
        rng = np.random.default_rng(child)
        u = rng.random((horizon + 1, game.n_agents + 1))
        states = np.empty(horizon, dtype=int)
        actions = np.empty((horizon, game.n_agents), dtype=int)
        joint = np.empty(horizon, dtype=int)
        rewards = np.empty(horizon)
        s = min(int(np.searchsorted(cum_d, u[0, 0], side="right")), game.n_states - 1)
        for t in range(horizon):
            states[t] = s
            for i in range(game.n_agents):
                actions[t, i] = min(int(np.searchsorted(cum_pol[i][s], u[t, 1 + i], side="right")),
                                    game.action_counts[i] - 1)
            joint[t] = np.ravel_multi_index(tuple(actions[t]), game.action_counts)
            rewards[t] = game.reward[s, joint[t]]
            s = min(int(np.searchsorted(cum_p[s, joint[t]], u[t + 1, 0], side="right")), game.n_states - 1)
        out.append(Trajectory(states, actions, joint, rewards, s, seed, b))
    return out


def write_trajectories_csv(trajectories: Sequence[Trajectory], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        n = trajectories[0].actions.shape[1]
        writer.writerow(["trajectory", "step", "state", *[f"action_{i}" for i in range(n)], "reward"])
        for b, traj in enumerate(trajectories):
            for t in range(traj.horizon):
                writer.writerow([b, t, int(traj.states[t]), *map(int, traj.actions[t]),
                                 format(float(traj.rewards[t]), ".17g")])


def visit_frequencies(game: MarkovGame, trajectories: Sequence[Trajectory]) -> np.ndarray:
    counts = np.zeros(game.n_states)
    for traj in trajectories:
        counts += np.bincount(traj.states, minlength=game.n_states)
    return counts / counts.sum()


def undiscounted_occupancy(game: MarkovGame, pi: JointPolicy, horizon: int) -> np.ndarray:
    """Expected fraction of the first ``horizon`` steps spent in each state."""
    probs = pi.joint_probs()
    p_pi = np.einsum("sj,sjt->st", probs, game.transition)
    dist, total = game.initial.copy(), np.zeros(game.n_states)
    for _ in range(horizon):
        total += dist
        dist = dist @ p_pi
    return total / horizon


# -- HAA2C ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SoftmaxPolicyParams:
    logits: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "logits", tuple(np.array(l, dtype=float) for l in self.logits))
        if not all(np.all(np.isfinite(l)) for l in self.logits):
            raise BaselineError("logits must be finite")

    def policy(self) -> JointPolicy:
        return JointPolicy(tuple(softmax(l, axis=1) for l in self.logits))

    @classmethod
    def zeros(cls, game: MarkovGame) -> "SoftmaxPolicyParams":
        return cls(tuple(np.zeros((game.n_states, k)) for k in game.action_counts))


@dataclass(frozen=True)
class Haa2cConfig:
    mode: str = "exact"
    mini_epochs: int = 5
    learning_rate: float = 0.5
    gae_lambda: float = 0.95
    batch: int = 16
    horizon: int = 32
    critic: str = "exact"
    backtracking: bool = True
    permutations: PermutationSampler = field(default_factory=PermutationSampler)

    def __post_init__(self):
        if self.mode not in ("exact", "monte_carlo"):
            raise ValueError(f"unknown HAA2C mode {self.mode!r}")
        if self.critic not in ("exact", "batch_mean"):
            raise ValueError(f"unknown critic {self.critic!r}")
        if self.mini_epochs < 1 or self.batch < 1 or self.horizon < 1 or self.learning_rate <= 0:
            raise ValueError("invalid HAA2C parameters")


@dataclass(frozen=True, eq=False)
class SequentialObjective:
    """Exact per-agent HAA2C objective with old advantages frozen.

    ``weights[s]`` is the normalised visitation of the old policy and
    ``coef[s, a]`` the expectation of the old joint advantage given the agent
    plays ``a``, predecessors play their new tables and successors their old.
    """

    weights: np.ndarray
    coef: np.ndarray
    old: np.ndarray

    def value(self, table: np.ndarray) -> float:
        return float(self.weights @ np.einsum("sa,sa->s", table, self.coef))

    def value_logits(self, logits: np.ndarray) -> float:
        return self.value(softmax(logits, axis=1))

    def grad_logits(self, logits: np.ndarray) -> np.ndarray:
        p = softmax(logits, axis=1)
        centred = self.coef - np.einsum("sa,sa->s", p, self.coef)[:, None]
        return self.weights[:, None] * p * centred


def exact_objective(game: MarkovGame, ev: EvalBundle, old: JointPolicy, agent: int,
                    new_predecessors: Sequence[tuple[int, np.ndarray]]) -> SequentialObjective:
    tables = list(old.tables)
    for j, t in new_predecessors:
        tables[j] = t
    adv = (ev.q - ev.v[:, None]).reshape(game.joint_shape)
    coef = contract(adv, tables, [agent], game.n_agents)
    return SequentialObjective(ev.rho_normalized, coef, old.tables[agent])


def importance_weighted_objective(game: MarkovGame, ev: EvalBundle, old: JointPolicy, agent: int,
                                  candidate: np.ndarray,
                                  new_predecessors: Sequence[tuple[int, np.ndarray]]) -> float:
    """Joint-ratio form: expectation under the old joint policy of ratio times joint advantage."""
    probs_old = old.joint_probs().reshape(game.joint_shape)
    ratio = np.ones(game.joint_shape)
    for j, t in [*new_predecessors, (agent, candidate)]:
        shape = [1] * ratio.ndim
        shape[0], shape[1 + j] = game.n_states, game.action_counts[j]
        ratio = ratio * (t / old.tables[j]).reshape(shape)
    adv = (ev.q - ev.v[:, None]).reshape(game.joint_shape)
    per_state = (probs_old * ratio * adv).reshape(game.n_states, -1).sum(axis=1)
    return float(ev.rho_normalized @ per_state)


def direct_objective(game: MarkovGame, ev: EvalBundle, old: JointPolicy, agent: int,
                     candidate: np.ndarray, new_predecessors: Sequence[tuple[int, np.ndarray]]) -> float:
    """Expectation of the joint advantage with predecessors and the agent drawn from their new tables."""
    tables = list(old.tables)
    for j, t in [*new_predecessors, (agent, candidate)]:
        tables[j] = t
    probs = JointPolicy(tuple(tables)).joint_probs()
    return float(ev.rho_normalized @ np.einsum("sj,sj->s", probs, ev.q - ev.v[:, None]))


def gae_advantages(traj: Trajectory, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """GAE over one truncated trajectory, bootstrapping from ``values`` at the final state."""
    next_values = np.append(values[traj.states[1:]], values[traj.final_state])
    deltas = traj.rewards + gamma * next_values - values[traj.states]
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        out[t] = acc
    return out


def batch_mean_values(game: MarkovGame, trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Per-state mean of truncated discounted returns-to-go in the batch."""
    totals, counts = np.zeros(game.n_states), np.zeros(game.n_states)
    for traj in trajectories:
        acc = 0.0
        for t in range(traj.horizon - 1, -1, -1):
            acc = traj.rewards[t] + game.gamma * acc
            totals[traj.states[t]] += acc
            counts[traj.states[t]] += 1
    return np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Flattened on-policy samples: states, per-agent actions, advantage estimates."""

    states: np.ndarray
    actions: np.ndarray
    advantages: np.ndarray
    probabilities: np.ndarray | None = None

    def mean(self, values: np.ndarray) -> float:
        if self.probabilities is None:
            return float(values.mean())
        return float(self.probabilities @ values)


def mc_objective(batch: SampleBatch, old: JointPolicy, agent: int, candidate: np.ndarray,
                 new_predecessors: Sequence[tuple[int, np.ndarray]]) -> float:
    """Sample form of the objective: mean of joint ratio times advantage estimate."""
    return batch.mean(_mc_weights(batch, old, new_predecessors)
                      * _ratio(candidate, old.tables[agent], batch, agent) * batch.advantages)


def _ratio(new: np.ndarray, old: np.ndarray, batch: SampleBatch, agent: int) -> np.ndarray:
    a = batch.actions[:, agent]
    return new[batch.states, a] / old[batch.states, a]


def _mc_weights(batch: SampleBatch, old: JointPolicy, new_predecessors) -> np.ndarray:
    w = np.ones(len(batch.states))
    for j, t in new_predecessors:
        w = w * _ratio(t, old.tables[j], batch, j)
    return w


def mc_grad_logits(batch: SampleBatch, old: JointPolicy, agent: int, logits: np.ndarray,
                   new_predecessors) -> np.ndarray:
    p = softmax(logits, axis=1)
    m = _mc_weights(batch, old, new_predecessors) * batch.advantages
    ratio = _ratio(p, old.tables[agent], batch, agent)
    s, a = batch.states, batch.actions[:, agent]
    weights = np.full(len(s), 1.0 / len(s)) if batch.probabilities is None else batch.probabilities
    coeff = weights * m * ratio
    grad = np.zeros_like(logits)
    np.add.at(grad, (s, a), coeff)
    np.add.at(grad, s, -coeff[:, None] * p[s])
    return grad


def build_batch(game: MarkovGame, pi: JointPolicy, cfg: Haa2cConfig, seed: int,
                values: np.ndarray | None = None) -> SampleBatch:
    trajectories = sample_trajectories(game, pi, cfg.horizon, cfg.batch, seed)
    if cfg.critic == "exact" or values is not None:
        values = evaluate(game, pi).v if values is None else values
    else:
        values = batch_mean_values(game, trajectories)
    adv = [gae_advantages(t, values, game.gamma, cfg.gae_lambda) for t in trajectories]
    return SampleBatch(
        states=np.concatenate([t.states for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        advantages=np.concatenate(adv),
    )


def enumerate_one_step_batch(game: MarkovGame, pi: JointPolicy) -> SampleBatch:
    """Every length-1 trajectory with its probability; advantages are ``r - V(s)``.

    Only meaningful for ``gamma == 0`` where the one-step estimate is exact.
    """
    v = evaluate(game, pi).v
    probs = pi.joint_probs()
    states, actions, adv, weights = [], [], [], []
    for s in range(game.n_states):
        for j in range(game.n_joint):
            states.append(s)
            actions.append(decode_joint_action(j, game.action_counts))
            adv.append(game.reward[s, j] - v[s])
            weights.append(game.initial[s] * probs[s, j])
    return SampleBatch(np.array(states), np.array(actions), np.array(adv), np.array(weights))


def _ascend(value_fn, grad_fn, logits: np.ndarray, cfg: Haa2cConfig) -> np.ndarray:
    current = value_fn(logits)
    for _ in range(cfg.mini_epochs):
        grad = grad_fn(logits)
        if not np.all(np.isfinite(grad)):
            raise BaselineError("non-finite gradient")
        step = cfg.learning_rate
        trial = logits + step * grad
        if cfg.backtracking:
            for _ in range(30):
                if value_fn(trial) >= current:
                    break
                step *= 0.5
                trial = logits + step * grad
            else:
                trial = logits
        logits = trial
        current = value_fn(logits)
    return logits


def haa2c_step(game: MarkovGame, params: SoftmaxPolicyParams, cfg: Haa2cConfig, k: int = 0,
               seed: int = 0) -> tuple[SoftmaxPolicyParams, tuple[int, ...]]:
    """One sequential HAA2C update; returns the new parameters and the permutation used."""
    old = params.policy()
    perm = cfg.permutations.draw(k, game.n_agents)
    logits = [l.copy() for l in params.logits]
    preds: list[tuple[int, np.ndarray]] = []
    if cfg.mode == "exact":
        ev = evaluate(game, old)
        for agent in perm:
            obj = exact_objective(game, ev, old, agent, preds)
            logits[agent] = _ascend(obj.value_logits, obj.grad_logits, logits[agent], cfg)
            preds.append((agent, softmax(logits[agent], axis=1)))
    else:
        batch = build_batch(game, old, cfg, seed=int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
        for agent in perm:
            fixed = list(preds)
            logits[agent] = _ascend(
                lambda l, a=agent, f=fixed: mc_objective(batch, old, a, softmax(l, axis=1), f),
                lambda l, a=agent, f=fixed: mc_grad_logits(batch, old, a, l, f),
                logits[agent], cfg,
            )
            preds.append((agent, softmax(logits[agent], axis=1)))
    return SoftmaxPolicyParams(tuple(logits)), perm
