"""Finite cooperative Markov games and tabular joint policies.

Joint actions are indexed mixed-radix with agent 0 most significant, so a
``[n_states, n_joint]`` table reshapes (C order) into
``[n_states, A_0, ..., A_{n-1}]``.  Every tensor in the package relies on
this convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1
STOCHASTIC_TOL = 1e-12


class GameValidationError(ValueError):
    """A game or policy violates one of its structural invariants."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def encode_joint_action(actions: Sequence[int], action_counts: Sequence[int]) -> int:
    index = 0
    for a, k in zip(actions, action_counts):
        if not 0 <= a < k:
            raise ValueError(f"action {a} out of range for {k} actions")
        index = index * k + int(a)
    return index


def decode_joint_action(index: int, action_counts: Sequence[int]) -> tuple[int, ...]:
    if not 0 <= index < math.prod(action_counts):
        raise ValueError(f"joint index {index} out of range")
    return tuple(int(a) for a in np.unravel_index(index, tuple(action_counts)))


@dataclass(frozen=True, eq=False)
class MarkovGame:
    """Dense cooperative Markov game ``<N, S, A, r, P, gamma, d>``.

    ``transition`` has shape ``[S, J, S]`` and ``reward`` ``[S, J]`` where
    ``J`` is the number of joint actions.
    """

    n_agents: int
    n_states: int
    action_counts: tuple[int, ...]
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(k) for k in self.action_counts))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "initial", _frozen(self.initial))
        object.__setattr__(self, "gamma", float(self.gamma))
        self.validate()

    @property
    def n_joint(self) -> int:
        return math.prod(self.action_counts)

    @property
    def joint_shape(self) -> tuple[int, ...]:
        return (self.n_states, *self.action_counts)

    def validate(self) -> None:
        if self.n_agents < 1 or self.n_states < 1:
            raise GameValidationError("n_agents and n_states must be positive")
        if len(self.action_counts) != self.n_agents:
            raise GameValidationError(
                f"action_counts has {len(self.action_counts)} entries, expected {self.n_agents}"
            )
        if any(k < 1 for k in self.action_counts):
            raise GameValidationError("every action count must be positive")
        S, J = self.n_states, self.n_joint
        if self.transition.shape != (S, J, S):
            raise GameValidationError(f"transition shape {self.transition.shape}, expected {(S, J, S)}")
        if self.reward.shape != (S, J):
            raise GameValidationError(f"reward shape {self.reward.shape}, expected {(S, J)}")
        if self.initial.shape != (S,):
            raise GameValidationError(f"initial shape {self.initial.shape}, expected {(S,)}")
        if not 0.0 <= self.gamma < 1.0:
            raise GameValidationError(f"gamma {self.gamma} not in [0, 1)")
        if not np.all(np.isfinite(self.reward)):
            raise GameValidationError("rewards must be finite")
        bad = np.argwhere(self.transition < 0)
        if bad.size:
            s, j, t = bad[0]
            raise GameValidationError(f"negative transition probability at state {s}, joint action {j}, next state {t}")
        sums = self.transition.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > STOCHASTIC_TOL)
        if bad.size:
            s, j = bad[0]
            raise GameValidationError(
                f"transition row for state {s}, joint action {j} sums to {sums[s, j]!r}"
            )
        if np.any(self.initial <= 0):
            raise GameValidationError("initial distribution must be strictly positive")
        if abs(self.initial.sum() - 1.0) > STOCHASTIC_TOL:
            raise GameValidationError(f"initial distribution sums to {self.initial.sum()!r}")

    def reward_tensor(self) -> np.ndarray:
        return self.reward.reshape(self.joint_shape)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_agents": self.n_agents,
            "n_states": self.n_states,
            "action_counts": list(self.action_counts),
            "gamma": self.gamma,
            "initial": self.initial.tolist(),
            "transitions": self.transition.tolist(),
            "rewards": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MarkovGame":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise GameValidationError(f"unsupported schema_version {version!r}")
        missing = [k for k in ("n_agents", "n_states", "action_counts", "gamma", "initial",
                               "transitions", "rewards") if k not in doc]
        if missing:
            raise GameValidationError(f"missing fields: {', '.join(missing)}")
        try:
            return cls(
                n_agents=int(doc["n_agents"]),
                n_states=int(doc["n_states"]),
                action_counts=tuple(doc["action_counts"]),
                transition=np.asarray(doc["transitions"], dtype=float),
                reward=np.asarray(doc["rewards"], dtype=float),
                gamma=float(doc["gamma"]),
                initial=np.asarray(doc["initial"], dtype=float),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, GameValidationError):
                raise
            raise GameValidationError(f"malformed game document: {exc}") from exc


def load_game(path) -> MarkovGame:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GameValidationError(f"{path}: parse error: {exc}") from exc
    return MarkovGame.from_dict(doc)


def save_game(game: MarkovGame, path) -> None:
    Path(path).write_text(json.dumps(game.to_dict(), indent=1) + "\n")


def _single_state_game(rewards: np.ndarray, action_counts) -> MarkovGame:
    J = rewards.size
    return MarkovGame(
        n_agents=len(action_counts),
        n_states=1,
        action_counts=tuple(action_counts),
        transition=np.ones((1, J, 1)),
        reward=rewards.reshape(1, J),
        gamma=0.0,
        initial=np.ones(1),
    )


def build_prop1_game(n: int) -> MarkovGame:
    """Single-state binary game rewarding only ``(0^{n/2}, 1^{n/2})`` and its mirror."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be an even integer >= 2, got {n}")
    counts = (2,) * n
    half = n // 2
    rewards = np.zeros(2**n)
    rewards[encode_joint_action((0,) * half + (1,) * half, counts)] = 1.0
    rewards[encode_joint_action((1,) * half + (0,) * half, counts)] = 1.0
    return _single_state_game(rewards, counts)


def build_prop2_game() -> MarkovGame:
    """Two-agent coordination game with rewards r(0,0)=0, r(0,1)=r(1,0)=2, r(1,1)=-1."""
    return _single_state_game(np.array([0.0, 2.0, 2.0, -1.0]), (2, 2))


def random_game(
    seed: int,
    n_agents: int,
    n_states: int,
    action_counts: Sequence[int],
    gamma: float,
    reward_range: tuple[float, float] = (0.0, 1.0),
    concentration: float = 1.0,
) -> MarkovGame:
    """Seeded random game: symmetric-Dirichlet transitions, uniform rewards and start."""
    if n_agents < 1 or n_states < 1 or len(action_counts) != n_agents or min(action_counts) < 1:
        raise ValueError("invalid game dimensions")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma {gamma} not in [0, 1)")
    lo, hi = reward_range
    if hi < lo:
        raise ValueError("reward_range must be (low, high) with low <= high")
    rng = np.random.default_rng(seed)
    J = math.prod(action_counts)
    transition = rng.dirichlet(np.full(n_states, concentration), size=(n_states, J))
    # renormalise to keep row sums within the validation tolerance
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.uniform(lo, hi, size=(n_states, J))
    return MarkovGame(
        n_agents=n_agents,
        n_states=n_states,
        action_counts=tuple(action_counts),
        transition=transition,
        reward=reward,
        gamma=gamma,
        initial=np.full(n_states, 1.0 / n_states),
    )


def validate_agent_table(table: np.ndarray, n_states: int, n_actions: int, agent: int = 0) -> None:
    if table.shape != (n_states, n_actions):
        raise GameValidationError(
            f"agent {agent} policy shape {table.shape}, expected {(n_states, n_actions)}"
        )
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise GameValidationError(f"agent {agent} policy has negative or non-finite entries")
    sums = table.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_TOL)
    if bad.size:
        raise GameValidationError(f"agent {agent} policy row {bad[0]} sums to {sums[bad[0]]!r}")


@dataclass(frozen=True, eq=False)
class JointPolicy:
    """Product policy: one ``[n_states, A_i]`` simplex table per agent."""

    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(_frozen(t) for t in self.tables))
        n_states = self.tables[0].shape[0]
        for i, t in enumerate(self.tables):
            validate_agent_table(t, n_states, t.shape[1], i)

    @property
    def n_agents(self) -> int:
        return len(self.tables)

    def __getitem__(self, agent: int) -> np.ndarray:
        return self.tables[agent]

    def replace(self, agent: int, table: np.ndarray) -> "JointPolicy":
        tables = list(self.tables)
        tables[agent] = table
        return JointPolicy(tuple(tables))

    def check_game(self, game: MarkovGame) -> None:
        if self.n_agents != game.n_agents:
            raise GameValidationError(f"policy has {self.n_agents} agents, game has {game.n_agents}")
        counts = [t.shape[1] for t in self.tables]
        if counts != list(game.action_counts):
            raise GameValidationError(
                f"policy action_counts {counts} do not match game action_counts {list(game.action_counts)}"
            )
        for i, t in enumerate(self.tables):
            if t.shape != (game.n_states, game.action_counts[i]):
                raise GameValidationError(
                    f"agent {i} policy shape {t.shape}, expected {(game.n_states, game.action_counts[i])}"
                )

    def joint_probs(self) -> np.ndarray:
        """``[S, J]`` joint action probabilities (product over agents)."""
        out = np.ones((self.tables[0].shape[0], 1))
        for t in self.tables:
            out = (out[:, :, None] * t[:, None, :]).reshape(out.shape[0], -1)
        return out

    def allclose(self, other: "JointPolicy", atol: float = 0.0) -> bool:
        return all(np.allclose(a, b, rtol=0.0, atol=atol) for a, b in zip(self.tables, other.tables))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_states": int(self.tables[0].shape[0]),
            "action_counts": [int(t.shape[1]) for t in self.tables],
            "policies": [t.tolist() for t in self.tables],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "JointPolicy":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise GameValidationError(f"unsupported schema_version {doc.get('schema_version')!r}")
        try:
            tables = tuple(np.asarray(t, dtype=float) for t in doc["policies"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GameValidationError(f"malformed policy document: {exc}") from exc
        counts = doc.get("action_counts")
        if counts is not None and list(counts) != [t.shape[1] if t.ndim == 2 else -1 for t in tables]:
            raise GameValidationError("policy tables do not match declared action_counts")
        if any(t.ndim != 2 for t in tables):
            raise GameValidationError("every policy table must be a [n_states][n_actions] array")
        return cls(tables)


def load_policy(path) -> JointPolicy:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GameValidationError(f"{path}: parse error: {exc}") from exc
    return JointPolicy.from_dict(doc)


def save_policy(pi: JointPolicy, path) -> None:
    Path(path).write_text(json.dumps(pi.to_dict(), indent=1) + "\n")


def uniform_joint_policy(game: MarkovGame) -> JointPolicy:
    return JointPolicy(tuple(np.full((game.n_states, k), 1.0 / k) for k in game.action_counts))


def dirac_joint_policy(game: MarkovGame, actions) -> JointPolicy:
    """Deterministic joint policy.

    ``actions`` is either one action per agent (used at every state) or a
    ``[n_agents][n_states]`` nested list.
    """
    actions = np.asarray(actions, dtype=int)
    if actions.ndim == 1:
        actions = np.repeat(actions[:, None], game.n_states, axis=1)
    if actions.shape != (game.n_agents, game.n_states):
        raise ValueError(f"actions shape {actions.shape} incompatible with game")
    tables = []
    for i, k in enumerate(game.action_counts):
        row = actions[i]
        if np.any(row < 0) or np.any(row >= k):
            raise ValueError(f"agent {i} action out of range for {k} actions")
        t = np.zeros((game.n_states, k))
        t[np.arange(game.n_states), row] = 1.0
        tables.append(t)
    return JointPolicy(tuple(tables))


def random_joint_policy(game: MarkovGame, seed, concentration: float = 1.0) -> JointPolicy:
    """Strictly positive seeded policy with Dirichlet rows."""
    rng = np.random.default_rng(seed)
    tables = []
    for k in game.action_counts:
        t = rng.dirichlet(np.full(k, concentration), size=game.n_states)
        t = np.maximum(t, 1e-6)
        tables.append(t / t.sum(axis=1, keepdims=True))
    return JointPolicy(tuple(tables))
