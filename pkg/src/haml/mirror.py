"""Heterogeneous-agent mirror operator and the clipped-surrogate identity.

All expectations are exact enumerations over predecessor joint actions and
the agent's own actions; nothing here samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from haml import drift as _drift
from haml.drift import HadfSpec
from haml.exact_eval import EvalBundle, SequentialAdvantage, sequential_advantage
from haml.game_model import JointPolicy, MarkovGame


@dataclass(frozen=True, eq=False)
class HamoContext:
    """Frozen inputs of one agent's mirror step.

    ``pi`` is the old joint policy whose advantages are used; ``predecessors``
    holds ``(agent, updated_table)`` pairs in update order; ``beta`` and
    ``nu`` are resolved state distributions.
    """

    game: MarkovGame
    ev: EvalBundle
    pi: JointPolicy
    agent: int
    predecessors: tuple[tuple[int, np.ndarray], ...]
    hadf: HadfSpec
    beta: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "predecessors", tuple(self.predecessors))
        if self.agent in [j for j, _ in self.predecessors]:
            raise ValueError("predecessors must exclude the updating agent")
        if np.any(self.beta <= 0):
            raise ValueError("beta must be strictly positive")

    @cached_property
    def seq(self) -> SequentialAdvantage:
        return sequential_advantage(self.game, self.ev, self.pi, self.agent, self.predecessors)

    @property
    def old(self) -> np.ndarray:
        return self.pi.tables[self.agent]

    @cached_property
    def drift_scale(self) -> np.ndarray:
        return self.nu / self.beta

    def advantage_rows(self, cand: np.ndarray) -> np.ndarray:
        """``E_{pred ~ new, a ~ cand}[A^i(s, pred, a)]`` for every state."""
        return np.einsum("sa,sa->s", cand, self.seq.expected_adv)

    def drift_rows(self, cand: np.ndarray) -> np.ndarray:
        return _drift.drift_rows(self.hadf, self.old, cand, self.seq)

    def hamo_rows(self, cand: np.ndarray) -> np.ndarray:
        return self.advantage_rows(cand) - self.drift_scale * self.drift_rows(cand)


def make_context(game: MarkovGame, ev: EvalBundle, pi: JointPolicy, agent: int,
                 predecessors: Sequence[tuple[int, np.ndarray]], hadf: HadfSpec,
                 beta: np.ndarray, nu: np.ndarray | None = None) -> HamoContext:
    beta = np.asarray(beta, dtype=float)
    nu = beta if nu is None else np.asarray(nu, dtype=float)
    return HamoContext(game, ev, pi, agent, tuple(predecessors), hadf, beta, nu)


def hamo_state(ctx: HamoContext, candidate: np.ndarray, s: int) -> float:
    return float(ctx.hamo_rows(np.asarray(candidate, dtype=float))[s])


def expected_hamo(ctx: HamoContext, candidate: np.ndarray) -> float:
    return float(ctx.beta @ ctx.hamo_rows(np.asarray(candidate, dtype=float)))


def happo_terms(old: np.ndarray, cand: np.ndarray, joint_adv: np.ndarray,
                weights: np.ndarray, epsilon: float) -> tuple[float, float, float]:
    """Clipped objective and its two halves for one state.

    ``joint_adv[p, a]`` is ``A^{pred + i}``; ``weights[p]`` the predecessor
    joint-action probabilities.  Returns ``(clip_objective, expected_adv,
    relu_drift)`` where the identity says ``clip_objective == expected_adv -
    relu_drift``; the three are computed independently.
    """
    old = np.asarray(old, dtype=float)
    cand = np.asarray(cand, dtype=float)
    joint_adv = np.asarray(joint_adv, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.any(old <= 0):
        raise _drift.DriftUndefinedError("clipped objective needs a strictly positive old row")
    ratio = cand / old
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    surrogate = np.minimum(ratio * joint_adv, clipped * joint_adv)
    objective = float(weights @ surrogate @ old)
    expected = float(weights @ joint_adv @ cand)
    relu = float(_drift.clip_relu_rows(old[None], cand[None], epsilon, weights[None], joint_adv[None])[0])
    return objective, expected, relu


def _state_terms(ctx: HamoContext, candidate: np.ndarray, s: int, pred_action: int | None):
    weights = ctx.seq.weights[s]
    if pred_action is not None:
        weights = np.zeros_like(weights)
        weights[pred_action] = 1.0
    return happo_terms(ctx.old[s], np.asarray(candidate, dtype=float)[s], ctx.seq.joint_adv[s],
                       weights, ctx.hadf.epsilon)


def happo_objective(ctx: HamoContext, candidate: np.ndarray, s: int,
                    pred_action: int | None = None) -> float:
    """Clipped surrogate at state ``s``; predecessors marginalised unless ``pred_action`` is fixed."""
    return _state_terms(ctx, candidate, s, pred_action)[0]


def happo_identity_residual(ctx: HamoContext, candidate: np.ndarray, s: int,
                            pred_action: int | None = None) -> float:
    objective, expected, relu = _state_terms(ctx, candidate, s, pred_action)
    return abs(objective - (expected - relu))
