"""Heterogeneous-agent drift functionals and state weightings.

Four drift kinds are supported:

* ``trivial``     -- identically zero.
* ``kl_penalty``  -- ``tau * KL`` between candidate and old rows.
* ``squared_l2``  -- ``tau * ||candidate - old||^2``.
* ``clip_relu``   -- the clip penalty hidden inside the clipped surrogate,
  ``E[ReLU((r - clip(r, 1 +- eps)) * A^{pred + i})]`` with ``r`` the
  candidate/old probability ratio, expectations over the predecessors'
  updated policies and the agent's old policy.

Vectorised row functions work on ``[S, A]`` tables; the per-state and
expected forms used by callers are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import rel_entr

from haml.exact_eval import EvalBundle, SequentialAdvantage, sequential_advantage
from haml.game_model import JointPolicy, MarkovGame

HADF_KINDS = ("trivial", "kl_penalty", "clip_relu", "squared_l2")
KL_DIRECTIONS = ("old_to_new", "new_to_old")
WEIGHTING_KINDS = ("beta", "rho_normalized", "uniform")
SIMPLEX_TOL = 1e-9


class DriftUndefinedError(ValueError):
    """The drift cannot be evaluated for the given candidate."""


@dataclass(frozen=True)
class HadfSpec:
    kind: str = "trivial"
    tau: float = 1.0
    epsilon: float = 0.2
    kl_direction: str = "new_to_old"

    def __post_init__(self):
        if self.kind not in HADF_KINDS:
            raise ValueError(f"unknown HADF kind {self.kind!r}; expected one of {HADF_KINDS}")
        if self.tau < 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "HadfSpec":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tau": self.tau, "epsilon": self.epsilon,
                "kl_direction": self.kl_direction}


@dataclass(frozen=True)
class StateWeighting:
    """A positive state distribution resolved against the current joint policy.

    ``beta`` defers to the sampling distribution supplied at resolution time.
    """

    kind: str = "rho_normalized"

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise ValueError(f"unknown weighting kind {self.kind!r}; expected one of {WEIGHTING_KINDS}")

    def resolve(self, game: MarkovGame, ev: EvalBundle, beta: np.ndarray | None = None) -> np.ndarray:
        if self.kind == "uniform":
            return np.full(game.n_states, 1.0 / game.n_states)
        if self.kind == "rho_normalized":
            w = ev.rho_normalized
            return w / w.sum()
        if beta is None:
            raise ValueError("weighting 'beta' needs the resolved sampling distribution")
        return np.asarray(beta, dtype=float)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with 0 log 0 = 0 and +inf where q = 0 < p.

    Rows that sum to one only within rounding can give values a few ulps
    below zero; those are clamped, since KL of distributions is non-negative.
    """
    return np.maximum(rel_entr(p, q).sum(axis=-1), 0.0)


def clip_relu_rows(old: np.ndarray, cand: np.ndarray, epsilon: float,
                   weights: np.ndarray, joint_adv: np.ndarray) -> np.ndarray:
    ratio = _ratio(old, cand)
    excess = ratio - np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    inner = np.maximum(excess[:, None, :] * joint_adv, 0.0)
    return np.einsum("sp,sa,spa->s", weights, old, inner)


def _ratio(old: np.ndarray, cand: np.ndarray) -> np.ndarray:
    if np.any((old <= 0) & (cand > 0)):
        raise DriftUndefinedError("probability ratio undefined: old policy is zero where candidate is not")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(old > 0, cand / np.where(old > 0, old, 1.0), 1.0)


def drift_rows(hadf: HadfSpec, old: np.ndarray, cand: np.ndarray,
               seq: SequentialAdvantage | None = None) -> np.ndarray:
    """Per-state drift of ``cand`` from ``old`` (both ``[S, A]``)."""
    if hadf.kind == "trivial":
        return np.zeros(old.shape[0])
    if hadf.kind == "squared_l2":
        return hadf.tau * np.sum((cand - old) ** 2, axis=1)
    if hadf.kind == "kl_penalty":
        if hadf.kl_direction == "new_to_old":
            return hadf.tau * kl_rows(cand, old)
        return hadf.tau * kl_rows(old, cand)
    if seq is None:
        raise ValueError("clip_relu drift needs the sequential advantage tensors")
    return clip_relu_rows(old, cand, hadf.epsilon, seq.weights, seq.joint_adv)


def drift_gradient(hadf: HadfSpec, old: np.ndarray, cand: np.ndarray,
                   seq: SequentialAdvantage | None = None) -> np.ndarray:
    """(Sub)gradient of :func:`drift_rows` with respect to ``cand``."""
    if hadf.kind == "trivial":
        return np.zeros_like(cand)
    if hadf.kind == "squared_l2":
        return 2.0 * hadf.tau * (cand - old)
    if hadf.kind == "kl_penalty":
        with np.errstate(divide="ignore", invalid="ignore"):
            if hadf.kl_direction == "new_to_old":
                g = np.log(np.where(cand > 0, cand, 1.0) / np.where(old > 0, old, 1.0)) + 1.0
                return hadf.tau * np.where(cand > 0, g, 0.0)
            return -hadf.tau * np.where(old > 0, old / cand, 0.0)
    ratio = _ratio(old, cand)
    outside = ((ratio < 1.0 - hadf.epsilon) | (ratio > 1.0 + hadf.epsilon)).astype(float)
    excess = ratio - np.clip(ratio, 1.0 - hadf.epsilon, 1.0 + hadf.epsilon)
    active = (excess[:, None, :] * seq.joint_adv) > 0
    # d/d cand of old * f(cand / old) is f'(ratio)
    return outside * np.einsum("sp,spa->sa", seq.weights, active * seq.joint_adv)


def _check_row(row: np.ndarray) -> None:
    if np.any(row < -SIMPLEX_TOL) or abs(row.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"candidate {row} is not on the simplex")


def drift_state(hadf: HadfSpec, game: MarkovGame, ev: EvalBundle, pi: JointPolicy, agent: int,
                candidate: np.ndarray, s: int,
                predecessors: Sequence[tuple[int, np.ndarray]] = ()) -> float:
    """Drift of one state's candidate row from ``pi[agent][s]``."""
    candidate = np.asarray(candidate, dtype=float)
    _check_row(candidate)
    seq = sequential_advantage(game, ev, pi, agent, predecessors) if hadf.kind == "clip_relu" else None
    if seq is not None:
        seq = SequentialAdvantage(seq.weights[s:s + 1], seq.joint_adv[s:s + 1], seq.agent_adv[s:s + 1])
    old = pi.tables[agent][s:s + 1]
    return float(drift_rows(hadf, old, candidate[None, :], seq)[0])


def drift_expected(hadf: HadfSpec, nu: StateWeighting, game: MarkovGame, ev: EvalBundle,
                   pi: JointPolicy, agent: int, candidate: np.ndarray,
                   predecessors: Sequence[tuple[int, np.ndarray]] = (),
                   beta: np.ndarray | None = None) -> float:
    candidate = np.asarray(candidate, dtype=float)
    for row in candidate:
        _check_row(row)
    seq = sequential_advantage(game, ev, pi, agent, predecessors) if hadf.kind == "clip_relu" else None
    weights = nu.resolve(game, ev, beta)
    return float(weights @ drift_rows(hadf, pi.tables[agent], candidate, seq))


def gateaux_residual(hadf: HadfSpec, game: MarkovGame, ev: EvalBundle, pi: JointPolicy, agent: int,
                     s: int, direction: np.ndarray, step: float,
                     predecessors: Sequence[tuple[int, np.ndarray]] = ()) -> float:
    """Finite-difference directional derivative magnitude of the drift at the old row."""
    direction = np.asarray(direction, dtype=float)
    if abs(direction.sum()) > 1e-12:
        raise ValueError("direction must be tangent to the simplex (sum to zero)")
    old = pi.tables[agent][s]
    moved = old + step * direction
    if np.any(moved < 0) or np.any(old - step * direction < 0):
        raise ValueError("step leaves the simplex")
    moved = np.where(np.abs(moved) < 1e-300, 0.0, moved)
    d1 = drift_state(hadf, game, ev, pi, agent, moved, s, predecessors)
    d0 = drift_state(hadf, game, ev, pi, agent, old, s, predecessors)
    return abs(d1 - d0) / step
