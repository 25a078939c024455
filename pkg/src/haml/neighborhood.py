"""Neighbourhood operators: hard constraint sets around an agent's old policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from haml.drift import StateWeighting, kl_rows
from haml.exact_eval import EvalBundle
from haml.game_model import JointPolicy, MarkovGame

NEIGHBORHOOD_KINDS = ("unconstrained", "per_state_kl", "expected_kl", "per_state_tv")


@dataclass(frozen=True)
class NeighborhoodSpec:
    kind: str = "unconstrained"
    delta: float = 0.1
    weighting: StateWeighting = field(default_factory=StateWeighting)

    def __post_init__(self):
        if self.kind not in NEIGHBORHOOD_KINDS:
            raise ValueError(f"unknown neighborhood kind {self.kind!r}; expected one of {NEIGHBORHOOD_KINDS}")
        if self.kind != "unconstrained" and not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def per_state(self) -> bool:
        return self.kind in ("per_state_kl", "per_state_tv")

    @classmethod
    def from_dict(cls, doc: dict) -> "NeighborhoodSpec":
        doc = dict(doc)
        if "weighting" in doc:
            doc["weighting"] = StateWeighting(doc["weighting"])
        return cls(**doc)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "weighting": self.weighting.kind}


def state_distances(spec: NeighborhoodSpec, old: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Per-state constraint statistic (KL(old||cand) or TV), ``inf`` where KL is undefined."""
    if spec.kind == "per_state_tv":
        return 0.5 * np.abs(old - cand).sum(axis=1)
    if spec.kind in ("per_state_kl", "expected_kl"):
        return kl_rows(old, cand)
    return np.zeros(old.shape[0])


def rows_contained(spec: NeighborhoodSpec, old: np.ndarray, cand: np.ndarray,
                   weights: np.ndarray | None = None) -> bool:
    if spec.kind == "unconstrained":
        return True
    dist = state_distances(spec, old, cand)
    if spec.kind == "expected_kl":
        if not np.all(np.isfinite(dist)):
            return False
        return bool(weights @ dist <= spec.delta)
    return bool(np.all(dist <= spec.delta))


def contains(spec: NeighborhoodSpec, game: MarkovGame, ev: EvalBundle, pi: JointPolicy, agent: int,
             candidate: np.ndarray, beta: np.ndarray | None = None) -> bool:
    """Membership of ``candidate`` (an ``[S, A_i]`` table) in the agent's neighbourhood."""
    weights = spec.weighting.resolve(game, ev, beta) if spec.kind == "expected_kl" else None
    return rows_contained(spec, pi.tables[agent], np.asarray(candidate, dtype=float), weights)


def closed_ball_witness(spec: NeighborhoodSpec, pi: JointPolicy, agent: int) -> float:
    """A total-variation radius whose state-wise ball lies inside the neighbourhood.

    For the KL kinds, with ``p`` the smallest positive old probability and a
    per-state TV distance ``t <= p/2``, ``KL(old||cand) <= 4 t^2 / p`` plus
    ``t`` when the old row has zeros, so
    ``t = min(p/2, sqrt(delta * p / 8), delta/2)`` suffices.  The same radius
    is conservative for the expected-KL kind.
    """
    if spec.kind == "unconstrained":
        return 1.0
    if spec.kind == "per_state_tv":
        return spec.delta
    old = pi.tables[agent]
    p_min = float(old[old > 0].min())
    radius = min(p_min / 2.0, math.sqrt(spec.delta * p_min / 8.0))
    if np.any(old == 0):
        radius = min(radius, spec.delta / 2.0)
    return radius
