"""Exact tabular heterogeneous-agent mirror learning for cooperative Markov games."""

from haml.game_model import (
    GameValidationError,
    JointPolicy,
    MarkovGame,
    build_prop1_game,
    build_prop2_game,
    decode_joint_action,
    dirac_joint_policy,
    encode_joint_action,
    load_game,
    random_game,
    save_game,
    uniform_joint_policy,
)
from haml.exact_eval import EvalBundle, best_response, evaluate, nash_gap
from haml.drift import HadfSpec, StateWeighting
from haml.neighborhood import NeighborhoodSpec
from haml.engine import EngineConfig, InnerSolver, PermutationSampler, haml_step, run

__all__ = [
    "EngineConfig",
    "EvalBundle",
    "GameValidationError",
    "HadfSpec",
    "InnerSolver",
    "JointPolicy",
    "MarkovGame",
    "NeighborhoodSpec",
    "PermutationSampler",
    "StateWeighting",
    "best_response",
    "build_prop1_game",
    "build_prop2_game",
    "decode_joint_action",
    "dirac_joint_policy",
    "encode_joint_action",
    "evaluate",
    "haml_step",
    "load_game",
    "nash_gap",
    "random_game",
    "run",
    "save_game",
    "uniform_joint_policy",
]
