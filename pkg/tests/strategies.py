"""Hypothesis strategies for small games and policies."""

import numpy as np
from hypothesis import strategies as st

from haml.game_model import random_game, random_joint_policy


@st.composite
def games(draw, max_agents=3, max_states=3, max_actions=3, min_agents=1, gamma=None):
    n = draw(st.integers(min_agents, max_agents))
    states = draw(st.integers(1, max_states))
    actions = draw(st.lists(st.integers(1, max_actions), min_size=n, max_size=n))
    g = draw(st.sampled_from([0.0, 0.5, 0.9])) if gamma is None else gamma
    seed = draw(st.integers(0, 2**31 - 1))
    return random_game(seed, n, states, actions, g)


@st.composite
def games_and_policies(draw, **kwargs):
    game = draw(games(**kwargs))
    seed = draw(st.integers(0, 2**31 - 1))
    conc = draw(st.sampled_from([0.3, 1.0, 5.0]))
    return game, random_joint_policy(game, seed, conc)


def simplex_rows(rng, rows, k):
    return rng.dirichlet(np.ones(k), size=rows)
