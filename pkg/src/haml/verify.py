"""Verification suites: each binds one guarantee to a runnable, seeded check.

Every suite returns a list of :class:`Check`; details are formatted
deterministically (no timings) so reports are byte-reproducible.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from haml import baselines
from haml.drift import HADF_KINDS, HadfSpec, drift_state, gateaux_residual
from haml.engine import EngineConfig, PermutationSampler, haml_step, iterate, standard_configs
from haml.exact_eval import decomposition_residuals, evaluate, nash_gap
from haml.game_model import (
    JointPolicy,
    MarkovGame,
    build_prop1_game,
    build_prop2_game,
    random_game,
    random_joint_policy,
    uniform_joint_policy,
)
from haml.mirror import happo_terms

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def random_instance(seed: int, max_agents: int = 3, max_states: int = 3, max_actions: int = 3,
                    min_agents: int = 1, gamma: float = 0.9) -> tuple[MarkovGame, JointPolicy]:
    """Seeded random game with random dimensions and a strictly positive policy."""
    rng = np.random.default_rng([seed, 7])
    n = int(rng.integers(min_agents, max_agents + 1))
    states = int(rng.integers(1, max_states + 1))
    actions = [int(a) for a in rng.integers(2, max_actions + 1, size=n)]
    game = random_game(seed, n, states, actions, gamma)
    return game, random_joint_policy(game, [seed, 11])


# -- analytic traps --------------------------------------------------------


def suite_prop1(ns=(2, 4, 6), tol: float = 1e-9, grid_resolution: int = 1001) -> list[Check]:
    checks = []
    for n in ns:
        game = build_prop1_game(n)
        p_star, j_share = baselines.shared_policy_optimum(game, grid_resolution)
        _, j_opt = baselines.brute_force_optimum(game)
        ratio = j_share / j_opt
        expected = 2.0 / 2.0**n
        checks.append(Check(
            f"prop1 n={n} ratio",
            abs(ratio - expected) <= tol and abs(j_opt - 1.0) <= tol,
            f"ratio {ratio:.9f} expected 2/2^{n} = {expected:.9f}, J* = {j_opt:.9f}, p* = {p_star:.9f}",
        ))
        start = random_joint_policy(game, [n, 1])
        final = None
        for final, _ in iterate(game, start, EngineConfig(iterations=20, stop_gap=1e-12)):
            pass
        j_haml = evaluate(game, final).j
        checks.append(Check(f"prop1 n={n} heterogeneous HAML", j_haml >= 1.0 - tol,
                            f"HAML J = {j_haml:.9f} from a random positive start"))
    return checks


def prop2_start(game: MarkovGame, p0: float = 0.7) -> JointPolicy:
    return JointPolicy(tuple(np.array([[p0, 1.0 - p0]]) for _ in range(game.n_agents)))


def suite_prop2(p0: float = 0.7) -> list[Check]:
    game = build_prop2_game()
    start = prop2_start(game, p0)
    j_old = evaluate(game, start).j
    j_naive = evaluate(game, baselines.naive_simultaneous_step(game, start)).j
    checks = [Check("prop2 naive simultaneous step", j_naive == -1.0 and j_naive < j_old,
                    f"naive J = {j_naive:.1f} from J = {j_old:.2f}")]
    for perm in itertools.permutations(range(2)):
        cfg = EngineConfig(permutations=PermutationSampler("fixed_list", schedule=(perm,)), iterations=1)
        _, rec = haml_step(game, start, cfg, 0)
        checks.append(Check(f"prop2 HAML step order {perm}", abs(rec.j_after - 2.0) <= 1e-12,
                            f"HAML J = {rec.j_after:.1f} from J = {rec.j_before:.2f}"))
    return checks


# -- advantage decomposition -----------------------------------------------


def suite_lemma1(seeds: int = 100, tol: float = 1e-10) -> list[Check]:
    worst, worst_seed, cases = 0.0, -1, 0
    for seed in range(seeds):
        game, pi = random_instance(seed)
        ev = evaluate(game, pi)
        for m in range(1, game.n_agents + 1):
            for ordering in itertools.permutations(range(game.n_agents), m):
                res = decomposition_residuals(game, pi, ordering, ev)
                cases += res.size
                if res.max() > worst:
                    worst, worst_seed = float(res.max()), seed
    return [Check("lemma1 advantage decomposition", worst <= tol,
                  f"max residual {worst:.3e} over {cases} (state, action, ordering) cases, "
                  f"{seeds} games (worst seed {worst_seed})")]


# -- monotonic improvement -------------------------------------------------


def suite_monotone(games: int = 100, iterations: int = 100, tol: float = 1e-9,
                   configs: dict[str, EngineConfig] | None = None) -> list[Check]:
    configs = configs or standard_configs()
    checks = []
    for name, base in configs.items():
        cfg = replace(base, iterations=iterations)
        worst_j, worst_v, min_hamo, steps = 0.0, 0.0, np.inf, 0
        for seed in range(games):
            game, pi = random_instance(seed)
            for _, rec in iterate(game, pi, cfg, seed=seed):
                steps += 1
                worst_j = max(worst_j, rec.j_before - rec.j_after)
                worst_v = max(worst_v, float(np.max(rec.v_before - rec.v_after)))
                min_hamo = min(min_hamo, min(rec.hamo))
        checks.append(Check(
            f"monotone {name}",
            worst_j <= tol and worst_v <= tol and min_hamo >= -1e-12,
            f"{steps} steps, max J decrease {worst_j:.3e}, max V decrease {worst_v:.3e}, "
            f"min agent objective {min_hamo:.3e}",
        ))
    return checks


# -- Nash convergence ------------------------------------------------------


def suite_nash(games: int = 100, iterations: int = 500, gap_tol: float = 1e-6,
               success_rate: float = 0.95) -> list[Check]:
    cfg = EngineConfig(iterations=iterations, stop_gap=gap_tol)
    failures, fixed_bad, fixed_tested = [], [], 0
    for seed in range(games):
        game, pi = random_instance(seed, max_agents=2, min_agents=2)
        best = np.inf
        final = pi
        for final, rec in iterate(game, pi, cfg, seed=seed):
            best = min(best, rec.nash_gap)
        if best > gap_tol:
            failures.append(seed)
            log.info("nash: seed %d did not reach gap %.1e (best %.3e)", seed, gap_tol, best)
        ev = evaluate(game, final)
        if nash_gap(game, final, ev) <= 1e-12:
            fixed_tested += 1
            if not _is_fixed_point(game, final, cfg, seed):
                fixed_bad.append(seed)
    rate = 1.0 - len(failures) / games
    checks = [Check("nash gap convergence", rate >= success_rate,
                    f"{games - len(failures)}/{games} games reach gap <= {gap_tol:g} within {iterations} "
                    f"iterations (failed seeds: {failures})")]
    # equilibria that the random runs do not visit: a mixed one and a symmetric one
    extra = [(build_prop2_game(), prop2_start(build_prop2_game(), 0.6)),
             (build_prop1_game(4), uniform_joint_policy(build_prop1_game(4)))]
    for game, pi in extra:
        if nash_gap(game, pi) <= 1e-12:
            fixed_tested += 1
            if not _is_fixed_point(game, pi, cfg, 0):
                fixed_bad.append(f"{game.n_agents}-agent extra")
    checks.append(Check("nash equilibria are fixed points", not fixed_bad and fixed_tested > 0,
                        f"{fixed_tested} equilibria tested, non-fixed: {fixed_bad}"))
    return checks


def _is_fixed_point(game, pi, cfg, seed) -> bool:
    sampler = PermutationSampler("uniform", seed)
    for k in range(game.n_agents * 3):
        new, _ = haml_step(game, pi, replace(cfg, permutations=sampler), k)
        if not new.allclose(pi):
            return False
    return True


# -- drift axioms ----------------------------------------------------------


def _hadf_specs() -> dict[str, HadfSpec]:
    return {
        "trivial": HadfSpec("trivial"),
        "kl_penalty": HadfSpec("kl_penalty", tau=1.0),
        "kl_penalty_old_to_new": HadfSpec("kl_penalty", tau=1.0, kl_direction="old_to_new"),
        "clip_relu": HadfSpec("clip_relu", epsilon=0.2),
        "squared_l2": HadfSpec("squared_l2", tau=1.0),
    }


def _bounded_policy(game: MarkovGame, seed) -> JointPolicy:
    """Random policy mixed half-and-half with uniform so no probability is tiny."""
    pi = random_joint_policy(game, seed)
    return JointPolicy(tuple(0.5 * t + 0.5 / t.shape[1] for t in pi.tables))


def _tangent(rng, k: int) -> np.ndarray:
    d = rng.normal(size=k)
    d -= d.mean()
    return d / np.linalg.norm(d)


def suite_hadf(directions: int = 100, step: float = 1e-5, tol: float = 1e-4, instances: int = 100) -> list[Check]:
    assert set(HADF_KINDS) <= {s.kind for s in _hadf_specs().values()}
    game = random_game(3, 2, 2, [3, 3], 0.9)
    checks = []
    for name, hadf in _hadf_specs().items():
        rng = np.random.default_rng([17, len(name)])
        worst_neg, worst_id = np.inf, 0.0
        for t in range(instances):
            pi = _bounded_policy(game, [t, 1])
            ev = evaluate(game, pi)
            preds = [(1, pi.tables[1][::-1].copy())] if t % 2 else []
            s = t % game.n_states
            cand = rng.dirichlet(np.ones(3))
            if hadf.kind == "clip_relu":
                cand = np.maximum(cand, 0.0)
            worst_neg = min(worst_neg, drift_state(hadf, game, ev, pi, 0, cand, s, preds))
            worst_id = max(worst_id, abs(drift_state(hadf, game, ev, pi, 0, pi.tables[0][s], s, preds)))
        checks.append(Check(f"hadf {name} non-negative", worst_neg >= 0.0,
                            f"min drift {worst_neg:.3e} over {instances} random candidates"))
        checks.append(Check(f"hadf {name} zero at identity", worst_id == 0.0,
                            f"max |drift(old)| {worst_id:.3e}"))
        pi = _bounded_policy(game, [99, 1])
        ev = evaluate(game, pi)
        worst_g = 0.0
        for t in range(directions):
            s = t % game.n_states
            preds = [(1, pi.tables[1][::-1].copy())] if t % 2 else []
            worst_g = max(worst_g, gateaux_residual(hadf, game, ev, pi, 0, s, _tangent(rng, 3), step, preds))
        checks.append(Check(f"hadf {name} zero Gateaux derivative", worst_g <= tol,
                            f"max FD residual {worst_g:.3e} at step {step:g} over {directions} directions"))
    clip = _hadf_specs()["clip_relu"]
    worst_band = 0.0
    for t in range(instances):
        pi = _bounded_policy(game, [t, 3])
        ev = evaluate(game, pi)
        s = t % game.n_states
        old = pi.tables[0][s]
        cand = old * (1.0 + 0.9 * clip.epsilon * _tangent(rng, 3) / 3.0)
        cand /= cand.sum()
        ratio = cand / old
        assert np.all((ratio > 1 - clip.epsilon) & (ratio < 1 + clip.epsilon))
        worst_band = max(worst_band, drift_state(clip, game, ev, pi, 0, cand, s, [(1, pi.tables[1])]))
    checks.append(Check("hadf clip_relu zero inside clip band", worst_band == 0.0,
                        f"max drift {worst_band:.3e} over {instances} in-band candidates"))
    return checks


# -- clipped surrogate identity -------------------------------------------


def suite_happo_identity(instances: int = 1000, tol: float = 1e-10) -> list[Check]:
    obj, exp_adv, relu = happo_terms([0.5, 0.5], [0.8, 0.2], [[1.0, -1.0]], [1.0], 0.2)
    checks = [Check("happo worked instance", abs(obj - 0.2) <= 1e-12 and abs(exp_adv - relu - 0.2) <= 1e-12,
                    f"clip objective {obj:.12f}, advantage - drift = {exp_adv:.12f} - {relu:.12f}")]
    rng = np.random.default_rng(2023)
    worst = 0.0
    for _ in range(instances):
        k = int(rng.integers(2, 5))
        preds = int(rng.integers(1, 5))
        old = rng.dirichlet(np.ones(k)) * 0.95 + 0.05 / k
        cand = rng.dirichlet(np.full(k, rng.uniform(0.2, 3.0)))
        adv = rng.normal(scale=rng.uniform(0.1, 10.0), size=(preds, k))
        weights = rng.dirichlet(np.ones(preds))
        eps = rng.uniform(0.01, 0.99)
        o, e, r = happo_terms(old, cand, adv, weights, eps)
        worst = max(worst, abs(o - (e - r)))
    checks.append(Check("happo identity random instances", worst <= tol,
                        f"max residual {worst:.3e} over {instances} instances"))
    return checks


# -- HAA2C -----------------------------------------------------------------


def suite_haa2c(games: int = 20, rel_tol: float = 1e-6, mc_tol: float = 1e-12, h: float = 1e-6) -> list[Check]:
    worst_rel, worst_ratio, worst_mc = 0.0, 0.0, 0.0
    for seed in range(games):
        rng = np.random.default_rng([seed, 5])
        n = int(rng.integers(2, 4))
        game = random_game(seed, n, 2, [int(a) for a in rng.integers(2, 4, size=n)], 0.9)
        params = baselines.SoftmaxPolicyParams(tuple(rng.normal(size=(2, k)) for k in game.action_counts))
        old = params.policy()
        ev = evaluate(game, old)
        perm = [int(a) for a in rng.permutation(n)]
        preds = [(j, baselines.softmax(rng.normal(size=(2, game.action_counts[j])), axis=1)) for j in perm[:-1]]
        agent = perm[-1]
        obj = baselines.exact_objective(game, ev, old, agent, preds)
        logits = params.logits[agent] + rng.normal(scale=0.3, size=params.logits[agent].shape)
        analytic = obj.grad_logits(logits)
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            e = np.zeros_like(logits)
            e[idx] = h
            numeric[idx] = (obj.value_logits(logits + e) - obj.value_logits(logits - e)) / (2 * h)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-300)
        worst_rel = max(worst_rel, rel)
        cand = baselines.softmax(logits, axis=1)
        ratio_form = baselines.importance_weighted_objective(game, ev, old, agent, cand, preds)
        direct = baselines.direct_objective(game, ev, old, agent, cand, preds)
        worst_ratio = max(worst_ratio, abs(ratio_form - direct))

        mc_game = random_game(seed, n, 2, list(game.action_counts), 0.0)
        mc_ev = evaluate(mc_game, old)
        batch = baselines.enumerate_one_step_batch(mc_game, old)
        estimate = baselines.mc_objective(batch, old, agent, cand, preds)
        exact = baselines.importance_weighted_objective(mc_game, mc_ev, old, agent, cand, preds)
        worst_mc = max(worst_mc, abs(estimate - exact))
    return [
        Check("haa2c analytic gradient vs central differences", worst_rel <= rel_tol,
              f"max relative error {worst_rel:.3e} over {games} random 2-state games"),
        Check("haa2c joint-ratio objective identity", worst_ratio <= 1e-12,
              f"max |ratio form - direct form| {worst_ratio:.3e}"),
        Check("haa2c Monte-Carlo estimator unbiased", worst_mc <= mc_tol,
              f"max |enumerated mean - exact| {worst_mc:.3e} over {games} gamma=0 games"),
    ]


SUITES: dict[str, Callable[..., list[Check]]] = {
    "prop1": suite_prop1,
    "prop2": suite_prop2,
    "lemma1": suite_lemma1,
    "monotone": suite_monotone,
    "nash": suite_nash,
    "hadf": suite_hadf,
    "happo-identity": suite_happo_identity,
    "haa2c": suite_haa2c,
}
