"""The sequential mirror-learning loop.

One iteration freezes the advantages of the current joint policy, draws an
agent permutation, and lets each agent in turn maximise its expected mirror
objective inside its neighbourhood, conditioning on the tables already
chosen by its predecessors.  Rows whose per-state objective would be
negative are reverted to the old row, which keeps every state value
non-decreasing regardless of how exact the inner solver is.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from haml.drift import HadfSpec, StateWeighting, drift_gradient
from haml.exact_eval import EvalBundle, evaluate, nash_gap
from haml.game_model import JointPolicy, MarkovGame
from haml.mirror import HamoContext, make_context
from haml.neighborhood import NeighborhoodSpec, rows_contained, state_distances

log = logging.getLogger(__name__)

PERMUTATION_KINDS = ("uniform", "fixed_cycle", "fixed_list")
SOLVER_KINDS = ("greedy", "exp_gradient")
SOLVER_ALIASES = {"closed_form_greedy": "greedy"}
STALL_TOL = 1e-14


class EngineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PermutationSampler:
    """Agent orderings as a deterministic function of ``(seed, k)``.

    ``uniform`` draws from all ``n!`` orderings with equal probability;
    ``fixed_cycle`` cycles through ``schedule`` (all orderings in
    lexicographic order when empty); ``fixed_list`` uses ``schedule[k]``.
    """

    kind: str = "uniform"
    seed: int = 0
    schedule: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if self.kind not in PERMUTATION_KINDS:
            raise ValueError(f"unknown permutation kind {self.kind!r}")
        object.__setattr__(self, "schedule", tuple(tuple(int(a) for a in p) for p in self.schedule))
        if self.kind == "fixed_list" and not self.schedule:
            raise ValueError("fixed_list needs a non-empty schedule")

    def draw(self, k: int, n: int) -> tuple[int, ...]:
        if self.kind == "uniform":
            rng = np.random.default_rng([self.seed, k])
            perm = tuple(int(a) for a in rng.permutation(n))
        elif self.kind == "fixed_cycle":
            schedule = self.schedule or tuple(itertools.permutations(range(n)))
            perm = schedule[k % len(schedule)]
        else:
            if k >= len(self.schedule):
                raise EngineError(f"fixed_list schedule exhausted at iteration {k}")
            perm = self.schedule[k]
        if sorted(perm) != list(range(n)):
            raise ValueError(f"{perm} is not a permutation of {n} agents")
        return perm

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "schedule": [list(p) for p in self.schedule]}


@dataclass(frozen=True)
class InnerSolver:
    """``greedy`` is exact where a closed form exists and otherwise delegates
    to ``exp_gradient`` (multiplicative-weights ascent with step backtracking)."""

    kind: str = "greedy"
    steps: int = 50
    learning_rate: float = 1.0
    backtracking_factor: float = 0.5
    improvement_tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "kind", SOLVER_ALIASES.get(self.kind, self.kind))
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown inner solver {self.kind!r}")
        if self.steps < 1 or self.learning_rate <= 0 or not 0 < self.backtracking_factor < 1:
            raise ValueError("invalid exp_gradient parameters")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "steps": self.steps, "learning_rate": self.learning_rate,
                "backtracking_factor": self.backtracking_factor,
                "improvement_tol": self.improvement_tol}


def _per_agent(value, n: int, name: str) -> tuple:
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ValueError(f"{name} has {len(value)} entries for {n} agents")
        return tuple(value)
    return (value,) * n


@dataclass(frozen=True)
class EngineConfig:
    hadf: HadfSpec | tuple[HadfSpec, ...] = field(default_factory=HadfSpec)
    neighborhood: NeighborhoodSpec | tuple[NeighborhoodSpec, ...] = field(default_factory=NeighborhoodSpec)
    beta: StateWeighting = field(default_factory=StateWeighting)
    nu: StateWeighting = field(default_factory=lambda: StateWeighting("beta"))
    permutations: PermutationSampler = field(default_factory=PermutationSampler)
    inner_solver: InnerSolver = field(default_factory=InnerSolver)
    iterations: int = 100
    stop_gap: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.stop_gap < 0:
            raise ValueError("stop_gap must be non-negative")
        if self.beta.kind == "beta":
            raise ValueError("beta cannot refer to itself; use rho_normalized or uniform")

    def hadf_for(self, agent: int, n: int) -> HadfSpec:
        return _per_agent(self.hadf, n, "hadf")[agent]

    def neighborhood_for(self, agent: int, n: int) -> NeighborhoodSpec:
        return _per_agent(self.neighborhood, n, "neighborhood")[agent]

    def to_dict(self) -> dict:
        def enc(value, fn):
            return [fn(v) for v in value] if isinstance(value, tuple) else fn(value)
        return {
            "hadf": enc(self.hadf, HadfSpec.to_dict),
            "neighborhood": enc(self.neighborhood, NeighborhoodSpec.to_dict),
            "beta": self.beta.kind,
            "nu": self.nu.kind,
            "permutations": self.permutations.to_dict(),
            "inner_solver": self.inner_solver.to_dict(),
            "iterations": self.iterations,
            "stop_gap": self.stop_gap,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EngineConfig":
        def dec(value, fn):
            return tuple(fn(v) for v in value) if isinstance(value, list) else fn(value)
        kwargs = {}
        if "hadf" in doc:
            kwargs["hadf"] = dec(doc["hadf"], HadfSpec.from_dict)
        if "neighborhood" in doc:
            kwargs["neighborhood"] = dec(doc["neighborhood"], NeighborhoodSpec.from_dict)
        if "beta" in doc:
            kwargs["beta"] = StateWeighting(doc["beta"])
        if "nu" in doc:
            kwargs["nu"] = StateWeighting(doc["nu"])
        if "permutations" in doc:
            kwargs["permutations"] = PermutationSampler(**doc["permutations"])
        if "inner_solver" in doc:
            kwargs["inner_solver"] = InnerSolver(**doc["inner_solver"])
        for key in ("iterations", "stop_gap"):
            if key in doc:
                kwargs[key] = doc[key]
        unknown = set(doc) - {"hadf", "neighborhood", "beta", "nu", "permutations",
                              "inner_solver", "iterations", "stop_gap"}
        if unknown:
            raise ValueError(f"unknown engine fields: {', '.join(sorted(unknown))}")
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    k: int
    permutation: tuple[int, ...]
    j_before: float
    j_after: float
    v_before: np.ndarray
    v_after: np.ndarray
    nash_gap: float
    hamo: tuple[float, ...]
    drift: tuple[float, ...]
    fallbacks: tuple[int, ...]

    @property
    def fallback_count(self) -> int:
        return sum(self.fallbacks)


def _greedy_rows(adv: np.ndarray, old: np.ndarray, tol: float) -> np.ndarray:
    best = np.argmax(adv, axis=1)
    idx = np.arange(adv.shape[0])
    gain = adv[idx, best] - np.einsum("sa,sa->s", old, adv)
    out = np.zeros_like(old)
    out[idx, best] = 1.0
    # an old row that already attains the maximum is itself an argmax
    keep = gain <= tol
    out[keep] = old[keep]
    return out


def _softmax_rows(ctx: HamoContext, tol: float) -> np.ndarray:
    adv = ctx.seq.expected_adv
    temperature = ctx.hadf.tau * ctx.drift_scale
    with np.errstate(divide="ignore"):
        logits = np.log(ctx.old) + adv / temperature[:, None]
    logits -= logits.max(axis=1, keepdims=True)
    out = np.exp(logits)
    out /= out.sum(axis=1, keepdims=True)
    keep = ctx.hamo_rows(out) <= tol
    out[keep] = ctx.old[keep]
    return out


def _exp_gradient_rows(ctx: HamoContext, solver: InnerSolver) -> np.ndarray:
    old = ctx.old
    adv = ctx.seq.expected_adv
    scale = ctx.drift_scale[:, None]
    p = old.copy()
    f = ctx.hamo_rows(p)
    eta = np.full(old.shape[0], solver.learning_rate)
    stalled = 0
    for _ in range(solver.steps):
        g = adv - scale * drift_gradient(ctx.hadf, old, p, ctx.seq)
        g = np.where(p > 0, g, 0.0)
        if not np.all(np.isfinite(g)):
            raise EngineError(f"non-finite gradient for agent {ctx.agent}")
        g -= g.max(axis=1, keepdims=True)
        trial = p * np.exp(eta[:, None] * g)
        trial /= trial.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            f_trial = ctx.hamo_rows(trial)
        accept = f_trial >= f
        gain = np.max(np.where(accept, f_trial - f, 0.0))
        p[accept] = trial[accept]
        f[accept] = f_trial[accept]
        eta[~accept] *= solver.backtracking_factor
        # stop once a few consecutive sweeps gain nothing measurable
        stalled = stalled + 1 if gain <= STALL_TOL * (1.0 + np.max(np.abs(f))) else 0
        if stalled >= 3:
            break
    return p


def _shrink_into(spec: NeighborhoodSpec, old: np.ndarray, cand: np.ndarray,
                 weights: np.ndarray | None, iters: int = 60) -> np.ndarray:
    """Move ``cand`` toward ``old`` along the segment until it is contained."""
    if rows_contained(spec, old, cand, weights):
        return cand
    if spec.per_state:
        ok = state_distances(spec, old, cand) <= spec.delta
        lo = np.where(ok, 1.0, 0.0)
        hi = np.ones(old.shape[0])
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            trial = old + mid[:, None] * (cand - old)
            inside = state_distances(spec, old, trial) <= spec.delta
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return old + lo[:, None] * (cand - old)
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rows_contained(spec, old, old + mid * (cand - old), weights):
            lo = mid
        else:
            hi = mid
    return old + lo * (cand - old)


def inner_maximize(ctx: HamoContext, neighborhood: NeighborhoodSpec, solver: InnerSolver,
                   neighborhood_weights: np.ndarray | None = None) -> np.ndarray:
    """Maximise the expected mirror objective for ``ctx.agent`` over its neighbourhood.

    The result is contained in the neighbourhood and never scores below the
    old table (which scores zero); in the worst case the old table is returned.
    """
    hadf = ctx.hadf
    unconstrained = neighborhood.kind == "unconstrained"
    if solver.kind == "greedy" and unconstrained and (hadf.kind == "trivial" or hadf.tau == 0.0) \
            and hadf.kind != "clip_relu":
        cand = _greedy_rows(ctx.seq.expected_adv, ctx.old, solver.improvement_tol)
    elif solver.kind == "greedy" and unconstrained and hadf.kind == "kl_penalty" \
            and hadf.kl_direction == "new_to_old":
        cand = _softmax_rows(ctx, solver.improvement_tol)
    else:
        cand = _exp_gradient_rows(ctx, solver)
    if not unconstrained:
        cand = _shrink_into(neighborhood, ctx.old, cand, neighborhood_weights)
    score = ctx.beta @ ctx.hamo_rows(cand)
    if not np.isfinite(score):
        raise EngineError(f"non-finite mirror objective for agent {ctx.agent}")
    if score < 0:
        return ctx.old.copy()
    return cand


def haml_step(game: MarkovGame, pi: JointPolicy, cfg: EngineConfig, k: int,
              ev: EvalBundle | None = None) -> tuple[JointPolicy, IterationRecord]:
    """One iteration of sequential mirror updates starting from ``pi``."""
    n = game.n_agents
    ev = evaluate(game, pi) if ev is None else ev
    beta = cfg.beta.resolve(game, ev)
    nu = cfg.nu.resolve(game, ev, beta)
    perm = cfg.permutations.draw(k, n)
    tables = list(pi.tables)
    predecessors: list[tuple[int, np.ndarray]] = []
    hamo, drift, fallbacks = [0.0] * n, [0.0] * n, [0] * n
    for agent in perm:
        ctx = make_context(game, ev, pi, agent, predecessors, cfg.hadf_for(agent, n), beta, nu)
        spec = cfg.neighborhood_for(agent, n)
        weights = spec.weighting.resolve(game, ev, beta) if spec.kind == "expected_kl" else None
        cand = np.array(inner_maximize(ctx, spec, cfg.inner_solver, weights), dtype=float)
        rows = ctx.hamo_rows(cand)
        revert = rows < 0.0
        changed = revert & np.any(cand != ctx.old, axis=1)
        cand[revert] = ctx.old[revert]
        fallbacks[agent] = int(changed.sum())
        hamo[agent] = float(beta @ ctx.hamo_rows(cand))
        drift[agent] = float(nu @ ctx.drift_rows(cand))
        if not (np.isfinite(hamo[agent]) and np.isfinite(drift[agent])):
            raise EngineError(f"iteration {k}: non-finite objective for agent {agent}")
        tables[agent] = cand
        predecessors.append((agent, cand))
    new_pi = JointPolicy(tuple(tables))
    ev_new = evaluate(game, new_pi)
    record = IterationRecord(
        k=k,
        permutation=perm,
        j_before=ev.j,
        j_after=ev_new.j,
        v_before=ev.v,
        v_after=ev_new.v,
        nash_gap=nash_gap(game, new_pi, ev_new),
        hamo=tuple(hamo),
        drift=tuple(drift),
        fallbacks=tuple(fallbacks),
    )
    return new_pi, record


def iterate(game: MarkovGame, pi0: JointPolicy, cfg: EngineConfig,
            seed: int | None = None) -> Iterator[tuple[JointPolicy, IterationRecord]]:
    """Yield ``(policy_after, record)`` for each iteration."""
    if seed is not None:
        sampler = cfg.permutations
        cfg = replace(cfg, permutations=PermutationSampler(sampler.kind, seed, sampler.schedule))
    pi = pi0
    ev = evaluate(game, pi)
    for k in range(cfg.iterations):
        pi, record = haml_step(game, pi, cfg, k, ev)
        ev = evaluate(game, pi)
        log.debug("k=%d J=%.12g gap=%.3g perm=%s", k, record.j_after, record.nash_gap, record.permutation)
        yield pi, record
        if cfg.stop_gap > 0 and record.nash_gap <= cfg.stop_gap:
            break


def run(game: MarkovGame, pi0: JointPolicy, cfg: EngineConfig, seed: int | None = None) -> list[IterationRecord]:
    return [record for _, record in iterate(game, pi0, cfg, seed)]


def permutation_counts(sampler: PermutationSampler, n: int, draws: int) -> dict[tuple[int, ...], int]:
    counts: dict[tuple[int, ...], int] = {}
    for k in range(draws):
        perm = sampler.draw(k, n)
        counts[perm] = counts.get(perm, 0) + 1
    return counts


def standard_configs(tau: float = 1.0, epsilon: float = 0.2, delta: float = 0.05,
                     solver: InnerSolver | None = None) -> dict[str, EngineConfig]:
    """The six (drift, neighbourhood) combinations used by the monotonicity sweep."""
    solver = solver or InnerSolver("greedy", steps=30)
    hadfs = {
        "trivial": HadfSpec("trivial"),
        "kl_penalty": HadfSpec("kl_penalty", tau=tau),
        "clip_relu": HadfSpec("clip_relu", epsilon=epsilon),
    }
    hoods = {
        "unconstrained": NeighborhoodSpec("unconstrained"),
        "per_state_kl": NeighborhoodSpec("per_state_kl", delta=delta),
    }
    return {
        f"{h}/{u}": EngineConfig(hadf=hadf, neighborhood=hood, inner_solver=solver)
        for h, hadf in hadfs.items() for u, hood in hoods.items()
    }

