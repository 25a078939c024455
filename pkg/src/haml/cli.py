"""Command-line harness: experiment runs, verification suites, game files.

Exit codes: 0 success, 1 invalid input or failed verification, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from haml import baselines, verify
from haml.engine import EngineConfig, EngineError, PermutationSampler, iterate
from haml.exact_eval import evaluate, nash_gap
from haml.game_model import (
    GameValidationError,
    JointPolicy,
    MarkovGame,
    build_prop1_game,
    build_prop2_game,
    load_game,
    load_policy,
    random_game,
    random_joint_policy,
    save_game,
    uniform_joint_policy,
)

CONFIG_SCHEMA_VERSION = 1
CSV_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
ALGORITHMS = ("haml", "naive_a2c", "haa2c", "shared_optimum")
LOG_ENV = "HAML_LOG_LEVEL"

# fixed component indices for seed derivation
SEED_PERMUTATIONS = 0
SEED_INITIAL_POLICY = 1
SEED_SAMPLING = 2
SEED_RANDOM_GAME = 3

log = logging.getLogger("haml")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


class RunFailure(RuntimeError):
    """An algorithm failed after its configuration was accepted."""


def component_seed(master: int, component: int) -> int:
    """Child seed ``component`` of ``master``; independent of how many others are drawn."""
    seq = np.random.SeedSequence(entropy=master, spawn_key=(component,))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def fmt(x: float) -> str:
    return format(float(x), ".17g")


# -- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    game: MarkovGame
    algorithm: str
    iterations: int
    seed: int
    output: Path | None
    initial_policy: object
    engine: EngineConfig | None
    haa2c: baselines.Haa2cConfig | None
    raw: dict


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"missing field '{where}{key}'")
    return doc[key]


def _game_from(doc, base: Path, seed: int) -> MarkovGame:
    if not isinstance(doc, dict):
        raise ConfigError("field 'game' must be an object")
    sources = [k for k in ("path", "builder", "random") if k in doc]
    if len(sources) != 1:
        raise ConfigError(f"field 'game' needs exactly one of path, builder, random (got {sources or 'none'})")
    try:
        if "path" in doc:
            path = base / doc["path"]
            if not path.exists():
                raise ConfigError(f"field 'game.path': file not found: {path}")
            return load_game(path)
        if "builder" in doc:
            name = doc["builder"]
            if name == "prop1":
                return build_prop1_game(int(doc.get("n", 2)))
            if name == "prop2":
                return build_prop2_game()
            raise ConfigError(f"field 'game.builder': unknown builder {name!r}; expected prop1 or prop2")
        params = dict(doc["random"])
        params.setdefault("seed", component_seed(seed, SEED_RANDOM_GAME))
        return random_game(**params)
    except ConfigError:
        raise
    except (GameValidationError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"field 'game': {exc}") from exc


def _initial_policy(spec, game: MarkovGame, base: Path, seed: int) -> JointPolicy:
    if spec in (None, "uniform"):
        return uniform_joint_policy(game)
    if spec == "random":
        return random_joint_policy(game, component_seed(seed, SEED_INITIAL_POLICY))
    if isinstance(spec, dict) and "path" in spec:
        path = base / spec["path"]
        if not path.exists():
            raise ConfigError(f"field 'initial_policy.path': file not found: {path}")
        pi = load_policy(path)
    elif isinstance(spec, dict) and "tables" in spec:
        pi = JointPolicy(tuple(np.asarray(t, dtype=float) for t in spec["tables"]))
    else:
        raise ConfigError("field 'initial_policy' must be 'uniform', 'random', {path} or {tables}")
    pi.check_game(game)
    return pi


def parse_config(doc: dict, base: Path = Path("."), seed_override: int | None = None) -> ExperimentConfig:
    """Validate a config document; raises :class:`ConfigError` naming the bad field."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = _require(doc, "schema_version", "")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"field 'schema_version': unsupported version {version!r}")
    known = {"schema_version", "game", "algorithm", "engine", "haa2c", "iterations", "seed",
             "initial_policy", "output", "shared_optimum"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
    seed = doc.get("seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("field 'seed' must be a non-negative integer")
    algorithm = _require(doc, "algorithm", "")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"field 'algorithm': unknown {algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
    iterations = doc.get("iterations", 1)
    if not isinstance(iterations, int) or iterations < 1:
        raise ConfigError("field 'iterations' must be a positive integer")
    game = _game_from(_require(doc, "game", ""), base, seed)
    try:
        initial = _initial_policy(doc.get("initial_policy"), game, base, seed)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"field 'initial_policy': {exc}") from exc
    engine = haa2c = None
    perm_seed = component_seed(seed, SEED_PERMUTATIONS)
    try:
        if algorithm == "haml":
            engine = EngineConfig.from_dict(doc.get("engine", {}))
            engine = replace(engine, iterations=iterations,
                             permutations=replace(engine.permutations, seed=perm_seed))
            engine.hadf_for(0, game.n_agents), engine.neighborhood_for(0, game.n_agents)
        elif algorithm == "haa2c":
            params = dict(doc.get("haa2c", {}))
            perms = PermutationSampler(**params.pop("permutations", {}))
            haa2c = baselines.Haa2cConfig(**params, permutations=replace(perms, seed=perm_seed))
    except (ValueError, TypeError) as exc:
        section = "engine" if algorithm == "haml" else "haa2c"
        raise ConfigError(f"field '{section}': {exc}") from exc
    output = doc.get("output")
    return ExperimentConfig(game, algorithm, iterations, seed, None if output is None else base / output,
                            initial, engine, haa2c, doc)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, path.parent, seed_override)


# -- running ---------------------------------------------------------------


def csv_header(game: MarkovGame) -> list[str]:
    n = game.n_agents
    return (["k", "J", "nash_gap"] + [f"V_{s}" for s in range(game.n_states)] + ["permutation"]
            + [f"hamo_{i}" for i in range(n)] + [f"drift_{i}" for i in range(n)]
            + ["fallback_count", "wall_time_ms"])


def _row(game, k, pi, perm=(), hamo=None, drift=None, fallbacks=0, elapsed=None) -> list[str]:
    ev = evaluate(game, pi)
    n = game.n_agents
    hamo = [""] * n if hamo is None else [fmt(h) for h in hamo]
    drift = [""] * n if drift is None else [fmt(d) for d in drift]
    wall = "" if elapsed is None else fmt(elapsed * 1e3)
    return ([str(k), fmt(ev.j), fmt(nash_gap(game, pi, ev))] + [fmt(v) for v in ev.v]
            + ["-".join(map(str, perm))] + hamo + drift + [str(fallbacks), wall])


def execute(cfg: ExperimentConfig, timing: bool = False) -> tuple[list[list[str]], JointPolicy, dict]:
    """Run the configured algorithm; rows are CSV-ready strings, ``extra`` goes into the summary."""
    game = cfg.game
    clock = time.perf_counter
    rows, extra = [], {}
    pi = cfg.initial_policy
    if cfg.algorithm == "haml":
        t0 = clock()
        for pi, rec in iterate(game, pi, cfg.engine):
            rows.append([str(rec.k), fmt(rec.j_after), fmt(rec.nash_gap)] + [fmt(v) for v in rec.v_after]
                        + ["-".join(map(str, rec.permutation))] + [fmt(h) for h in rec.hamo]
                        + [fmt(d) for d in rec.drift]
                        + [str(rec.fallback_count), fmt((clock() - t0) * 1e3) if timing else ""])
            t0 = clock()
    elif cfg.algorithm == "naive_a2c":
        for k in range(cfg.iterations):
            t0 = clock()
            pi = baselines.naive_simultaneous_step(game, pi)
            rows.append(_row(game, k, pi, elapsed=clock() - t0 if timing else None))
    elif cfg.algorithm == "haa2c":
        with np.errstate(divide="ignore"):
            params = baselines.SoftmaxPolicyParams(tuple(np.log(t) for t in pi.tables)) \
                if all(np.all(t > 0) for t in pi.tables) else None
        if params is None:
            raise ConfigError("field 'initial_policy': haa2c needs strictly positive initial tables")
        sampling = component_seed(cfg.seed, SEED_SAMPLING)
        for k in range(cfg.iterations):
            t0 = clock()
            params, perm = baselines.haa2c_step(game, params, cfg.haa2c, k, sampling)
            pi = params.policy()
            rows.append(_row(game, k, pi, perm, elapsed=clock() - t0 if timing else None))
    else:
        t0 = clock()
        p_star, j_share = baselines.shared_policy_optimum(game)
        pi = JointPolicy(tuple(np.tile([p_star, 1.0 - p_star], (game.n_states, 1))
                               for _ in range(game.n_agents)))
        rows.append(_row(game, 0, pi, elapsed=clock() - t0 if timing else None))
        extra = {"p_star": p_star, "j_share": j_share}
    return rows, pi, extra


def write_results(cfg: ExperimentConfig, rows, pi: JointPolicy, extra: dict, out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(cfg.game))
        writer.writerows(rows)
    ev = evaluate(cfg.game, pi)
    summary = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "final_j": ev.j,
        "final_nash_gap": nash_gap(cfg.game, pi, ev),
        "iterations": len(rows),
        "seed": cfg.seed,
        "final_policy": pi.to_dict(),
        "config": cfg.raw,
        **extra,
    }
    summary_path = out.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary_path


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out) if args.out else cfg.output
    if out is None:
        raise ConfigError("field 'output' is missing and no --out was given")
    try:
        rows, pi, extra = execute(cfg, timing=args.timing)
    except ConfigError:
        raise
    except Exception as exc:
        raise RunFailure(f"{cfg.algorithm} failed: {exc}") from exc
    summary = write_results(cfg, rows, pi, extra, out)
    last = rows[-1]
    print(f"{cfg.algorithm}: {len(rows)} rows, final J {float(last[1]):.12g}, nash_gap {float(last[2]):.3g}")
    print(f"wrote {out} and {summary}")
    return 0


# -- verify ----------------------------------------------------------------

SUITE_FLAGS = {
    "prop1": {"n": "ns"},
    "lemma1": {"seeds": "seeds"},
    "monotone": {"games": "games", "iterations": "iterations"},
    "nash": {"games": "games", "iterations": "iterations"},
    "hadf": {"directions": "directions", "instances": "instances"},
    "happo-identity": {"instances": "instances"},
    "haa2c": {"games": "games"},
}


def _suite_kwargs(name: str, args) -> dict:
    kwargs = {}
    for flag, param in SUITE_FLAGS.get(name, {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            kwargs[param] = tuple(value) if isinstance(value, list) else value
    return kwargs


def run_suites(names, args) -> tuple[bool, dict]:
    report = {"schema_version": REPORT_SCHEMA_VERSION, "suites": {}}
    ok = True
    for name in names:
        checks = verify.SUITES[name](**_suite_kwargs(name, args))
        for check in checks:
            print(check.line())
        ok &= all(c.passed for c in checks)
        report["suites"][name] = [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks]
    report["passed"] = ok
    return ok, report


def cmd_verify(args) -> int:
    valid = list(verify.SUITES) + ["determinism", "all"]
    if args.suite not in valid:
        print(f"unknown suite {args.suite!r}; valid suites: {', '.join(valid)}", file=sys.stderr)
        return 1
    names = list(verify.SUITES) if args.suite == "all" else [s for s in [args.suite] if s != "determinism"]
    ok, report = run_suites(names, args)
    if args.suite in ("determinism", "all"):
        checks = verify_determinism()
        for check in checks:
            print(check.line())
        ok &= all(c.passed for c in checks)
        report["suites"]["determinism"] = [{"name": c.name, "passed": c.passed, "detail": c.detail}
                                           for c in checks]
        report["passed"] = ok
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


DETERMINISM_CONFIGS = {
    "haml-random": {
        "schema_version": 1, "algorithm": "haml", "iterations": 8, "seed": 5, "initial_policy": "random",
        "game": {"random": {"n_agents": 3, "n_states": 3, "action_counts": [2, 3, 2], "gamma": 0.9}},
        "engine": {"hadf": {"kind": "clip_relu", "epsilon": 0.2},
                   "neighborhood": {"kind": "per_state_kl", "delta": 0.05},
                   "inner_solver": {"kind": "exp_gradient", "steps": 30}},
    },
    "haa2c-monte-carlo": {
        "schema_version": 1, "algorithm": "haa2c", "iterations": 4, "seed": 9, "initial_policy": "random",
        "game": {"random": {"n_agents": 2, "n_states": 2, "action_counts": [2, 3], "gamma": 0.9}},
        "haa2c": {"mode": "monte_carlo", "batch": 4, "horizon": 8},
    },
}


def verify_determinism() -> list[verify.Check]:
    """Run each config twice into separate files and compare bytes."""
    import tempfile

    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        for name, doc in DETERMINISM_CONFIGS.items():
            blobs = []
            for rep in range(2):
                cfg = parse_config(doc, Path(tmp))
                out = Path(tmp) / f"{name}-{rep}.csv"
                summary = write_results(cfg, *execute(cfg), out)
                blobs.append((out.read_bytes(), summary.read_bytes()))
            checks.append(verify.Check(f"determinism {name}", blobs[0] == blobs[1],
                                       f"{len(blobs[0][0])} CSV bytes, {len(blobs[0][1])} summary bytes"))
    return checks


# -- game files ------------------------------------------------------------


def cmd_gen_game(args) -> int:
    if args.builder == "prop1":
        game = build_prop1_game(args.n)
    elif args.builder == "prop2":
        game = build_prop2_game()
    else:
        actions = [int(a) for a in args.actions.split(",")]
        if len(actions) == 1:
            actions = actions * args.agents
        game = random_game(args.seed, args.agents, args.states, actions, args.gamma,
                           reward_range=(args.reward_low, args.reward_high))
    save_game(game, args.out)
    print(f"wrote {args.out}: {game.n_agents} agents, {game.n_states} states, actions {list(game.action_counts)}")
    return 0


def cmd_eval(args) -> int:
    for p in (args.game, args.policy):
        if not Path(p).exists():
            raise ConfigError(f"file not found: {p}")
    game = load_game(args.game)
    pi = load_policy(args.policy)
    pi.check_game(game)
    ev = evaluate(game, pi)
    print(f"J {fmt(ev.j)}")
    for s, v in enumerate(ev.v):
        print(f"V[{s}] {fmt(v)}")
    print(f"nash_gap {fmt(nash_gap(game, pi, ev))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="haml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--timing", action="store_true", help="fill the wall_time_ms column")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run a verification suite")
    ver.add_argument("suite")
    ver.add_argument("--n", type=int, action="append", help="prop1 agent counts (repeatable)")
    ver.add_argument("--seeds", type=int)
    ver.add_argument("--games", type=int)
    ver.add_argument("--iterations", type=int)
    ver.add_argument("--directions", type=int)
    ver.add_argument("--instances", type=int)
    ver.add_argument("--out", help="write a JSON report")
    ver.set_defaults(func=cmd_verify)

    gen = sub.add_parser("gen-game", help="write a game file")
    gen.add_argument("--out", required=True)
    gen.add_argument("--builder", choices=("random", "prop1", "prop2"), default="random")
    gen.add_argument("--n", type=int, default=2, help="agents for prop1")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--agents", type=int, default=2)
    gen.add_argument("--states", type=int, default=2)
    gen.add_argument("--actions", default="2", help="comma-separated per-agent counts, or one for all")
    gen.add_argument("--gamma", type=float, default=0.9)
    gen.add_argument("--reward-low", type=float, default=0.0)
    gen.add_argument("--reward-high", type=float, default=1.0)
    gen.set_defaults(func=cmd_gen_game)

    ev = sub.add_parser("eval", help="evaluate a policy file on a game file")
    ev.add_argument("--game", required=True)
    ev.add_argument("--policy", required=True)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"error: {LOG_ENV}={level!r} is not a logging level", file=sys.stderr)
        return 1
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GameValidationError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (EngineError, baselines.BaselineError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
