"""End-to-end acceptance checks, one test per criterion at its stated tolerance.

Each test prints a single ``PASS``/``FAIL`` line (visible with ``pytest -s``)
followed by the detail of every underlying check.
"""
import time
from pathlib import Path

import pytest

from haml import cli, verify

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def report(label, checks, elapsed, budget=None):
    within = budget is None or elapsed < budget
    ok = all(c.passed for c in checks) and within
    timing = f"{elapsed:.2f}s" + (f" (budget {budget:g}s)" if budget is not None else "")
    print(f"\n{'PASS' if ok else 'FAIL'} {label} [{timing}]")
    for c in checks:
        print("    " + c.line())
    failed = [c.line() for c in checks if not c.passed]
    assert not failed, "\n".join(failed)
    assert within, f"{label} took {elapsed:.2f}s, budget {budget}s"


def timed(fn, **kwargs):
    start = time.perf_counter()
    checks = fn(**kwargs)
    return checks, time.perf_counter() - start


def test_criterion_1_shared_policy_ratio():
    checks, elapsed = timed(verify.suite_prop1, ns=(2, 4, 6), tol=1e-9)
    assert len(checks) >= 3
    report("criterion 1: shared-policy ratio 2/2^n for n in {2,4,6}", checks, elapsed, budget=5.0)


def test_criterion_2_simultaneous_update_trap():
    checks, elapsed = timed(verify.suite_prop2, p0=0.7)
    report("criterion 2: naive step J=-1, sequential step J=2", checks, elapsed, budget=1.0)


def test_criterion_3_advantage_decomposition():
    checks, elapsed = timed(verify.suite_lemma1, seeds=100, tol=1e-10)
    report("criterion 3: advantage decomposition residual <= 1e-10", checks, elapsed, budget=60.0)


def test_criterion_4_monotone_improvement():
    checks, elapsed = timed(verify.suite_monotone, games=100, iterations=100, tol=1e-9)
    assert len(checks) >= 6
    report("criterion 4: J and per-state V non-decreasing, 100 games x 100 iterations x 6 configs",
           checks, elapsed, budget=15 * 60.0)


def test_criterion_5_nash_gap_and_fixed_points():
    checks, elapsed = timed(verify.suite_nash, games=100, iterations=500, gap_tol=1e-6, success_rate=0.95)
    report("criterion 5: nash_gap <= 1e-6 on >= 95% of games, equilibria are fixed points", checks, elapsed)


def test_criterion_6_drift_axioms():
    checks, elapsed = timed(verify.suite_hadf, directions=100, step=1e-5, tol=1e-4)
    report("criterion 6: drift non-negativity, zero at identity, Gateaux residual, clip band", checks, elapsed)


def test_criterion_7_clip_objective_identity():
    checks, elapsed = timed(verify.suite_happo_identity, instances=1000, tol=1e-10)
    report("criterion 7: clipped objective identity residual <= 1e-10", checks, elapsed)


def test_criterion_8_sequential_actor_critic():
    checks, elapsed = timed(verify.suite_haa2c, rel_tol=1e-6, mc_tol=1e-12)
    report("criterion 8: analytic gradient vs differences, unbiased Monte-Carlo objective", checks, elapsed)


@pytest.fixture
def tmp_dir(tmp_path):
    return tmp_path


def test_criterion_9_determinism(tmp_dir):
    start = time.perf_counter()
    checks = list(cli.verify_determinism())
    for name in ("random_happo.json", "random_haa2c.json", "prop2_haml.json"):
        blobs = []
        for rep in range(2):
            out = tmp_dir / f"{name}-{rep}.csv"
            code = cli.main(["run", "--config", str(CONFIGS / name), "--seed", "11", "--out", str(out)])
            blobs.append((code, out.read_bytes(), out.with_suffix(".summary.json").read_bytes()))
        checks.append(verify.Check(f"run {name} twice", blobs[0] == blobs[1] and blobs[0][0] == 0,
                                   f"{len(blobs[0][1])} CSV bytes"))
    for suite in ("prop1", "prop2", "lemma1", "happo-identity", "hadf", "haa2c"):
        paths = [tmp_dir / f"verify-{suite}-{rep}.json" for rep in range(2)]
        codes = [cli.main(["verify", suite, "--out", str(p)]) for p in paths]
        same = paths[0].read_bytes() == paths[1].read_bytes()
        checks.append(verify.Check(f"verify {suite} twice", same and codes == [0, 0],
                                   f"{paths[0].stat().st_size} report bytes"))
    report("criterion 9: repeated run/verify invocations give byte-identical files",
           checks, time.perf_counter() - start)
