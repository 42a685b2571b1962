"""Exit criteria. Each test records one PASS/FAIL line shown in the terminal summary."""

import time

import numpy as np
import pytest

from aoi_whittle import dtmc, mdp, whittle
from aoi_whittle.core import ArrivalProcess, age_lower_bound
from aoi_whittle.experiment import ExperimentConfig, run_experiment, write_outputs
from aoi_whittle.sim import SCHEDULERS, InvariantViolation, make_scheduler, run

P_GRID = tuple(k / 10 for k in range(1, 11))
THRESHOLDS = tuple(range(1, 51))
COSTS = tuple(j * 0.5 for j in range(51))


def test_1_closed_form_consistency(record_criterion):
    start = time.perf_counter()
    worst = 0.0
    for p in P_GRID:
        for xbar in THRESHOLDS:
            for c in COSTS:
                a = whittle.average_cost(xbar, whittle.SubproblemParams(p, c))
                b = dtmc.dtmc_average_cost(p, xbar, c)
                worst = max(worst, abs(a - b))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 1.0
    record_criterion(1, ok, f"closed forms agree: worst {worst:.2e} <= 1e-12, {elapsed:.2f}s < 1s")
    assert worst <= 1e-12
    assert elapsed < 1.0


def test_2_equal_desirability_root(record_criterion):
    start = time.perf_counter()
    worst = 0.0
    for p in P_GRID:
        for x in range(1, 51):
            params = whittle.SubproblemParams(p, whittle.whittle_index(x, 1, p))
            worst = max(worst, abs(whittle.average_cost(x, params) - whittle.average_cost(x + 1, params)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    record_criterion(2, ok, f"cost(x) = cost(x+1) at C = I(x,1): worst {worst:.2e} <= 1e-9, {elapsed:.2f}s < 1s")
    assert worst <= 1e-9
    assert elapsed < 1.0


def test_3_oracle_agreement(record_criterion):
    start = time.perf_counter()
    mismatches, worst_gain = [], 0.0
    for p in P_GRID:
        for c in COSTS:
            policy = mdp.relative_value_iteration(mdp.build_subproblem(p, c, 200), tolerance=1e-9)
            found = mdp.extract_threshold(policy)  # raises on a non-threshold shape
            params = whittle.SubproblemParams(p, c)
            expected = whittle.optimal_threshold(params)
            if found != expected:
                mismatches.append((p, c, found, expected))
            worst_gain = max(worst_gain, abs(policy.gain - whittle.average_cost(expected, params)))
    elapsed = time.perf_counter() - start
    ok = not mismatches and worst_gain <= 1e-5 and elapsed < 60
    record_criterion(
        3, ok,
        f"RVI threshold == closed form on {len(P_GRID) * len(COSTS)} (p,C) pairs "
        f"({len(mismatches)} mismatches), gain err {worst_gain:.2e} <= 1e-5, {elapsed:.1f}s < 60s",
    )
    assert not mismatches
    assert worst_gain <= 1e-5
    assert elapsed < 60


def test_4_indexability(record_criterion):
    start = time.perf_counter()
    grid = [float(c) for c in range(51)]
    failures = [p for p in P_GRID if not whittle.is_nested(whittle.indexability_sweep(p, grid, 100))]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 1.0
    record_criterion(4, ok, f"idle sets nested for C = 0..50 at every p (failures: {failures}), {elapsed:.2f}s < 1s")
    assert not failures
    assert elapsed < 1.0


def test_5_steady_state(record_criterion):
    start = time.perf_counter()
    worst_rel = 0.0
    for p in P_GRID:
        report = run(ArrivalProcess((p,), 5000 + int(p * 10)), make_scheduler("whittle", (p,)), 10**6)
        worst_rel = max(worst_rel, abs(report.time_avg_total_age - dtmc.preaction_mean_age(p)) * p)
    worst_tv = 0.0
    for p, xbar in [(0.5, 2), (0.3, 4), (0.8, 3), (1.0, 1)]:
        ages = dtmc.simulate_post_action_ages(p, xbar, 10**6, seed=77)
        worst_tv = max(worst_tv, dtmc.empirical_distribution(ages, p, xbar).tv_distance())
    elapsed = time.perf_counter() - start
    ok = worst_rel <= 0.01 and worst_tv <= 0.01 and elapsed < 30
    record_criterion(
        5, ok,
        f"mean age within {worst_rel:.2%} of 1/p (<= 1%), post-action TV {worst_tv:.4f} <= 0.01, "
        f"{elapsed:.1f}s < 30s",
    )
    assert worst_rel <= 0.01
    assert worst_tv <= 0.01
    assert elapsed < 30


def test_6_whittle_near_optimal_sweep(record_criterion, tmp_path):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_dict(
        {
            "users": [0.5, 0.5],
            "schedulers": ["whittle", "optimal_lookup"],
            "horizon": 100_000,
            "replications": 20,
            "seed_base": 1000,
            "sweep": {"p": [0.2, 0.4, 0.6, 0.8]},
            "mdp": {"x_max": 40, "tolerance": 1e-9},
            "output": str(tmp_path / "sweep"),
        }
    )
    result = run_experiment(cfg)
    write_outputs(result)
    ratios = {
        cfg.sweep[s.point]: s.ratio_to_optimal for s in result.summary if s.scheduler == "whittle"
    }
    elapsed = time.perf_counter() - start
    worst = max(ratios.values())
    ok = worst <= 1.02 and elapsed < 600
    shown = ", ".join(f"p={p}: {r:.6f}" for p, r in ratios.items())
    record_criterion(6, ok, f"whittle / optimal mean age <= 1.02 ({shown}), {elapsed:.0f}s < 600s")
    assert worst <= 1.02
    assert elapsed < 600


def test_7_total_age_lower_bound(record_criterion):
    policy = mdp.solve_joint((0.3, 0.6, 0.9), 20)
    checked = 0
    for p in [(0.5,), (0.3, 0.8), (1.0, 1.0), (0.3, 0.6, 0.9), (1.0, 1.0, 1.0)]:
        for name in SCHEDULERS:
            if name == "optimal_lookup" and p != policy.p:
                continue
            sched = make_scheduler(name, p, policy=policy, seed=3)
            report = run(ArrivalProcess(p, 3), sched, 20_000)
            assert report.min_total_age >= age_lower_bound(len(p))
            checked += 1

    # the in-loop guard fires on a corrupted state
    def corrupt(ages, flags, slot):
        ages[:] = [0] * len(ages)
        return 0

    bad = make_scheduler("whittle", (0.5, 0.5))
    bad.rule = corrupt
    with pytest.raises(InvariantViolation):
        run(ArrivalProcess((0.5, 0.5), 0), bad, 5)
    record_criterion(7, True, f"total age >= N(N+1)/2 in every slot of {checked} runs; guard raises on violation")


def test_8_determinism(record_criterion, tmp_path):
    base = {
        "users": [0.5, 0.5],
        "schedulers": ["whittle", "max_age", "random", "optimal_lookup"],
        "horizon": 5000,
        "replications": 3,
        "seed_base": 42,
        "sweep": {"p": [0.3, 0.7]},
        "mdp": {"x_max": 30},
    }
    snapshots = []
    for name in ("a", "b"):
        cfg = ExperimentConfig.from_dict({**base, "output": str(tmp_path / name)})
        paths = write_outputs(run_experiment(cfg))
        snapshots.append({k: p.read_bytes() for k, p in paths.items()})
    ok = snapshots[0] == snapshots[1]
    record_criterion(8, ok, f"re-run produces byte-identical {', '.join(sorted(snapshots[0]))} files")
    assert ok
