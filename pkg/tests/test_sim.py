import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoi_whittle.core import ArrivalProcess, Decision, NetworkState
from aoi_whittle.mdp import solve_joint
from aoi_whittle.sim import (
    InvariantViolation,
    is_wasted,
    make_scheduler,
    run,
    step,
    whittle_decide,
)


def reference_run(p, name, seed, horizon, initial_ages=None):
    """Slot-by-slot simulation through the public step / scheduler API."""
    proc = ArrivalProcess(p, seed)
    sched = make_scheduler(name, p, seed=seed)
    sched.reset(seed)
    n = len(p)
    ages = tuple(initial_ages or range(1, n + 1))
    state = NetworkState(ages, proc.sample_arrivals(0), 0)
    total = 0
    for t in range(horizon):
        total += state.total_age()
        decision = sched(state)
        state = step(state, decision)
        state = NetworkState(state.ages, proc.sample_arrivals(t + 1), t + 1)
    total += state.total_age()
    return total / (horizon + 1)


class TestStep:
    def test_update_with_arrival(self):
        state = NetworkState((3, 5), (1, 0))
        assert step(state, Decision(1)).ages == (1, 6)

    def test_idle(self):
        state = NetworkState((3, 5), (1, 1))
        assert step(state, Decision(0)).ages == (4, 6)

    def test_update_without_arrival(self):
        state = NetworkState((3, 5), (0, 1))
        decision = Decision(1)
        assert step(state, decision).ages == (4, 6)
        assert is_wasted(decision, state.arrivals)

    def test_slot_advances_and_flags_cleared(self):
        nxt = step(NetworkState((3, 5), (1, 1), slot=9), Decision(2))
        assert nxt.slot == 10
        assert nxt.arrivals == (0, 0)

    def test_invalid_decision(self):
        with pytest.raises(ValueError):
            step(NetworkState((3, 5), (1, 1)), Decision(3))

    @settings(max_examples=100)
    @given(
        ages=st.lists(st.integers(1, 50), min_size=1, max_size=5, unique=True),
        data=st.data(),
    )
    def test_no_buffer(self, ages, data):
        n = len(ages)
        flags_a = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        target = data.draw(st.integers(0, n))
        flags_b = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        if target:
            flags_b[target - 1] = flags_a[target - 1]
        # flags of users not served leave no trace in the next state
        a = step(NetworkState(tuple(ages), tuple(flags_a)), Decision(target))
        b = step(NetworkState(tuple(ages), tuple(flags_b)), Decision(target))
        assert a == b


class TestWhittleDecide:
    def test_largest_index(self):
        state = NetworkState((2, 9), (1, 0))
        assert whittle_decide(state, (0.5, 0.5)) == Decision(1)

    def test_idle_without_arrivals(self):
        assert whittle_decide(NetworkState((2, 9), (0, 0)), (0.5, 0.5)) == Decision(0)

    def test_tie_to_smallest_id(self):
        assert whittle_decide(NetworkState((4, 4), (1, 1)), (0.3, 0.3)) == Decision(1)

    def test_heterogeneous_probabilities(self):
        # I(3,1; 0.2) = 3 + 15 = 18 beats I(5,1; 0.9) = 10 + 5.56
        assert whittle_decide(NetworkState((3, 5), (1, 1)), (0.2, 0.9)) == Decision(1)


class TestRun:
    def test_single_certain_user(self):
        report = run(ArrivalProcess((1.0,), 0), make_scheduler("whittle", (1.0,)), 1000)
        assert report.time_avg_total_age == 1.0
        assert report.per_user_update_count == (1000,)

    def test_two_certain_users(self):
        report = run(ArrivalProcess((1.0, 1.0), 0), make_scheduler("whittle", (1.0, 1.0)), 10**5)
        assert report.time_avg_total_age == pytest.approx(3.0, abs=0.01)

    @pytest.mark.parametrize("name", ["whittle", "max_age", "round_robin", "random"])
    @pytest.mark.parametrize("p", [(0.3, 0.7), (0.5, 0.2, 0.9)])
    def test_matches_reference_loop(self, name, p):
        report = run(ArrivalProcess(p, 42), make_scheduler(name, p, seed=42), 3000)
        assert report.time_avg_total_age == pytest.approx(reference_run(p, name, 42, 3000), rel=1e-12)

    def test_counts(self):
        p = (0.5, 0.5, 0.5)
        report = run(ArrivalProcess(p, 3), make_scheduler("round_robin", p), 5000)
        assert sum(report.per_user_update_count) + report.wasted_slots == 5000
        report = run(ArrivalProcess(p, 3), make_scheduler("whittle", p), 5000)
        assert report.wasted_slots == 0
        assert sum(report.per_user_update_count) <= 5000

    def test_rejects_bad_initial_ages(self):
        sched = make_scheduler("whittle", (0.5, 0.5))
        with pytest.raises(ValueError):
            run(ArrivalProcess((0.5, 0.5), 0), sched, 10, initial_ages=(2, 2))
        with pytest.raises(ValueError):
            run(ArrivalProcess((0.5, 0.5), 0), sched, 10, initial_ages=(0, 2))

    def test_deterministic(self):
        p = (0.4, 0.6)
        a = run(ArrivalProcess(p, 9), make_scheduler("random", p, seed=9), 20_000)
        b = run(ArrivalProcess(p, 9), make_scheduler("random", p, seed=9), 20_000)
        assert a == b

    def test_trace_records_every_decision(self):
        buf = io.StringIO()
        p = (0.5, 0.3, 0.8)
        run(ArrivalProcess(p, 1), make_scheduler("whittle", p), 500, trace=buf)
        rows = list(csv.reader(io.StringIO(buf.getvalue())))
        assert rows[0] == ["slot", "D", "X_1", "X_2", "X_3", "L_1", "L_2", "L_3"]
        body = np.array(rows[1:], dtype=int)
        assert len(body) == 500
        ages = body[:, 2:5]
        assert np.all(ages.sum(axis=1) >= 6)
        assert all(len(set(row)) == 3 for row in ages)

    def test_lower_bound_violation_raises(self):
        def corrupting_rule(ages, flags, slot):
            # resets both ages in place, which the dynamics can never do
            ages[:] = [0, 0]
            return 0

        sched = make_scheduler("whittle", (1.0, 1.0))
        sched.rule = corrupting_rule
        with pytest.raises(InvariantViolation):
            run(ArrivalProcess((1.0, 1.0), 0), sched, 10)


class TestSchedulers:
    def test_unknown(self):
        with pytest.raises(ValueError):
            make_scheduler("fifo", (0.5,))

    def test_lookup_requires_policy(self):
        with pytest.raises(ValueError):
            make_scheduler("optimal_lookup", (0.5, 0.5))
        with pytest.raises(ValueError):
            make_scheduler("optimal", (0.5, 0.5, 0.5), policy=solve_joint((0.5, 0.5), 10))

    def test_lookup_follows_table(self):
        policy = solve_joint((0.3, 0.6), 20)
        sched = make_scheduler("optimal", (0.3, 0.6), policy=policy)
        rng = np.random.default_rng(5)
        for _ in range(200):
            ages = list(rng.choice(np.arange(1, 30), size=2, replace=False))
            flags = tuple(int(v) for v in rng.integers(0, 2, size=2))
            assert sched(NetworkState(tuple(ages), flags)).target == policy.decide(ages, flags)

    def test_random_picks_only_arrivals(self):
        sched = make_scheduler("random", (0.5, 0.5, 0.5), seed=1)
        picks = {sched(NetworkState((1, 2, 3), (0, 1, 1))).target for _ in range(200)}
        assert picks == {2, 3}
        assert sched(NetworkState((1, 2, 3), (0, 0, 0))).target == 0

    def test_round_robin_cycles(self):
        sched = make_scheduler("round_robin", (0.5, 0.5, 0.5))
        targets = [sched(NetworkState((1, 2, 3), (1, 1, 1), slot=t)).target for t in range(6)]
        assert targets == [1, 2, 3, 1, 2, 3]

    @pytest.mark.parametrize(
        "p", [(0.3, 0.3), (0.7, 0.7), (0.2, 0.8), (0.5, 0.5, 0.5), (0.3, 0.6, 0.9)]
    )
    def test_whittle_dominates_baselines(self, p):
        wins_random = wins_rr = 0
        seeds = range(20)
        for s in seeds:
            w = run(ArrivalProcess(p, s), make_scheduler("whittle", p), 10_000).time_avg_total_age
            r = run(ArrivalProcess(p, s), make_scheduler("random", p, seed=s), 10_000).time_avg_total_age
            rr = run(ArrivalProcess(p, s), make_scheduler("round_robin", p), 10_000).time_avg_total_age
            wins_random += w <= r
            wins_rr += w <= rr
        assert wins_random / len(seeds) >= 0.95
        assert wins_rr / len(seeds) >= 0.95
