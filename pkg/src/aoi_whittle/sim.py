"""Slotted broadcast simulator with pluggable schedulers.

Each slot the base station sees every user's age X_i(t) and this slot's
arrival flags, picks at most one user, and ages evolve as

    X_i(t+1) = 1          if lam_i(t) = 1 and D(t) = i
             = X_i(t) + 1 otherwise.

Packets that are not sent in their arrival slot are dropped.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Sequence, TextIO

import numpy as np

from .core import (
    ArrivalProcess,
    Decision,
    NetworkState,
    age_lower_bound,
    default_initial_ages,
    validate_probabilities,
)
from .mdp import JointPolicy

log = logging.getLogger(__name__)

BLOCK = 1 << 16
SCHEDULERS = ("whittle", "max_age", "round_robin", "random", "optimal_lookup")
ALIASES = {"optimal": "optimal_lookup"}


class InvariantViolation(AssertionError):
    pass


def step(state: NetworkState, decision: Decision, arrivals: Sequence[int] | None = None) -> NetworkState:
    """Advance one slot. ``arrivals`` defaults to the flags stored in ``state``.

    Updating a user without an arrival is allowed and leaves its age growing.
    The returned state carries all-zero flags; the caller installs the next
    slot's arrivals.
    """
    flags = state.arrivals if arrivals is None else tuple(arrivals)
    decision.validate(state.n_users)
    if decision.target and not flags[decision.target - 1]:
        log.debug("slot %d: update of user %d without arrival", state.slot, decision.target)
    ages = tuple(
        1 if (decision.target == i + 1 and flags[i] == 1) else x + 1
        for i, x in enumerate(state.ages)
    )
    return NetworkState(ages, (0,) * state.n_users, state.slot + 1)


def is_wasted(decision: Decision, arrivals: Sequence[int]) -> bool:
    return decision.target != 0 and not arrivals[decision.target - 1]


def whittle_decide(state: NetworkState, p: Sequence[float]) -> Decision:
    """Update the user with the largest Whittle index; idle if all indices are 0."""
    return Decision(_whittle_rule(p)(list(state.ages), state.arrivals, state.slot))


# A decision rule maps (ages, flags, slot) to a target in 0..N.
Rule = Callable[[Sequence[int], Sequence[int], int], int]


def _whittle_rule(p: Sequence[float]) -> Rule:
    probs = validate_probabilities(p)

    def decide(ages, flags, slot):
        best, target = 0.0, 0
        for i, (x, lam, pi) in enumerate(zip(ages, flags, probs)):
            if lam:
                index = x**2 / 2 - x / 2 + x / pi
                if index > best:
                    best, target = index, i + 1
        return target

    return decide


def _max_age_rule(ages, flags, slot):
    best, target = 0, 0
    for i, (x, lam) in enumerate(zip(ages, flags)):
        if lam and x > best:
            best, target = x, i + 1
    return target


def _round_robin_rule(n: int) -> Rule:
    def decide(ages, flags, slot):
        return slot % n + 1

    return decide


def _lookup_rule(policy: JointPolicy) -> Rule:
    n, x_max = policy.n_users, policy.x_max
    table = policy.action.ravel().tolist()
    age_strides = [x_max ** (n - 1 - i) * 2**n for i in range(n)]
    flag_strides = [2 ** (n - 1 - i) for i in range(n)]

    def decide(ages, flags, slot):
        idx = 0
        for x, lam, sa, sf in zip(ages, flags, age_strides, flag_strides):
            idx += (min(x, x_max) - 1) * sa + lam * sf
        return table[idx]

    return decide


class Scheduler:
    """Named decision rule. ``rule(ages, flags, slot)`` returns a target in 0..N."""

    def __init__(self, name: str, rule: Rule, n_users: int, reseed: Callable[[int], None] | None = None):
        self.name = name
        self.rule = rule
        self.n_users = n_users
        self._reseed = reseed

    def reset(self, seed: int) -> None:
        if self._reseed is not None:
            self._reseed(seed)

    def __call__(self, state: NetworkState) -> Decision:
        return Decision(self.rule(list(state.ages), state.arrivals, state.slot)).validate(self.n_users)

    def __repr__(self):
        return f"Scheduler({self.name!r}, n_users={self.n_users})"


class _RandomRule:
    """Uniform choice among users with an arrival; idle if there are none."""

    def __init__(self, seed: int = 0):
        self.reseed(seed)

    def reseed(self, seed: int) -> None:
        # spawn_key keeps this stream disjoint from the arrival streams
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0x5EED,))))
        self._buf: list[float] = []

    def __call__(self, ages, flags, slot):
        if not self._buf:
            self._buf = self._gen.random(BLOCK).tolist()[::-1]
        u = self._buf.pop()
        candidates = [i + 1 for i, lam in enumerate(flags) if lam]
        if not candidates:
            return 0
        return candidates[int(u * len(candidates))]


def make_scheduler(
    name: str,
    p: Sequence[float],
    policy: JointPolicy | None = None,
    seed: int = 0,
) -> Scheduler:
    name = ALIASES.get(name, name)
    probs = validate_probabilities(p)
    n = len(probs)
    if name == "whittle":
        return Scheduler(name, _whittle_rule(probs), n)
    if name == "max_age":
        return Scheduler(name, _max_age_rule, n)
    if name == "round_robin":
        return Scheduler(name, _round_robin_rule(n), n)
    if name == "random":
        rule = _RandomRule(seed)
        return Scheduler(name, rule, n, reseed=rule.reseed)
    if name == "optimal_lookup":
        if policy is None:
            raise ValueError("optimal_lookup needs a solved joint policy")
        if policy.n_users != n:
            raise ValueError(f"policy is for {policy.n_users} users, network has {n}")
        return Scheduler(name, _lookup_rule(policy), n)
    raise ValueError(f"unknown scheduler {name!r}; choose from {', '.join(SCHEDULERS)}")


@dataclass(frozen=True)
class SimReport:
    scheduler: str
    horizon: int
    seed: int
    time_avg_total_age: float
    per_user_avg_age: tuple[float, ...]
    per_user_update_count: tuple[int, ...]
    wasted_slots: int
    min_total_age: int


def run(
    users: ArrivalProcess,
    scheduler: Scheduler,
    horizon: int,
    initial_ages: Sequence[int] | None = None,
    trace: TextIO | None = None,
) -> SimReport:
    """Simulate slots 0..horizon and average the pre-decision ages.

    The reported average is (1/(T+1)) sum_{t=0..T} sum_i X_i(t). Decisions
    are taken in slots 0..T-1. Raises InvariantViolation as soon as the total
    age drops below N(N+1)/2.
    """
    n = users.n_users
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    ages = list(default_initial_ages(n) if initial_ages is None else initial_ages)
    if len(ages) != n or any(x < 1 for x in ages) or len(set(ages)) != n:
        raise ValueError(f"initial ages must be {n} distinct positive integers, got {ages}")
    if scheduler.n_users != n:
        raise ValueError("scheduler and arrival process disagree on the number of users")
    users.reset(0)
    scheduler.reset(users.rng_seed)
    rule = scheduler.rule
    bound = age_lower_bound(n)
    writer = None
    if trace is not None:
        writer = csv.writer(trace, lineterminator="\n")
        writer.writerow(["slot", "D"] + [f"X_{i}" for i in range(1, n + 1)] + [f"L_{i}" for i in range(1, n + 1)])

    # Per-user age sums are accumulated per segment between resets: a segment
    # that starts at slot t0 with age a0 and covers L slots adds L*a0 + L(L-1)/2.
    sums = [0] * n
    seg_slot = [0] * n
    seg_age = list(ages)
    updates = [0] * n
    wasted = 0
    min_total = sum(ages)
    slot = 0
    while slot < horizon:
        block = users.sample_block(min(BLOCK, horizon - slot))
        for flags in zip(*block.T.tolist()):
            total = sum(ages)
            if total < bound:
                raise InvariantViolation(f"slot {slot}: total age {total} < {bound}")
            if total < min_total:
                min_total = total
            d = rule(ages, flags, slot)
            if writer is not None:
                writer.writerow([slot, d, *ages, *flags])
            ages = [x + 1 for x in ages]
            if d:
                j = d - 1
                if flags[j]:
                    length = slot - seg_slot[j] + 1
                    sums[j] += length * seg_age[j] + length * (length - 1) // 2
                    seg_slot[j] = slot + 1
                    seg_age[j] = 1
                    ages[j] = 1
                    updates[j] += 1
                else:
                    wasted += 1
            slot += 1
    total = sum(ages)
    if total < bound:
        raise InvariantViolation(f"slot {slot}: total age {total} < {bound}")
    min_total = min(min_total, total)
    for i in range(n):
        length = horizon - seg_slot[i] + 1
        sums[i] += length * seg_age[i] + length * (length - 1) // 2

    count = horizon + 1
    per_user = tuple(s / count for s in sums)
    return SimReport(
        scheduler=scheduler.name,
        horizon=horizon,
        seed=users.rng_seed,
        time_avg_total_age=sum(sums) / count,
        per_user_avg_age=per_user,
        per_user_update_count=tuple(updates),
        wasted_slots=wasted,
        min_total_age=min_total,
    )
