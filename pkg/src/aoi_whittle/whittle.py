"""Closed forms for the single-user sub-problem.

Covers the long-run average cost of a threshold policy, the Whittle index,
the optimal threshold as a function of the update cost, and the idle-set
sweep used to check indexability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

# Relative tolerance under which an update cost is treated as sitting exactly
# on an index value. Grid probabilities such as 0.3 are not exact in binary,
# so I(x,1) and a "round" cost can differ by a few ulps at a true tie.
TIE_RTOL = 1e-9


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"arrival probability must lie in (0, 1], got {p}")
    return p


@dataclass(frozen=True)
class SubproblemParams:
    p: float
    cost: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", _check_p(self.p))
        object.__setattr__(self, "cost", float(self.cost))


def average_cost(threshold: int, params: SubproblemParams) -> float:
    """Average age-plus-update cost per slot under threshold ``threshold``.

    Evaluated term by term as
    ``(X^2/2 + (1/p - 1/2) X + 1/p^2 - 1/p + C) / (X + (1-p)/p)``.
    """
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    p, c, x = params.p, params.cost, threshold
    num = x**2 / 2 + (1 / p - 1 / 2) * x + 1 / p**2 - 1 / p + c
    den = x + (1 - p) / p
    return num / den


def whittle_index(x: int, lam: int, p: float) -> float:
    """Update cost at which updating and idling in state (x, lam) tie."""
    if x < 1:
        raise ValueError(f"age must be >= 1, got {x}")
    if lam not in (0, 1):
        raise ValueError(f"arrival flag must be 0 or 1, got {lam}")
    p = _check_p(p)
    if lam == 0:
        return 0.0
    return x**2 / 2 - x / 2 + x / p


def _index_or_zero(x: int, p: float) -> float:
    # I(0,1) := 0 closes the x = 1 case of the threshold rule.
    return 0.0 if x == 0 else whittle_index(x, 1, p)


def reaches(cost: float, index: float) -> bool:
    """``cost >= index`` with ties detected at relative tolerance TIE_RTOL."""
    return cost >= index - TIE_RTOL * max(1.0, abs(index))


def optimal_threshold(params: SubproblemParams) -> int:
    """Threshold x with I(x-1,1) <= C < I(x,1).

    A cost equal to I(x-1,1) makes thresholds x-1 and x equally good; the tie
    goes to x (idle in the tied state).
    """
    c = params.cost
    if c < 0:
        raise ValueError("optimal threshold is only defined for cost >= 0")
    p = params.p
    # I(x,1) = x^2/2 + b x with b = 1/p - 1/2; invert for a starting guess.
    b = 1 / p - 0.5
    guess = max(1, int(math.floor(-b + math.sqrt(b * b + 2 * c))))
    x = guess
    while x > 1 and not reaches(c, _index_or_zero(x - 1, p)):
        x -= 1
    while reaches(c, _index_or_zero(x, p)):
        x += 1
    return x


@dataclass
class IndexTable:
    """Index values I(x, lam) for ages 1..age_cap plus cost -> threshold lookups."""

    p: float
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    @classmethod
    def build(cls, p: float, age_cap: int) -> "IndexTable":
        p = _check_p(p)
        entries = {
            (x, lam): whittle_index(x, lam, p)
            for x in range(1, age_cap + 1)
            for lam in (0, 1)
        }
        return cls(p, entries)

    def __getitem__(self, state: tuple[int, int]) -> float:
        if state not in self.entries:
            self.entries[state] = whittle_index(state[0], state[1], self.p)
        return self.entries[state]

    def threshold(self, cost: float) -> int:
        return optimal_threshold(SubproblemParams(self.p, cost))

    def threshold_map(self, costs: Iterable[float]) -> dict[float, int]:
        return {c: self.threshold(c) for c in costs}


def idle_set(p: float, cost: float, age_cap: int) -> frozenset[tuple[int, int]]:
    """States (x, lam) with x <= age_cap in which idling is optimal at ``cost``."""
    threshold = optimal_threshold(SubproblemParams(p, cost))
    no_arrival = {(x, 0) for x in range(1, age_cap + 1)}
    below = {(x, 1) for x in range(1, min(threshold, age_cap + 1))}
    return frozenset(no_arrival | below)


def indexability_sweep(
    p: float, cost_grid: Sequence[float], age_cap: int
) -> list[frozenset[tuple[int, int]]]:
    if any(b < a for a, b in zip(cost_grid, cost_grid[1:])):
        raise ValueError("cost grid must be ascending")
    return [idle_set(p, c, age_cap) for c in cost_grid]


def is_nested(sets: Sequence[frozenset]) -> bool:
    return all(a <= b for a, b in zip(sets, sets[1:]))
