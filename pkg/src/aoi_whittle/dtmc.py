"""Stationary laws of the single-user age chains.

Two chains appear in the analysis of the sub-problem:

* the pre-action age under "update on every arrival", which is geometric
  with ``pi_i = p (1-p)^(i-1)``;
* the post-action age ``Y = x + 1 - x*a*lam`` under a threshold policy, which
  is flat on ``1..X`` and geometric beyond.

Infinite sums are taken in closed form. The module also turns simulated
post-action traces into histograms and total-variation distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ArrivalProcess

OVERFLOW_MARGIN = 100


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"arrival probability must lie in (0, 1], got {p}")
    return p


@dataclass(frozen=True)
class GeometricAgeDistribution:
    p: float

    def __post_init__(self):
        object.__setattr__(self, "p", _check_p(self.p))

    def pmf(self, i: int) -> float:
        return self.p * (1 - self.p) ** (i - 1) if i >= 1 else 0.0

    def tail_mass(self, n: int) -> float:
        """P(X > n)."""
        return (1 - self.p) ** max(n, 0)

    def total_mass(self, head: int = 0) -> float:
        return sum(self.pmf(i) for i in range(1, head + 1)) + self.tail_mass(head)

    def mean(self) -> float:
        # sum_i i p r^(i-1) = p / (1-r)^2
        return self.p / self.p**2


def preaction_mean_age(p: float) -> float:
    """Mean age when every arrival is delivered immediately."""
    return GeometricAgeDistribution(p).mean()


@dataclass(frozen=True)
class PostActionDistribution:
    p: float
    threshold: int

    def __post_init__(self):
        object.__setattr__(self, "p", _check_p(self.p))
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")

    @property
    def head_mass(self) -> float:
        """Common probability of each post-action age 1..threshold."""
        return 1 / (self.threshold + (1 - self.p) / self.p)

    def pmf(self, i: int) -> float:
        if i < 1:
            return 0.0
        if i <= self.threshold:
            return self.head_mass
        return self.head_mass * (1 - self.p) ** (i - self.threshold)

    def tail_mass(self, n: int) -> float:
        """P(Y > n) for n >= threshold."""
        if n < self.threshold:
            raise ValueError("tail_mass is only closed-form beyond the threshold")
        r = 1 - self.p
        return self.head_mass * r ** (n - self.threshold + 1) / self.p

    def total_mass(self) -> float:
        return self.threshold * self.head_mass + self.tail_mass(self.threshold)

    def mean_cost(self, cost: float) -> float:
        """(1+C) pi_1 + sum_{i>=2} i pi_i."""
        xbar, p, h = self.threshold, self.p, self.head_mass
        r = 1 - p
        head = xbar * (xbar + 1) / 2 - 1
        # sum_{k>=1} (xbar + k) r^k = xbar r/(1-r) + r/(1-r)^2
        tail = xbar * r / p + r / p**2
        return (1 + cost) * h + h * (head + tail)


def dtmc_average_cost(p: float, threshold: int, cost: float) -> float:
    return PostActionDistribution(p, threshold).mean_cost(cost)


def post_action_age(x: int, action: int, lam: int) -> int:
    return x + 1 - x * action * lam


def simulate_post_action_ages(
    p: float, threshold: int, horizon: int, seed: int = 0, initial_age: int = 1
) -> np.ndarray:
    """Post-action ages Y(0..horizon-1) of one user under a threshold policy."""
    arrivals = ArrivalProcess((p,), seed).sample_block(horizon)[:, 0].tolist()
    out = np.empty(horizon, dtype=np.int64)
    x = initial_age
    for t, lam in enumerate(arrivals):
        a = 1 if (lam and x >= threshold) else 0
        x = post_action_age(x, a, lam)
        out[t] = x
    return out


@dataclass
class EmpiricalDistribution:
    """Histogram of post-action ages; bin ``cap + 1`` collects every y > cap."""

    p: float
    threshold: int
    counts: np.ndarray
    cap: int
    mean_cost_value: float

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / self.n

    def tv_distance(self) -> float:
        law = PostActionDistribution(self.p, self.threshold)
        analytic = np.array([law.pmf(i) for i in range(1, self.cap + 1)])
        analytic = np.append(analytic, law.tail_mass(self.cap))
        return 0.5 * float(np.abs(self.frequencies() - analytic).sum())


def empirical_distribution(
    post_ages: np.ndarray, p: float, threshold: int, cost: float = 0.0
) -> EmpiricalDistribution:
    if len(post_ages) == 0:
        raise ValueError("empty trace")
    cap = threshold + OVERFLOW_MARGIN
    ages = np.asarray(post_ages)
    counts = np.bincount(np.minimum(ages, cap + 1), minlength=cap + 2)[1:]
    per_slot = np.where(ages == 1, 1 + cost, ages)
    return EmpiricalDistribution(p, threshold, counts, cap, float(per_slot.mean()))
