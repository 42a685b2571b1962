"""Shared domain types and the seeded Bernoulli arrival process."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Philox yields four 64-bit words per counter increment; Generator.random
# consumes one word per double.
_WORDS_PER_COUNTER = 4


@dataclass(frozen=True)
class Decision:
    """Base-station decision for one slot: 0 idles, ``i >= 1`` updates user i."""

    target: int

    def validate(self, n_users: int) -> "Decision":
        if not 0 <= self.target <= n_users:
            raise ValueError(f"decision target {self.target} outside 0..{n_users}")
        return self


IDLE = Decision(0)


@dataclass(frozen=True)
class NetworkState:
    """Ages before the decision, arrival flags of the current slot, and the slot."""

    ages: tuple[int, ...]
    arrivals: tuple[int, ...]
    slot: int = 0

    def __post_init__(self):
        if len(self.ages) != len(self.arrivals):
            raise ValueError("ages and arrivals must have the same length")
        if any(x < 1 for x in self.ages):
            raise ValueError(f"ages must be >= 1, got {self.ages}")
        if any(lam not in (0, 1) for lam in self.arrivals):
            raise ValueError(f"arrival flags must be 0 or 1, got {self.arrivals}")
        if self.slot < 0:
            raise ValueError("slot must be nonnegative")

    @property
    def n_users(self) -> int:
        return len(self.ages)

    def total_age(self) -> int:
        return sum(self.ages)


def age_lower_bound(n_users: int) -> int:
    """Smallest possible total age 1 + 2 + ... + N."""
    return n_users * (n_users + 1) // 2


def default_initial_ages(n_users: int) -> tuple[int, ...]:
    return tuple(range(1, n_users + 1))


def validate_probabilities(probabilities: Sequence[float]) -> tuple[float, ...]:
    probs = tuple(float(p) for p in probabilities)
    if not probs:
        raise ValueError("at least one user is required")
    for p in probs:
        if not 0.0 < p <= 1.0:
            raise ValueError(f"arrival probability must lie in (0, 1], got {p}")
    return probs


@dataclass
class ArrivalProcess:
    """Independent Bernoulli(p_i) arrivals, one Philox stream per user.

    User i's stream is keyed by ``(rng_seed, i)`` only, so adding users never
    changes the flags of existing ones. Slots may be drawn sequentially with
    :meth:`sample_arrivals` / :meth:`sample_block`, or out of order (replay),
    which rewinds the streams by re-seeding.
    """

    probabilities: tuple[float, ...]
    rng_seed: int = 0
    _streams: list[np.random.Generator] = field(init=False, repr=False)
    _next_slot: int = field(init=False, repr=False, default=0)

    def __post_init__(self):
        self.probabilities = validate_probabilities(self.probabilities)
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        self.rng_seed = int(self.rng_seed)
        self._probs = np.asarray(self.probabilities)
        self.reset()

    @property
    def n_users(self) -> int:
        return len(self.probabilities)

    def _bit_generator(self, user: int) -> np.random.Philox:
        return np.random.Philox(np.random.SeedSequence((self.rng_seed, user)))

    def reset(self, slot: int = 0) -> None:
        """Position every stream so the next draw is for ``slot``."""
        streams = []
        for user in range(self.n_users):
            bg = self._bit_generator(user)
            bg.advance(slot // _WORDS_PER_COUNTER)
            gen = np.random.Generator(bg)
            skip = slot % _WORDS_PER_COUNTER
            if skip:
                gen.random(skip)
            streams.append(gen)
        self._streams = streams
        self._next_slot = slot

    @property
    def next_slot(self) -> int:
        return self._next_slot

    def sample_block(self, n_slots: int) -> np.ndarray:
        """Flags for the next ``n_slots`` slots as a uint8 array of shape (n_slots, N)."""
        if n_slots < 0:
            raise ValueError("n_slots must be nonnegative")
        out = np.empty((n_slots, self.n_users), dtype=np.uint8)
        for user, gen in enumerate(self._streams):
            out[:, user] = gen.random(n_slots) < self._probs[user]
        self._next_slot += n_slots
        return out

    def sample_arrivals(self, slot: int) -> tuple[int, ...]:
        if slot < 0:
            raise ValueError("slot must be nonnegative")
        if slot != self._next_slot:
            self.reset(slot)
        return tuple(int(v) for v in self.sample_block(1)[0])


def sample_arrivals(process: ArrivalProcess, slot: int) -> tuple[int, ...]:
    return process.sample_arrivals(slot)
