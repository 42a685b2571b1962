"""Brute-force MDP oracles.

The single-user sub-problem is solved on a truncated age space by relative
value iteration (average cost) and by discounted value iteration. Neither
solver knows about threshold policies; the threshold shape is checked
afterwards by :func:`extract_threshold`. The joint N-user problem (one update
per slot, no update cost) is solved the same way and gives the age-optimal
benchmark scheduler.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .core import age_lower_bound, validate_probabilities

log = logging.getLogger(__name__)

IDLE, UPDATE = 0, 1
DEFAULT_X_MAX = 200
# Q-value gaps at or below this are ties and go to the lower action (idle).
DEFAULT_TIE_ATOL = 1e-6
# Weight on the Bellman update in the damped iteration h <- h + w (Th - h).
# Any w in (0, 1) removes periodicity (e.g. p = 1 cycles) without moving
# the gain or the optimal policies.
DEFAULT_DAMPING = 0.5
MAX_JOINT_USERS = 3
MAX_JOINT_X_MAX = 60
DEFAULT_MAX_JOINT_STATES = 2_000_000


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class StructureError(SolverError):
    """Solved sub-problem policy is not of threshold type."""


class TruncationError(SolverError):
    """Threshold lies too close to the truncation age to be trusted."""


class StateSpaceTooLarge(SolverError):
    def __init__(self, n_states: int, cap: int):
        super().__init__(f"joint state space has {n_states} states, cap is {cap}")
        self.n_states = n_states
        self.cap = cap


def span(v: np.ndarray) -> float:
    return float(v.max() - v.min())


@dataclass
class SubproblemModel:
    """Single-user MDP on ages 1..x_max.

    State (x, lam) has flat index ``2*(x-1) + lam``. Age growth saturates at
    x_max. ``transitions[a]`` is a sparse row-stochastic matrix and
    ``costs[a]`` the immediate cost ``(x + 1 - x*a*lam) + C*a``.
    """

    p: float
    cost: float
    x_max: int
    transitions: list[sp.csr_matrix] = field(repr=False)
    costs: np.ndarray = field(repr=False)

    @property
    def n_states(self) -> int:
        return 2 * self.x_max

    def index(self, x: int, lam: int) -> int:
        return 2 * (x - 1) + lam

    def state(self, index: int) -> tuple[int, int]:
        return index // 2 + 1, index % 2

    def reference_index(self) -> int:
        return self.index(1, 1)


def build_subproblem(p: float, cost: float, x_max: int = DEFAULT_X_MAX) -> SubproblemModel:
    (p,) = validate_probabilities([p])
    if x_max < 10:
        raise ValueError(f"x_max must be >= 10, got {x_max}")
    n = 2 * x_max
    ages = np.repeat(np.arange(1, x_max + 1), 2)
    lams = np.tile([0, 1], x_max)
    rows = np.arange(n)

    def next_ages_to_matrix(next_ages: np.ndarray) -> sp.csr_matrix:
        base = 2 * (next_ages - 1)
        r = np.concatenate([rows, rows])
        c = np.concatenate([base + 1, base])
        v = np.concatenate([np.full(n, p), np.full(n, 1 - p)])
        return sp.csr_matrix((v, (r, c)), shape=(n, n))

    grown = np.minimum(ages + 1, x_max)
    idle_next = grown
    update_next = np.where(lams == 1, 1, grown)
    transitions = [next_ages_to_matrix(idle_next), next_ages_to_matrix(update_next)]
    costs = np.vstack(
        [
            (ages + 1).astype(float),
            (ages + 1 - ages * lams).astype(float) + cost,
        ]
    )
    return SubproblemModel(float(p), float(cost), int(x_max), transitions, costs)


@dataclass
class SolvedPolicy:
    """Greedy action table, its gain, and the solver's final residual.

    ``action[x-1, lam]`` is the action in state (x, lam). For discounted
    solves ``gain`` is the normalised value (1-alpha) J at the reference state.
    """

    action: np.ndarray
    gain: float
    residual: float
    iterations: int
    values: np.ndarray = field(repr=False)
    p: float = float("nan")
    cost: float = float("nan")

    @property
    def x_max(self) -> int:
        return self.action.shape[0]

    def act(self, x: int, lam: int) -> int:
        return int(self.action[min(x, self.x_max) - 1, lam])


@dataclass(frozen=True)
class DiscountedSolverConfig:
    alpha: float
    tolerance: float = 1e-8
    max_iter: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"discount factor must lie in (0, 1), got {self.alpha}")


def _greedy(q: np.ndarray, tie_atol: float) -> np.ndarray:
    """Lowest action index whose Q-value is within tie_atol of the minimum."""
    best = q.min(axis=0)
    return np.argmax(q <= best + tie_atol, axis=0)


def _relative_value_iteration(
    bellman: Callable[[np.ndarray], np.ndarray],
    n_states: int,
    ref: int,
    tolerance: float,
    max_iter: int,
    damping: float,
) -> tuple[np.ndarray, np.ndarray, float, float, int]:
    h = np.zeros(n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        q = bellman(h)
        diff = q.min(axis=0) - h
        residual = span(diff)
        if residual <= tolerance:
            gain = 0.5 * (diff.max() + diff.min())
            return h, q, float(gain), residual, it
        h += damping * diff
        h -= h[ref]
    raise ConvergenceError("relative value iteration did not converge", residual, max_iter)


def relative_value_iteration(
    model: SubproblemModel,
    tolerance: float = 1e-9,
    max_iter: int = 200_000,
    damping: float = DEFAULT_DAMPING,
    tie_atol: float = DEFAULT_TIE_ATOL,
) -> SolvedPolicy:
    """Average-cost optimal policy of the sub-problem, anchored at state (1, 1)."""
    p_idle, p_update = model.transitions
    c = model.costs

    def bellman(h):
        return np.vstack([c[0] + p_idle @ h, c[1] + p_update @ h])

    h, q, gain, residual, it = _relative_value_iteration(
        bellman, model.n_states, model.reference_index(), tolerance, max_iter, damping
    )
    action = _greedy(q, tie_atol).reshape(model.x_max, 2)
    log.debug("RVI p=%g C=%g: gain %.10g after %d iterations", model.p, model.cost, gain, it)
    return SolvedPolicy(action, gain, residual, it, h, model.p, model.cost)


def discounted_value_iteration(
    model: SubproblemModel,
    config: DiscountedSolverConfig,
    tie_atol: float = DEFAULT_TIE_ATOL,
) -> SolvedPolicy:
    """Fixed point of J = min_a c(s,a) + alpha E[J(s')] and its greedy policy."""
    alpha = config.alpha
    p_idle, p_update = model.transitions
    c = model.costs
    j = np.zeros(model.n_states)
    residual = np.inf
    for it in range(1, config.max_iter + 1):
        q = np.vstack([c[0] + alpha * (p_idle @ j), c[1] + alpha * (p_update @ j)])
        j_new = q.min(axis=0)
        residual = float(np.abs(j_new - j).max())
        j = j_new
        if residual <= config.tolerance:
            break
    else:
        raise ConvergenceError("discounted value iteration did not converge", residual, config.max_iter)
    q = np.vstack([c[0] + alpha * (p_idle @ j), c[1] + alpha * (p_update @ j)])
    action = _greedy(q, tie_atol).reshape(model.x_max, 2)
    gain = (1 - alpha) * j[model.reference_index()]
    return SolvedPolicy(action, float(gain), residual, it, j, model.p, model.cost)


def extract_threshold(policy: SolvedPolicy) -> int:
    """Smallest age x at which the policy updates on an arrival.

    Raises StructureError unless the policy idles whenever there is no
    arrival and its arrival-column is monotone, and TruncationError if the
    threshold is not below x_max / 2.
    """
    no_arrival = policy.action[:, 0]
    with_arrival = policy.action[:, 1]
    if no_arrival.any():
        bad = int(np.flatnonzero(no_arrival)[0]) + 1
        raise StructureError(f"policy updates in state ({bad}, 0)")
    updates = np.flatnonzero(with_arrival)
    if updates.size == 0:
        raise TruncationError(f"policy never updates below x_max={policy.x_max}")
    threshold = int(updates[0]) + 1
    if not with_arrival[threshold - 1 :].all():
        gap = threshold + int(np.flatnonzero(with_arrival[threshold - 1 :] == 0)[0])
        raise StructureError(
            f"policy updates at ({threshold}, 1) but idles at ({gap}, 1)"
        )
    if not threshold < policy.x_max / 2:
        raise TruncationError(f"threshold {threshold} is not below x_max/2 = {policy.x_max / 2}")
    return threshold


# -- joint N-user model -----------------------------------------------------


@dataclass
class JointModel:
    """All users at once: state (x_1..x_N, lam_1..lam_N), actions 0..N.

    Values are stored as arrays of shape ``(x_max,)*N + (2,)*N``. Per-slot
    cost is the sum of the resulting ages.
    """

    p: tuple[float, ...]
    x_max: int
    next_index: np.ndarray = field(repr=False)  # (N+1, S) flat index into age grid
    costs: np.ndarray = field(repr=False)  # (N+1, S)

    @property
    def n_users(self) -> int:
        return len(self.p)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.x_max,) * self.n_users + (2,) * self.n_users

    @property
    def n_states(self) -> int:
        return self.x_max**self.n_users * 2**self.n_users

    def flat_index(self, ages: Sequence[int], flags: Sequence[int]) -> int:
        clipped = [min(x, self.x_max) - 1 for x in ages]
        return int(np.ravel_multi_index(tuple(clipped) + tuple(flags), self.shape))

    def expected_next(self, h: np.ndarray) -> np.ndarray:
        """E over next-slot arrivals of h, as a flat array over the age grid."""
        w = h.reshape(self.shape)
        for p in reversed(self.p):
            w = w @ np.array([1 - p, p])
        return w.ravel()


def joint_state_count(n_users: int, x_max: int) -> int:
    return x_max**n_users * 2**n_users


def build_joint(
    p: Sequence[float], x_max: int, max_states: int = DEFAULT_MAX_JOINT_STATES
) -> JointModel:
    probs = validate_probabilities(p)
    n = len(probs)
    size = joint_state_count(n, x_max)
    if n > MAX_JOINT_USERS or x_max > MAX_JOINT_X_MAX or size > max_states:
        raise StateSpaceTooLarge(size, min(max_states, joint_state_count(MAX_JOINT_USERS, MAX_JOINT_X_MAX)))
    if x_max < 2 * n:
        raise ValueError(f"x_max={x_max} too small for {n} users")
    shape = (x_max,) * n + (2,) * n
    grids = np.indices(shape).reshape(2 * n, -1)
    ages = grids[:n] + 1
    flags = grids[n:]
    grown = np.minimum(ages + 1, x_max)
    next_index = np.empty((n + 1, grids.shape[1]), dtype=np.int64)
    costs = np.empty((n + 1, grids.shape[1]))
    for d in range(n + 1):
        nxt = grown.copy()
        if d:
            nxt[d - 1] = np.where(flags[d - 1] == 1, 1, grown[d - 1])
        next_index[d] = np.ravel_multi_index(tuple(nxt - 1), (x_max,) * n)
        costs[d] = nxt.sum(axis=0)
    return JointModel(probs, int(x_max), next_index, costs)


@dataclass
class JointPolicy:
    p: tuple[float, ...]
    x_max: int
    action: np.ndarray  # shape (x_max,)*N + (2,)*N
    gain: float
    residual: float
    iterations: int

    @property
    def n_users(self) -> int:
        return len(self.p)

    def decide(self, ages: Sequence[int], flags: Sequence[int]) -> int:
        clipped = tuple(min(x, self.x_max) - 1 for x in ages)
        return int(self.action[clipped + tuple(flags)])


def solve_joint(
    p: Sequence[float],
    x_max: int = 40,
    tolerance: float = 1e-9,
    max_iter: int = 500_000,
    damping: float = DEFAULT_DAMPING,
    tie_atol: float = DEFAULT_TIE_ATOL,
    max_states: int = DEFAULT_MAX_JOINT_STATES,
) -> JointPolicy:
    """Age-optimal one-update-per-slot schedule by relative value iteration."""
    model = build_joint(p, x_max, max_states)
    n = model.n_users
    ref = model.flat_index(range(1, n + 1), (0,) * n)

    def bellman(h):
        w = model.expected_next(h)
        return model.costs + w[model.next_index]

    _, q, gain, residual, it = _relative_value_iteration(
        bellman, model.n_states, ref, tolerance, max_iter, damping
    )
    if gain < age_lower_bound(n) - 1e-6:
        raise SolverError(f"joint gain {gain} below the total-age lower bound")
    action = _greedy(q, tie_atol).reshape(model.shape)
    log.info("joint RVI p=%s x_max=%d: gain %.8g after %d iterations", model.p, x_max, gain, it)
    return JointPolicy(model.p, model.x_max, action, gain, residual, it)


# -- plain-text policy tables -----------------------------------------------


def dump_policy_table(policy: SolvedPolicy | JointPolicy, path: str | Path) -> None:
    """Write one line per state: ``x_1..x_N lambda_1..lambda_N action``.

    For a sub-problem policy (N = 1) each line reads ``x lambda action``.
    """
    if isinstance(policy, SolvedPolicy):
        n, table = 1, policy.action
        header = f"# p={policy.p!r} cost={policy.cost!r} x_max={policy.x_max}"
    else:
        n, table = policy.n_users, policy.action
        header = f"# p={','.join(repr(v) for v in policy.p)} x_max={policy.x_max}"
    cols = " ".join([f"x_{i}" for i in range(1, n + 1)] + [f"lambda_{i}" for i in range(1, n + 1)])
    lines = [header, f"# {cols} action"]
    for idx in np.ndindex(table.shape):
        ages = [i + 1 for i in idx[:n]]
        flags = list(idx[n:])
        lines.append(" ".join(str(v) for v in ages + flags + [int(table[idx])]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy_table(path: str | Path) -> JointPolicy:
    """Read a table written by :func:`dump_policy_table` into a lookup policy."""
    p: tuple[float, ...] = ()
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if "p=" in line and not p:
                p = tuple(float(v) for v in line.split("p=")[1].split()[0].split(","))
            continue
        if line.strip():
            rows.append([int(v) for v in line.split()])
    data = np.array(rows, dtype=np.int64)
    n = (data.shape[1] - 1) // 2
    x_max = int(data[:, :n].max())
    action = np.zeros((x_max,) * n + (2,) * n, dtype=np.int64)
    action[tuple(data[:, :n].T - 1) + tuple(data[:, n : 2 * n].T)] = data[:, -1]
    return JointPolicy(p, x_max, action, float("nan"), float("nan"), 0)
