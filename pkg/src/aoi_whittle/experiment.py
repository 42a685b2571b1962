"""Experiment runner and the cross-check suite behind ``aoi-whittle verify``."""

from __future__ import annotations

import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dtmc, mdp, whittle
from .core import ArrivalProcess, validate_probabilities
from .sim import ALIASES, SCHEDULERS, SimReport, make_scheduler, run

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class MDPConfig:
    x_max: int = 40
    tolerance: float = 1e-9
    policy_file: str | None = None


@dataclass
class ExperimentConfig:
    users: list[float]
    schedulers: list[str]
    horizon: int = 100_000
    replications: int = 1
    seed_base: int = 0
    mdp: MDPConfig = field(default_factory=MDPConfig)
    output: str = "results"
    sweep: list[float] | None = None
    initial_ages: list[int] | None = None
    jobs: int = 1

    def __post_init__(self):
        try:
            self.users = list(validate_probabilities(self.users))
            if self.sweep is not None:
                validate_probabilities(self.sweep)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.schedulers = [ALIASES.get(s, s) for s in self.schedulers]
        unknown = [s for s in self.schedulers if s not in SCHEDULERS]
        if unknown:
            raise ConfigError(f"unknown schedulers {unknown}; choose from {list(SCHEDULERS)}")
        if not self.schedulers:
            raise ConfigError("at least one scheduler is required")
        if len(set(self.schedulers)) != len(self.schedulers):
            raise ConfigError("schedulers must not repeat")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if "optimal_lookup" in self.schedulers and self.mdp.policy_file is None:
            n = len(self.users)
            size = mdp.joint_state_count(n, self.mdp.x_max)
            if n > mdp.MAX_JOINT_USERS or self.mdp.x_max > mdp.MAX_JOINT_X_MAX or size > mdp.DEFAULT_MAX_JOINT_STATES:
                raise ConfigError(
                    f"optimal_lookup needs the joint MDP; N={n}, x_max={self.mdp.x_max} "
                    f"gives {size} states (limits: N<={mdp.MAX_JOINT_USERS}, "
                    f"x_max<={mdp.MAX_JOINT_X_MAX}, {mdp.DEFAULT_MAX_JOINT_STATES} states)"
                )

    @property
    def n_users(self) -> int:
        return len(self.users)

    def points(self) -> list[tuple[float, ...]]:
        """Arrival-probability vectors to run; a sweep sets every user to each value."""
        if self.sweep is None:
            return [tuple(self.users)]
        return [(p,) * self.n_users for p in self.sweep]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        known = {"users", "schedulers", "horizon", "replications", "seed_base", "mdp",
                 "output", "sweep", "initial_ages", "jobs"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "users" not in data or "schedulers" not in data:
            raise ConfigError("config needs 'users' and 'schedulers'")
        users = []
        for u in data.pop("users"):
            users.append(u["p"] if isinstance(u, dict) else u)
        sweep = data.pop("sweep", None)
        if isinstance(sweep, dict):
            sweep = sweep.get("p")
        mdp_cfg = data.pop("mdp", {}) or {}
        try:
            mdp_section = MDPConfig(**mdp_cfg)
        except TypeError as exc:
            raise ConfigError(f"bad [mdp] section: {exc}") from None
        return cls(users=users, sweep=sweep, mdp=mdp_section, **data)

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for key, value in (overrides or {}).items():
            if value is not None:
                data[key] = value
        return cls.from_dict(data)


@dataclass(frozen=True)
class ResultRow:
    point: int
    p: tuple[float, ...]
    scheduler: str
    replication: int
    seed: int
    report: SimReport


@dataclass(frozen=True)
class SummaryRow:
    point: int
    p: tuple[float, ...]
    scheduler: str
    replications: int
    mean: float
    std_err: float
    ratio_to_optimal: float | None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[ResultRow]
    summary: list[SummaryRow]
    joint_gains: dict[int, float]

    def mean(self, scheduler: str, point: int = 0) -> float:
        for s in self.summary:
            if s.scheduler == scheduler and s.point == point:
                return s.mean
        raise KeyError((scheduler, point))


def _one_run(task) -> SimReport:
    p, name, policy, seed, horizon, initial_ages = task
    scheduler = make_scheduler(name, p, policy=policy, seed=seed)
    return run(ArrivalProcess(p, seed), scheduler, horizon, initial_ages)


def mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, float("nan")
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def summarize(rows: Sequence[ResultRow]) -> list[SummaryRow]:
    groups: dict[tuple[int, str], list[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.point, row.scheduler), []).append(row)
    summary = []
    for (point, name), members in groups.items():
        mean, se = mean_and_stderr([r.report.time_avg_total_age for r in members])
        summary.append(SummaryRow(point, members[0].p, name, len(members), mean, se, None))
    optimal = {s.point: s.mean for s in summary if s.scheduler == "optimal_lookup"}
    return [
        SummaryRow(s.point, s.p, s.scheduler, s.replications, s.mean, s.std_err,
                   s.mean / optimal[s.point] if s.point in optimal else None)
        for s in summary
    ]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every (point, scheduler, replication) with common random numbers.

    Replication r uses seed ``seed_base + r`` for every scheduler and point.
    The joint MDP is solved once per point and its table reused.
    """
    policies: dict[int, mdp.JointPolicy | None] = {}
    joint_gains: dict[int, float] = {}
    points = config.points()
    for k, p in enumerate(points):
        policies[k] = None
        if "optimal_lookup" in config.schedulers:
            if config.mdp.policy_file is not None:
                policy = mdp.load_policy_table(config.mdp.policy_file)
            else:
                policy = mdp.solve_joint(p, config.mdp.x_max, config.mdp.tolerance)
                joint_gains[k] = policy.gain
            policies[k] = policy

    keys, tasks = [], []
    for k, p in enumerate(points):
        for name in config.schedulers:
            for r in range(config.replications):
                seed = config.seed_base + r
                keys.append((k, p, name, r, seed))
                tasks.append((p, name, policies[k] if name == "optimal_lookup" else None,
                              seed, config.horizon, config.initial_ages))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            reports = list(pool.map(_one_run, tasks))
    else:
        reports = [_one_run(t) for t in tasks]
    rows = [ResultRow(k, p, name, r, seed, rep) for (k, p, name, r, seed), rep in zip(keys, reports)]
    return ExperimentResult(config, rows, summarize(rows), joint_gains)


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_outputs(result: ExperimentResult, outdir: str | Path | None = None) -> dict[str, Path]:
    """Write results.csv, summary.csv and, for sweeps, plot.csv. Overwrites."""
    cfg = result.config
    out = Path(outdir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    n = cfg.n_users
    p_cols = [f"p_{i}" for i in range(1, n + 1)]
    paths = {"results": out / "results.csv", "summary": out / "summary.csv"}

    with open(paths["results"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", *p_cols, "scheduler", "replication", "seed", "time_avg_total_age",
                    *[f"avg_age_{i}" for i in range(1, n + 1)],
                    *[f"updates_{i}" for i in range(1, n + 1)], "wasted_slots"])
        for row in result.rows:
            rep = row.report
            w.writerow([row.point, *map(_fmt, row.p), row.scheduler, row.replication, row.seed,
                        _fmt(rep.time_avg_total_age), *map(_fmt, rep.per_user_avg_age),
                        *rep.per_user_update_count, rep.wasted_slots])

    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", *p_cols, "scheduler", "replications", "mean_total_age", "std_err",
                    "ratio_to_optimal", "joint_mdp_gain"])
        for s in result.summary:
            gain = result.joint_gains.get(s.point) if s.scheduler == "optimal_lookup" else None
            w.writerow([s.point, *map(_fmt, s.p), s.scheduler, s.replications, _fmt(s.mean),
                        _fmt(s.std_err), _fmt(s.ratio_to_optimal), _fmt(gain)])

    if cfg.sweep is not None:
        paths["plot"] = out / "plot.csv"
        with open(paths["plot"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", *cfg.schedulers])
            for k, p in enumerate(cfg.points()):
                w.writerow([_fmt(p[0]), *[_fmt(result.mean(name, k)) for name in cfg.schedulers]])
    return paths


# -- verification suite ------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<28} worst={self.worst:.3e}  tol={self.tolerance:.1e}{extra}"


@dataclass(frozen=True)
class Grid:
    ps: tuple[float, ...]
    thresholds: tuple[int, ...]
    costs: tuple[float, ...]
    ages: tuple[int, ...]
    sweep_costs: tuple[float, ...]
    x_max: int = 200


GRIDS = {
    "small": Grid(
        ps=(0.25, 0.5, 0.75, 1.0),
        thresholds=tuple(range(1, 21)),
        costs=tuple(float(c) for c in range(11)),
        ages=tuple(range(1, 21)),
        sweep_costs=tuple(float(c) for c in range(21)),
    ),
    "full": Grid(
        ps=tuple(k / 10 for k in range(1, 11)),
        thresholds=tuple(range(1, 51)),
        costs=tuple(j * 0.5 for j in range(51)),
        ages=tuple(range(1, 51)),
        sweep_costs=tuple(float(c) for c in range(51)),
    ),
}


def check_closed_forms(grid: Grid, tol: float = 1e-12) -> CheckResult:
    worst = 0.0
    for p in grid.ps:
        for xbar in grid.thresholds:
            for c in grid.costs:
                a = whittle.average_cost(xbar, whittle.SubproblemParams(p, c))
                b = dtmc.dtmc_average_cost(p, xbar, c)
                worst = max(worst, abs(a - b))
    return CheckResult("closed_form_consistency", worst <= tol, worst, tol)


def check_equal_desirability(
    grid: Grid,
    tol: float = 1e-9,
    index_fn: Callable[[int, int, float], float] = whittle.whittle_index,
) -> CheckResult:
    worst, where = 0.0, ""
    for p in grid.ps:
        for x in grid.ages:
            params = whittle.SubproblemParams(p, index_fn(x, 1, p))
            gap = abs(whittle.average_cost(x, params) - whittle.average_cost(x + 1, params))
            if gap > worst:
                worst, where = gap, f"p={p} x={x}"
    return CheckResult("equal_desirability", worst <= tol, worst, tol, where if worst > tol else "")


def check_threshold_oracle(grid: Grid, tolerance: float = 1e-9, gain_tol: float = 1e-5) -> list[CheckResult]:
    """Relative value iteration versus the closed forms on every (p, C)."""
    structure_failures, mismatches = [], []
    worst_gain = 0.0
    for p in grid.ps:
        for c in grid.costs:
            policy = mdp.relative_value_iteration(mdp.build_subproblem(p, c, grid.x_max), tolerance)
            try:
                found = mdp.extract_threshold(policy)
            except mdp.SolverError as exc:
                structure_failures.append(f"p={p} C={c}: {exc}")
                continue
            params = whittle.SubproblemParams(p, c)
            expected = whittle.optimal_threshold(params)
            if found != expected:
                mismatches.append(f"p={p} C={c}: rvi {found} vs closed form {expected}")
            worst_gain = max(worst_gain, abs(policy.gain - whittle.average_cost(expected, params)))
    return [
        CheckResult("threshold_structure", not structure_failures, float(len(structure_failures)), 0,
                    "; ".join(structure_failures[:3])),
        CheckResult("threshold_agreement", not mismatches, float(len(mismatches)), 0,
                    "; ".join(mismatches[:3])),
        CheckResult("gain_matches_closed_form", worst_gain <= gain_tol, worst_gain, gain_tol),
    ]


def check_indexability(grid: Grid, age_cap: int = 100) -> CheckResult:
    bad = []
    for p in grid.ps:
        sets = whittle.indexability_sweep(p, grid.sweep_costs, age_cap)
        if not whittle.is_nested(sets):
            bad.append(f"p={p}")
    return CheckResult("indexability_nesting", not bad, float(len(bad)), 0, ", ".join(bad))


def verify(grid: str | Grid = "small", index_fn=whittle.whittle_index) -> list[CheckResult]:
    g = GRIDS[grid] if isinstance(grid, str) else grid
    return [
        check_closed_forms(g),
        check_equal_desirability(g, index_fn=index_fn),
        *check_threshold_oracle(g),
        check_indexability(g),
    ]
