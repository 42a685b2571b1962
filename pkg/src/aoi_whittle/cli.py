"""Command-line entry point: ``aoi-whittle {run,verify,index,threshold,policy}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import mdp, whittle
from .experiment import ConfigError, ExperimentConfig, run_experiment, verify, write_outputs


def _cmd_run(args) -> int:
    overrides = {
        "output": args.output,
        "horizon": args.horizon,
        "replications": args.replications,
        "seed_base": args.seed_base,
        "jobs": args.jobs,
    }
    try:
        config = ExperimentConfig.load(args.config, overrides)
        result = run_experiment(config)
    except (ConfigError, mdp.StateSpaceTooLarge, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    paths = write_outputs(result)
    for s in result.summary:
        ratio = "" if s.ratio_to_optimal is None else f"  ratio={s.ratio_to_optimal:.4f}"
        p = ",".join(f"{v:g}" for v in s.p)
        print(f"p=({p})  {s.scheduler:<15} mean={s.mean:.6f}  se={s.std_err:.2e}{ratio}")
    for kind, path in paths.items():
        print(f"wrote {kind}: {path}")
    return 0


def _cmd_verify(args) -> int:
    results = verify(args.grid)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_index(args) -> int:
    try:
        print(repr(whittle.whittle_index(args.x, args.lam, args.p)))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _cmd_threshold(args) -> int:
    try:
        print(whittle.optimal_threshold(whittle.SubproblemParams(args.p, args.cost)))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _cmd_policy(args) -> int:
    try:
        if args.cost is not None:
            if len(args.p) != 1:
                raise ValueError("--cost applies to a single-user sub-problem")
            model = mdp.build_subproblem(args.p[0], args.cost, args.x_max)
            policy = mdp.relative_value_iteration(model, args.tolerance)
        else:
            policy = mdp.solve_joint(args.p, args.x_max, args.tolerance)
    except (ValueError, mdp.SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    mdp.dump_policy_table(policy, args.out)
    print(f"gain={policy.gain!r}  iterations={policy.iterations}  wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoi-whittle", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scheduler comparison from a TOML config")
    run_p.add_argument("config")
    run_p.add_argument("--output", help="output directory (overrides config)")
    run_p.add_argument("--horizon", type=int)
    run_p.add_argument("--replications", type=int)
    run_p.add_argument("--seed-base", type=int, dest="seed_base")
    run_p.add_argument("--jobs", type=int)
    run_p.set_defaults(func=_cmd_run)

    ver_p = sub.add_parser("verify", help="cross-check closed forms against the MDP oracles")
    ver_p.add_argument("--grid", choices=["small", "full"], default="small")
    ver_p.set_defaults(func=_cmd_verify)

    idx_p = sub.add_parser("index", help="print the Whittle index I(x, lambda)")
    idx_p.add_argument("--p", type=float, required=True)
    idx_p.add_argument("--x", type=int, required=True)
    idx_p.add_argument("--lambda", type=int, choices=[0, 1], required=True, dest="lam")
    idx_p.set_defaults(func=_cmd_index)

    thr_p = sub.add_parser("threshold", help="print the optimal threshold for update cost C")
    thr_p.add_argument("--p", type=float, required=True)
    thr_p.add_argument("--cost", type=float, required=True)
    thr_p.set_defaults(func=_cmd_threshold)

    pol_p = sub.add_parser("policy", help="solve an MDP and dump its policy table")
    pol_p.add_argument("--p", type=float, nargs="+", required=True)
    pol_p.add_argument("--cost", type=float, help="update cost; solves the single-user sub-problem")
    pol_p.add_argument("--x-max", type=int, default=40, dest="x_max")
    pol_p.add_argument("--tolerance", type=float, default=1e-9)
    pol_p.add_argument("--out", required=True)
    pol_p.set_defaults(func=_cmd_policy)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
