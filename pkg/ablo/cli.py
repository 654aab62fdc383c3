"""
Command-line front end.

    ablo <scenario> [--config FILE] [--out DIR] [--seed N] [--replicas N] [--iterations N] [--workers N]
    ablo verify [--quick]
    ablo qstar --d2 V --v2 V --r N [--c1 V] [--c2 V] [--eps V]
    ablo bounds --problem NAME [--param KEY=VALUE ...] [--alpha V] [--r N] [--grid LO HI N]

Exit codes: 0 on success, 1 when verification (or a run) fails, 2 on a
configuration or argument error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import SCENARIOS, load_config
from .constants import DEFAULT_C1, DEFAULT_C2, DEFAULT_EPSILON
from .errors import AbloError, InvalidConfigError, PreconditionError, VerificationError
from .estimators import InnerSchedule
from .problems import PROBLEM_NAMES, make_problem
from .scenarios import run_scenario
from .theory import CostModel, d_bound, expected_time, lipschitz_c, optimal_q, ufom_beats_exact, v_bound
from .utils.io import dumps
from .utils.logging import configure_logging, error
from .verification import grid_sup_stats

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _parse_param(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ablo", description="Gradient estimators for approximate bi-level optimization")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info logs, -vv for debug")
    sub = parser.add_subparsers(dest="command", required=True)

    for scenario in SCENARIOS:
        p = sub.add_parser(scenario, help=f"run the {scenario} scenario")
        p.add_argument("--config", type=Path, default=None, help="JSON config file; scenario defaults otherwise")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--replicas", type=int, default=None)
        p.add_argument("--iterations", type=int, default=None, help="outer iterations per run")
        p.add_argument("--workers", type=int, default=None, help="worker processes for replicas")
        if scenario == "verify":
            p.add_argument("--quick", action="store_true", help="smaller sample counts")

    q = sub.add_parser("qstar", help="optimal q and its expected-time comparison")
    q.add_argument("--d2", type=float, required=True)
    q.add_argument("--v2", type=float, required=True)
    q.add_argument("--r", type=int, required=True)
    q.add_argument("--c1", type=float, default=DEFAULT_C1)
    q.add_argument("--c2", type=float, default=DEFAULT_C2)
    q.add_argument("--eps", type=float, default=DEFAULT_EPSILON)

    b = sub.add_parser("bounds", help="analytic bias, gradient-norm and smoothness bounds of a problem")
    b.add_argument("--problem", required=True, choices=PROBLEM_NAMES)
    b.add_argument("--param", type=_parse_param, action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--alpha", type=float, default=None, help="inner step size (defaults to the problem's)")
    b.add_argument("--r", type=int, default=None, help="inner steps (defaults to the problem's)")
    b.add_argument("--grid", nargs=3, type=float, default=None, metavar=("LO", "HI", "N"),
                   help="also report grid estimates of D^2, V^2 and the theory q*")
    return parser


def _qstar(args: argparse.Namespace) -> Dict[str, Any]:
    cost = CostModel(args.c1, args.c2, args.r, args.eps)
    q = optimal_q(args.d2, args.v2, cost)
    out: Dict[str, Any] = {
        "D2": args.d2,
        "V2": args.v2,
        "C_det": cost.C_det,
        "C_rnd": cost.C_rnd,
        "epsilon": cost.epsilon,
        "ufom_beats_exact": ufom_beats_exact(args.d2, args.v2, cost) if args.v2 > 0 else None,
        "q_star": q,
        "expected_time_exact": expected_time(1.0, args.d2, args.v2, cost),
    }
    if q > 0:
        out["expected_time_q_star"] = expected_time(q, args.d2, args.v2, cost)
    return out


def _bounds(args: argparse.Namespace) -> Dict[str, Any]:
    params = dict(args.param)
    if args.problem == "counterexample":
        # the construction itself depends on the inner schedule
        for key, value in (("alpha", args.alpha), ("r", args.r)):
            if value is not None:
                params.setdefault(key, value)
    problem = make_problem(args.problem, params)
    constants = problem.regularity()
    if constants is None:
        raise PreconditionError(f"{args.problem} has no analytic regularity constants")
    alpha = args.alpha if args.alpha is not None else params.get("alpha")
    r = args.r if args.r is not None else params.get("r")
    if alpha is None or r is None:
        raise InvalidConfigError("bounds needs --alpha and --r when the problem does not define them")
    schedule = InnerSchedule.constant(float(alpha), int(r))
    lip = lipschitz_c(constants, schedule)
    out: Dict[str, Any] = {
        "problem": problem.describe(),
        "schedule": schedule.as_dict(),
        "regularity": constants.as_dict(),
        "d_bound": d_bound(constants, schedule),
        "v_bound": v_bound(constants, schedule),
        "lipschitz_C": lip.C,
    }
    if args.grid is not None:
        lo, hi, n = args.grid
        if int(n) != n or n < 1:
            raise InvalidConfigError(f"--grid N must be a positive integer, got {n!r}")
        stats = grid_sup_stats(problem, schedule, lo, hi, int(n))
        out.update(D2_hat=stats.D2_hat, V2_hat=stats.V2_hat,
                   q_star=optimal_q(stats.D2_hat, stats.V2_hat, CostModel(DEFAULT_C1, DEFAULT_C2, schedule.r)))
    return out


def _scenario(args: argparse.Namespace) -> None:
    overrides = {
        "seed": args.seed,
        "replicas": args.replicas,
        "iterations": args.iterations,
        "workers": args.workers,
        "out": None if args.out is None else str(args.out),
    }
    config = load_config(args.config, args.command, overrides)
    if args.command == "verify" and args.quick:
        config.options["quick"] = True
    result = run_scenario(config)
    print(dumps({"scenario": result.scenario, "out": result.out_dir, "files": result.files}))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "qstar":
            print(dumps(_qstar(args)))
        elif args.command == "bounds":
            print(dumps(_bounds(args)))
        else:
            _scenario(args)
    except (InvalidConfigError, PreconditionError) as exc:
        error(str(exc))
        return EXIT_CONFIG
    except VerificationError as exc:
        error(str(exc))
        return EXIT_FAILED
    except AbloError as exc:
        error(f"{type(exc).__name__}: {exc}")
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
