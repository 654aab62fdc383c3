"""
Experiment scenarios for ablo.

Each scenario takes a validated ExperimentConfig, runs its experiment,
writes CSV/JSON files plus a `manifest.json` into the output directory and
returns a ScenarioResult with a small summary. Files contain no timings,
so identical configs produce byte-identical outputs.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import ExperimentConfig
from .constants import CSV_SCHEMA_VERSION, DEFAULT_Q_MIN, MANIFEST_SCHEMA_VERSION
from .errors import AbloError, PreconditionError
from .estimators import InnerSchedule, branch_call_counts
from .outer_loop import (
    RUN_COLUMNS,
    BatchRecord,
    Diagnostics,
    EstimatorSpec,
    RunRecord,
    nominal_q,
    run_replicas,
    run_sgd_batch,
)
from .problems import counterexample_spec, make_problem
from .problems.base import BilevelProblem
from .problems.counterexample import as_problem, regularity, stationary_stats
from .theory import CostModel, d_bound, lipschitz_c, optimal_q, v_bound
from .utils.io import write_csv, write_json, write_manifest
from .utils.logging import error, heading, info, ok, warn
from .utils.rng import init_stream, replica_seeds
from .verification import empirical_qstar, first_crossing, grid_sup_stats, run_verification_battery

logger = logging.getLogger("ablo.scenarios")


@dataclass
class ScenarioResult:
    scenario: str
    out_dir: Path
    files: List[str] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


# ------------------------------------------------------------
# Internal helpers
# ------------------------------------------------------------

def _start_points(config: ExperimentConfig, problem: BilevelProblem, n: int) -> np.ndarray:
    lo, hi = config.theta0_range
    return init_stream(config.seed).uniform(lo, hi, (n, problem.s))


def _finish(config: ExperimentConfig, files: List[str], summary: Dict[str, Any]) -> ScenarioResult:
    write_json(config.out / "summary.json", summary)
    files = files + ["summary.json"]
    write_manifest(config.out, config.scenario, config.as_dict(), files, MANIFEST_SCHEMA_VERSION, CSV_SCHEMA_VERSION)
    return ScenarioResult(config.scenario, config.out, sorted(files + ["manifest.json"]), summary)


def _use_batch(config: ExperimentConfig, problem: BilevelProblem, spec: EstimatorSpec) -> bool:
    engine = config.options.get("engine", "auto")
    possible = problem.elementwise and problem.task_distribution() is not None and spec.kind != "adaptive_ufom"
    if engine == "batch" and not possible:
        raise PreconditionError(f"estimator {spec.label} on {problem.name} cannot run as a replica batch")
    return possible and engine != "sequential"


def _batch_replica_rows(batch: BatchRecord, replica: int, seed_label: str, q: Optional[float]) -> List[list]:
    grad_abs = batch.grad_abs[:, replica]
    grad_sq = grad_abs * grad_abs
    min_sq = np.minimum.accumulate(grad_sq)
    theta = batch.theta[:, replica]
    rows = []
    for k in range(1, grad_abs.size):
        grads = int(batch.grad_calls[k, replica])
        hvps = int(batch.hvp_calls[k, replica])
        rows.append([
            seed_label, k, repr(float(theta[k])), abs(float(theta[k])), float(grad_sq[k]), float(grad_abs[k]),
            float(min_sq[k]), q, None, grads, hvps, grads + hvps, None, None, None,
        ])
    return rows


@dataclass
class _Curves:
    """Per-replica |dM/dtheta|^2 traces of one estimator, row 0 at theta0."""
    label: str
    grad_sq: List[np.ndarray]
    calls: List[np.ndarray]


def _run_curves(config: ExperimentConfig, problem: BilevelProblem, inner: InnerSchedule) -> Tuple[List[_Curves], List[str]]:
    outer = config.outer.to_schedule()
    theta0 = _start_points(config, problem, config.replicas)
    seeds = replica_seeds(config.seed, config.replicas)
    files: List[str] = []
    curves: List[_Curves] = []

    for est_config in config.estimators:
        spec = est_config.to_spec()
        info(f"  {spec.label}: {config.replicas} replicas x {outer.tau} iterations")
        grad_sq: List[np.ndarray] = []
        calls: List[np.ndarray] = []
        if _use_batch(config, problem, spec):
            batch = run_sgd_batch(problem, spec, inner, outer, theta0[:, 0], seeds[0])
            for i in range(config.replicas):
                name = f"{spec.label}_replica{i}.csv"
                write_csv(config.out / name, RUN_COLUMNS,
                          _batch_replica_rows(batch, i, f"{config.seed}:{i}", nominal_q(spec)))
                files.append(name)
                grad_sq.append(batch.grad_abs[:, i] ** 2)
                calls.append(batch.function_calls[:, i].astype(float))
        else:
            records = run_replicas(problem, spec, inner, outer, list(theta0), seeds,
                                   Diagnostics(exact_gradient=True), workers=config.workers)
            for i, record in enumerate(records):
                name = f"{spec.label}_replica{i}.csv"
                write_csv(config.out / name, RUN_COLUMNS, record.csv_rows(skip_initial=True))
                files.append(name)
                grad_sq.append(record.column("grad_norm_sq"))
                calls.append(record.function_calls)
        curves.append(_Curves(spec.label, grad_sq, calls))
    return curves, files


def _counterexample_limit(problem: BilevelProblem) -> Optional[float]:
    spec = getattr(problem, "spec", None)
    return None if spec is None else stationary_stats(spec).limit_grad_sq


# ------------------------------------------------------------
# Scenarios
# ------------------------------------------------------------

def scenario_divergence(config: ExperimentConfig) -> ScenarioResult:
    """FOM against UFOM on the counterexample; one CSV per estimator and replica."""
    problem = make_problem(config.problem.name, config.problem.params)
    inner = config.inner_schedule()
    curves, files = _run_curves(config, problem, inner)

    fraction = config.options["late_fraction"]
    summary: Dict[str, Any] = {"limit_grad_sq": _counterexample_limit(problem), "estimators": {}}
    for c in curves:
        late = []
        for trace in c.grad_sq:
            body = trace[1:]
            n = max(1, int(math.ceil(fraction * body.size))) if body.size else 0
            late.append(float(np.mean(body[-n:])) if n else None)
        summary["estimators"][c.label] = {
            "late_mean_grad_sq": late,
            "min_grad_sq": [float(np.min(t)) for t in c.grad_sq],
            "final_grad_sq": [float(t[-1]) for t in c.grad_sq],
        }
    return _finish(config, files, summary)


def scenario_convergence(config: ExperimentConfig) -> ScenarioResult:
    """Exact and UFOM runs with decaying steps; reports min-so-far |dM/dtheta|^2."""
    problem = make_problem(config.problem.name, config.problem.params)
    inner = config.inner_schedule()
    curves, files = _run_curves(config, problem, inner)

    summary: Dict[str, Any] = {"estimators": {}}
    for c in curves:
        mins = [np.minimum.accumulate(t) for t in c.grad_sq]
        summary["estimators"][c.label] = {
            "final_min_grad_sq": [float(m[-1]) for m in mins],
            "min_nonincreasing": all(bool(np.all(np.diff(m) <= 0)) for m in mins),
        }
    return _finish(config, files, summary)


SWEEP_COLUMNS = (
    "seed", "alpha_index", "alpha", "D2_hat", "V2_hat", "d_bound_sq", "v_bound_sq", "lipschitz_C",
    "q_theory", "q_empirical", "q_ratio", "agree", "function_calls",
)

CURVE_COLUMNS = ("seed", "alpha_index", "alpha", "q", "k", "mean_grad_abs", "se_grad_abs", "function_calls")


def scenario_alpha_sweep(config: ExperimentConfig, with_qstar: bool) -> ScenarioResult:
    """
    One row per inner step size: grid D^2 and V^2, the analytic bounds and
    the theory q*; with `with_qstar` also the empirical q* and its curves.
    """
    opts = config.options
    alphas = np.linspace(opts["alpha_range"][0], opts["alpha_range"][1], opts["alpha_points"])
    base = dict(config.problem.params)
    rows: List[list] = []
    curve_rows: List[list] = []
    agree_flags: List[bool] = []
    child_seeds = replica_seeds(config.seed, len(alphas))

    for idx, alpha in enumerate(alphas):
        spec = counterexample_spec({**base, "alpha": float(alpha)})
        problem = as_problem(spec)
        inner = InnerSchedule.constant(float(alpha), spec.r)
        stats = grid_sup_stats(problem, inner, opts["grid_range"][0], opts["grid_range"][1], opts["grid_points"])
        constants = regularity(spec)
        cost = CostModel(1.0, 1.0, spec.r, 0.0)
        q_theory = optimal_q(stats.D2_hat, stats.V2_hat, cost)

        q_emp = ratio = agree = calls = None
        if with_qstar:
            q_grid = list(np.linspace(opts["q_range"][0], opts["q_range"][1], opts["q_points"]))
            search = empirical_qstar(
                problem, inner, q_grid, config.replicas, opts["iterations"], config.theta0_range,
                np.random.default_rng(child_seeds[idx]), outer=config.outer.to_schedule(),
            )
            q_emp = search.best_q
            ratio = q_emp / q_theory if q_theory > 0 else math.inf
            agree = 0.5 <= ratio <= 2.0
            agree_flags.append(agree)
            calls = search.times[q_emp]
            for q in search.q_grid:
                for k, (m, s, c) in enumerate(zip(search.curves[q], search.se[q], search.calls[q])):
                    curve_rows.append([config.seed, idx, float(alpha), q, k, float(m), float(s), float(c)])
        info(f"  alpha={alpha:.4g}: D2={stats.D2_hat:.4g} V2={stats.V2_hat:.4g} q*={q_theory:.4g}"
             + (f" empirical={q_emp:.4g}" if q_emp is not None else ""))
        rows.append([
            config.seed, idx, float(alpha), stats.D2_hat, stats.V2_hat,
            d_bound(constants, inner) ** 2, v_bound(constants, inner) ** 2, lipschitz_c(constants, inner).C,
            q_theory, q_emp, ratio, agree, calls,
        ])

    files = ["sweep.csv"]
    write_csv(config.out / "sweep.csv", SWEEP_COLUMNS, rows)
    summary: Dict[str, Any] = {
        "alphas": [float(a) for a in alphas],
        "D2_hat": [r[3] for r in rows],
        "q_theory": [r[8] for r in rows],
        "bounds_dominate": all(r[3] <= r[5] and r[4] <= r[6] for r in rows),
    }
    if with_qstar:
        write_csv(config.out / "qstar_curves.csv", CURVE_COLUMNS, curve_rows)
        files.append("qstar_curves.csv")
        summary["q_empirical"] = [r[9] for r in rows]
        summary["agreement_fraction"] = float(np.mean(agree_flags)) if agree_flags else None
    return _finish(config, files, summary)


def scenario_bias_variance_sweep(config: ExperimentConfig) -> ScenarioResult:
    """Grid D^2, V^2, bounds and theory q* across the inner step size sweep."""
    return scenario_alpha_sweep(config, with_qstar=False)


def scenario_qstar_theory_vs_experiment(config: ExperimentConfig) -> ScenarioResult:
    """The alpha sweep with an empirical q grid search at every point."""
    return scenario_alpha_sweep(config, with_qstar=True)


RACE_COLUMNS = ("seed", "estimator", "q", "k", "mean_grad_abs", "se_grad_abs", "function_calls")


def scenario_qstar_race(config: ExperimentConfig) -> ScenarioResult:
    """FOM, UFOM at the theory q* and exact UFOM (q=1) on a function-call axis."""
    problem = make_problem(config.problem.name, config.problem.params)
    inner = config.inner_schedule()
    opts = config.options
    stats = grid_sup_stats(problem, inner, opts["grid_range"][0], opts["grid_range"][1], opts["grid_points"])
    q_star = optimal_q(stats.D2_hat, stats.V2_hat, CostModel(1.0, 1.0, inner.r, 0.0))
    if q_star <= 0.0:
        warn(f"theory q* is 0 (no bias on the grid); racing with q_min={DEFAULT_Q_MIN}")
        q_star = DEFAULT_Q_MIN

    outer = config.outer.to_schedule()
    theta0 = _start_points(config, problem, config.replicas)[:, 0]
    seed = replica_seeds(config.seed, 1)[0]
    rows: List[list] = []
    finals: Dict[str, float] = {}
    curves: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for est_config in config.estimators:
        spec = est_config.to_spec(q=q_star)
        batch = run_sgd_batch(problem, spec, inner, outer, theta0, seed)
        mean, se, calls = batch.mean_curve(), batch.se_curve(), batch.mean_calls()
        curves[spec.label] = (mean, calls)
        finals[spec.label] = float(mean[-1])
        q = nominal_q(spec)
        for k in range(mean.size):
            rows.append([config.seed, spec.label, q, k, float(mean[k]), float(se[k]), float(calls[k])])

    converging = [label for label, spec in zip(curves, config.estimators) if spec.kind != "fom"]
    target = opts.get("target")
    if target is None:
        target = max((finals[label] for label in converging), default=min(finals.values()))
    times = {label: first_crossing(mean, calls, target) for label, (mean, calls) in curves.items()}

    write_csv(config.out / "race.csv", RACE_COLUMNS, rows)
    summary = {
        "q_star": q_star,
        "D2_hat": stats.D2_hat,
        "V2_hat": stats.V2_hat,
        "target": target,
        "calls_to_target": times,
        "final_mean_grad_abs": finals,
    }
    return _finish(config, ["race.csv"], summary)


WEIGHT_COLUMNS = ("seed", "estimator", "sample", "corrupted", "theta", "weight", "function_calls")
QTRACE_COLUMNS = ("seed", "k", "q", "xi", "function_calls", "d2_bar", "v2_bar")


def scenario_weighted_toy(config: ExperimentConfig) -> ScenarioResult:
    """Exact, FOM and Adaptive UFOM on the weighted classifier under equal call budgets."""
    problem = make_problem(config.problem.name, config.problem.params)
    dataset = getattr(problem, "dataset", None)
    if dataset is None:
        raise PreconditionError("the weighted_toy scenario needs a problem built from a corrupted dataset")
    inner = config.inner_schedule()
    outer = config.outer.to_schedule()
    budget = config.options["budget_iterations"] * sum(branch_call_counts(inner.r, corrected=True))
    theta0 = _start_points(config, problem, config.replicas)
    seeds = replica_seeds(config.seed, config.replicas)
    diagnostics = Diagnostics(exact_gradient=True, objective=True)

    files: List[str] = []
    weight_rows: List[list] = []
    qtrace_rows: List[list] = []
    summary: Dict[str, Any] = {"budget": budget, "corrupted": int(dataset.corrupted.sum()), "estimators": {}}

    for est_config in config.estimators:
        spec = est_config.to_spec()
        info(f"  {spec.label}: budget {budget} function calls")
        records: List[RunRecord] = run_replicas(problem, spec, inner, outer, list(theta0), seeds, diagnostics,
                                                workers=config.workers, budget=budget)
        stats = []
        for i, record in enumerate(records):
            name = f"{spec.label}_replica{i}.csv"
            write_csv(config.out / name, RUN_COLUMNS, record.csv_rows(skip_initial=True))
            files.append(name)
            theta = record.final_theta
            used = int(record.function_calls[-1])
            weights = problem.weights(theta)
            for n, bad in enumerate(dataset.corrupted):
                weight_rows.append([record.seed, spec.label, n, bool(bad), float(theta[n]), float(weights[n]), used])
            if spec.kind == "adaptive_ufom":
                for row in record.rows[1:]:
                    qtrace_rows.append([record.seed, row.k, row.q, row.xi, row.function_calls, row.d2_bar, row.v2_bar])
            qs = [row.q for row in record.rows[1:] if row.q is not None]
            stats.append({
                "iterations": record.rows[-1].k,
                "function_calls": used,
                "validation_loss": record.rows[-1].objective,
                "separation": float(np.mean(theta[~dataset.corrupted]) - np.mean(theta[dataset.corrupted])),
                "q_range": [min(qs), max(qs)] if qs else None,
            })
        summary["estimators"][spec.label] = stats

    write_csv(config.out / "weights.csv", WEIGHT_COLUMNS, weight_rows)
    files.append("weights.csv")
    if qtrace_rows:
        write_csv(config.out / "q_trace.csv", QTRACE_COLUMNS, qtrace_rows)
        files.append("q_trace.csv")
    return _finish(config, files, summary)


CHECK_COLUMNS = ("seed", "check_index", "name", "passed")


def scenario_verify(config: ExperimentConfig) -> ScenarioResult:
    """Run the verification battery; raises VerificationError after writing its report."""
    report = run_verification_battery(config.seed, quick=config.options["quick"])
    write_json(config.out / "verification.json", report.as_dict())
    write_csv(config.out / "checks.csv", CHECK_COLUMNS,
              [[config.seed, i, c.name, c.passed] for i, c in enumerate(report.checks)])
    result = _finish(config, ["verification.json", "checks.csv"],
                     {"passed": report.passed, "failures": report.failures, "checks": len(report.checks)})
    for check in report.checks:
        (ok if check.passed else error)(check.name)
    report.raise_for_failures()
    return result


SCENARIO_RUNNERS: Dict[str, Callable[[ExperimentConfig], ScenarioResult]] = {
    "divergence": scenario_divergence,
    "convergence": scenario_convergence,
    "bias_variance_sweep": scenario_bias_variance_sweep,
    "qstar_theory_vs_experiment": scenario_qstar_theory_vs_experiment,
    "qstar_race": scenario_qstar_race,
    "weighted_toy": scenario_weighted_toy,
    "verify": scenario_verify,
}


def run_scenario(config: ExperimentConfig) -> ScenarioResult:
    """Run `config.scenario`, writing into `config.out`."""
    start_time = time.time()
    heading(f"ablo {config.scenario} -> {config.out}")
    config.out.mkdir(parents=True, exist_ok=True)
    try:
        result = SCENARIO_RUNNERS[config.scenario](config)
    except AbloError as exc:
        error(f"{config.scenario} failed: {exc}")
        raise
    elapsed = time.time() - start_time
    ok(f"{config.scenario}: {len(result.files)} files in {elapsed:.1f}s")
    return result
