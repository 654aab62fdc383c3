"""
Independent oracles and statistical checks for the estimators.

- Finite differences: `fd_check_gradients`, `check_hvp_linearity`,
  `fd_total_gradient`, `oracle_equivalence`.
- Monte Carlo: `mc_unbiasedness` compares UFOM sample means with the exact
  task-expected gradient and reports the second moment against its bound.
- Grid statistics: `grid_sup_stats` approximates the suprema D^2 and V^2
  over a scalar theta grid.
- `empirical_qstar` picks the q that reaches a reference level in the fewest
  function calls.
- `run_verification_battery` runs all of the above on the built-in problems.

Finite task sets are always enumerated exactly, so the only Monte-Carlo
layer in any check is the one under test.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import (
    FD_ATOL,
    FD_RTOL,
    FD_STEP,
    SWEEP_ALPHA_POINTS,
    SWEEP_ALPHA_RANGE,
    SWEEP_GRID_POINTS,
    SWEEP_GRID_RANGE,
    SWEEP_SETUP,
    DIVERGENCE_SETUP,
    TOY_INNER_ALPHA,
    TOY_INNER_STEPS,
    VERIFY_FD_SAMPLES,
    VERIFY_MC_DRAWS,
    VERIFY_MC_POINTS,
    VERIFY_MC_QS,
    VERIFY_Z_LIMIT,
)
from .errors import InvalidConfigError, PreconditionError, VerificationError
from .estimators import (
    InnerSchedule,
    branch_call_counts,
    exact_gradient_cached,
    exact_gradient_recompute,
    expected_call_counts,
    fom_and_exact,
    fom_gradient,
    inner_rollout,
    meta_gradient,
    ufom_gradient,
    validate_probability,
)
from .outer_loop import EstimatorSpec, OuterSchedule, run_sgd_batch
from .problems import make_problem
from .problems.base import BilevelProblem
from .problems.counterexample import (
    PIECES,
    CounterexampleSpec,
    as_problem,
    build_counterexample,
    piece_values,
    regularity,
    stationary_stats,
)
from .theory import CostModel, d_bound, expected_time, optimal_q, qstar_polynomial, v_bound
from .utils.rng import SeedLike, as_seed_sequence

logger = logging.getLogger("ablo.verification")


# ------------------------------------------------------------
# Finite differences
# ------------------------------------------------------------

@dataclass(frozen=True)
class FDConfig:
    """
    Central-difference settings.

    The step for coordinate x is step * max(1, |x|). A value passes when
    |analytic - numeric| <= atol + rtol * max(|numeric|, 1).
    """
    step: float = FD_STEP
    rtol: float = FD_RTOL
    atol: float = FD_ATOL

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise InvalidConfigError(f"FD step must be positive, got {self.step!r}")
        if self.rtol < 0 or self.atol < 0:
            raise InvalidConfigError("FD tolerances must be nonnegative")

    def step_for(self, x: float) -> float:
        return self.step * max(1.0, abs(float(x)))

    def error(self, analytic, numeric) -> float:
        a = np.ravel(np.asarray(analytic, dtype=float))
        n = np.ravel(np.asarray(numeric, dtype=float))
        if a.size == 0:
            return 0.0
        return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), 1.0)))

    def within(self, analytic, numeric) -> bool:
        a = np.ravel(np.asarray(analytic, dtype=float))
        n = np.ravel(np.asarray(numeric, dtype=float))
        return bool(np.all(np.abs(a - n) <= self.atol + self.rtol * np.maximum(np.abs(n), 1.0)))


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, fd: FDConfig) -> np.ndarray:
    """Gradient of the scalar map `fn` at x, one coordinate at a time."""
    x = np.array(x, dtype=float).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = fd.step_for(x[i])
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (float(fn(xp)) - float(fn(xm))) / (xp[i] - xm[i])
    return grad


@dataclass
class OracleCheck:
    """Worst error seen for one oracle and where it occurred."""
    oracle: str
    max_error: float = 0.0
    passed: bool = True
    worst_theta: Optional[np.ndarray] = None
    worst_phi: Optional[np.ndarray] = None
    worst_task: Optional[object] = None

    def record(self, error: float, ok: bool, theta, phi, task) -> None:
        if error >= self.max_error or (not ok and self.passed):
            self.max_error = max(self.max_error, error)
            self.worst_theta = np.array(theta, dtype=float)
            self.worst_phi = None if phi is None else np.array(phi, dtype=float)
            self.worst_task = task.id
        self.passed = self.passed and ok

    def as_dict(self) -> dict:
        return {
            "oracle": self.oracle,
            "max_error": self.max_error,
            "passed": self.passed,
            "worst_theta": self.worst_theta,
            "worst_phi": self.worst_phi,
            "worst_task": self.worst_task,
        }


@dataclass
class OracleReport:
    problem: str
    samples: int
    tolerance: float
    checks: Dict[str, OracleCheck] = field(default_factory=dict)

    def check(self, oracle: str) -> OracleCheck:
        return self.checks.setdefault(oracle, OracleCheck(oracle))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    @property
    def failures(self) -> List[str]:
        return [name for name, c in self.checks.items() if not c.passed]

    def max_errors(self) -> Dict[str, float]:
        return {name: c.max_error for name, c in self.checks.items()}

    def describe_failures(self) -> List[str]:
        out = []
        for name in self.failures:
            c = self.checks[name]
            out.append(
                f"{self.problem}.{name}: error {c.max_error:.3g} at theta={c.worst_theta} "
                f"phi={c.worst_phi} task={c.worst_task}"
            )
        return out

    def as_dict(self) -> dict:
        return {
            "problem": self.problem,
            "samples": self.samples,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "checks": {name: c.as_dict() for name, c in self.checks.items()},
        }


def fd_check_gradients(
    problem: BilevelProblem,
    samples: int = VERIFY_FD_SAMPLES,
    fd: Optional[FDConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> OracleReport:
    """
    Compare every analytic derivative oracle with central differences.

    Gradients are differenced from the losses; the HVPs and jvp_V are
    differenced from the scalar maps phi -> dL_in/dphi . b,
    theta -> dL_in/dphi . b and theta -> V(theta) . b with a random b.

    Returns:
        OracleReport with the largest mixed relative error per oracle and the
        point where it occurred.
    """
    fd = fd or FDConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    report = OracleReport(problem.name, samples, fd.rtol)

    def compare(name, analytic, numeric, theta, phi, task) -> None:
        report.check(name).record(fd.error(analytic, numeric), fd.within(analytic, numeric), theta, phi, task)

    for _ in range(samples):
        theta, phi = problem.sample_point(rng)
        task = problem.sample_task(rng)
        b = rng.standard_normal(problem.p)

        compare("inner_grad_phi", problem.inner_grad_phi(theta, phi, task),
                central_difference(lambda x: problem.inner_loss(theta, x, task), phi, fd), theta, phi, task)
        compare("inner_grad_theta", problem.inner_grad_theta(theta, phi, task),
                central_difference(lambda x: problem.inner_loss(x, phi, task), theta, fd), theta, phi, task)
        compare("outer_grad_phi", problem.outer_grad_phi(theta, phi, task),
                central_difference(lambda x: problem.outer_loss(theta, x, task), phi, fd), theta, phi, task)
        compare("outer_grad_theta", problem.outer_grad_theta(theta, phi, task),
                central_difference(lambda x: problem.outer_loss(x, phi, task), theta, fd), theta, phi, task)
        compare("hvp_phi_phi", problem.hvp_phi_phi(theta, phi, task, b),
                central_difference(lambda x: np.dot(problem.inner_grad_phi(theta, x, task), b), phi, fd),
                theta, phi, task)
        compare("hvp_theta_phi", problem.hvp_theta_phi(theta, phi, task, b),
                central_difference(lambda x: np.dot(problem.inner_grad_phi(x, phi, task), b), theta, fd),
                theta, phi, task)
        compare("jvp_V", problem.jvp_V(theta, task, b),
                central_difference(lambda x: np.dot(problem.start_point(x, task), b), theta, fd),
                theta, phi, task)

    for line in report.describe_failures():
        logger.warning("finite-difference mismatch: %s", line)
    return report


def check_hvp_linearity(
    problem: BilevelProblem,
    samples: int = VERIFY_FD_SAMPLES,
    rng: Optional[np.random.Generator] = None,
    rtol: float = 1e-10,
) -> OracleReport:
    """hvp(c b1 + b2) == c hvp(b1) + hvp(b2) for both HVP oracles."""
    rng = rng if rng is not None else np.random.default_rng(0)
    report = OracleReport(problem.name, samples, rtol)
    for _ in range(samples):
        theta, phi = problem.sample_point(rng)
        task = problem.sample_task(rng)
        b1 = rng.standard_normal(problem.p)
        b2 = rng.standard_normal(problem.p)
        c = float(rng.standard_normal())
        for name in ("hvp_theta_phi", "hvp_phi_phi"):
            oracle = getattr(problem, name)
            h1 = np.asarray(oracle(theta, phi, task, b1), dtype=float)
            h2 = np.asarray(oracle(theta, phi, task, b2), dtype=float)
            lhs = np.asarray(oracle(theta, phi, task, c * b1 + b2), dtype=float)
            rhs = c * h1 + h2
            gap = float(np.linalg.norm(lhs - rhs))
            scale = abs(c) * float(np.linalg.norm(h1)) + float(np.linalg.norm(h2))
            error = 0.0 if gap == 0.0 else gap / max(scale, np.finfo(float).tiny)
            report.check(name).record(error, error <= rtol, theta, phi, task)
    return report


def fd_total_gradient(problem: BilevelProblem, theta, task, schedule: InnerSchedule, fd: Optional[FDConfig] = None) -> np.ndarray:
    """Central differences of theta -> L_out(theta, phi_r(theta), task); 2s rollouts."""
    fd = fd or FDConfig()

    def objective(x: np.ndarray) -> float:
        phi_r, _, _ = inner_rollout(problem, x, task, schedule)
        return problem.outer_loss(x, phi_r, task)

    return central_difference(objective, np.asarray(theta, dtype=float).reshape(problem.s), fd)


@dataclass
class EquivalenceReport:
    problem: str
    points: int
    recompute_error: float
    fd_error: float
    recompute_rtol: float
    fd_rtol: float

    @property
    def passed(self) -> bool:
        return self.recompute_error <= self.recompute_rtol and self.fd_error <= self.fd_rtol

    def as_dict(self) -> dict:
        return {
            "problem": self.problem, "points": self.points, "passed": self.passed,
            "recompute_error": self.recompute_error, "fd_error": self.fd_error,
            "recompute_rtol": self.recompute_rtol, "fd_rtol": self.fd_rtol,
        }


def oracle_equivalence(
    problem: BilevelProblem,
    schedule: InnerSchedule,
    points: int = VERIFY_FD_SAMPLES,
    fd: Optional[FDConfig] = None,
    rng: Optional[np.random.Generator] = None,
    recompute_rtol: float = 1e-12,
) -> EquivalenceReport:
    """Cached exact gradient against the recompute pass and against finite differences."""
    fd = fd or FDConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    worst_recompute = 0.0
    worst_fd = 0.0
    for _ in range(points):
        theta, _ = problem.sample_point(rng)
        task = problem.sample_task(rng)
        cached = exact_gradient_cached(problem, theta, task, schedule).grad
        recomputed = exact_gradient_recompute(problem, theta, task, schedule).grad
        numeric = fd_total_gradient(problem, theta, task, schedule, fd)
        worst_recompute = max(worst_recompute, fd.error(recomputed, cached))
        worst_fd = max(worst_fd, fd.error(cached, numeric))
    return EquivalenceReport(problem.name, points, worst_recompute, worst_fd, recompute_rtol, fd.rtol)


# ------------------------------------------------------------
# Monte Carlo unbiasedness
# ------------------------------------------------------------

@dataclass
class MCReport:
    """
    UFOM sample mean against the exact expected gradient.

    `z` is per coordinate; a coordinate with zero standard error has z = 0
    when the mean is exact and +-inf otherwise. `second_moment` is the
    empirical E||G||^2 with its standard error; `second_moment_bound` is
    (1/q - 1) D^2(theta) + V^2(theta).
    """
    q: Optional[float]
    draws: int
    mean: np.ndarray
    exact: np.ndarray
    se: np.ndarray
    z: np.ndarray
    second_moment: float
    second_moment_se: float
    second_moment_bound: Optional[float]
    first_order: bool = False
    z_limit: float = VERIFY_Z_LIMIT

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z))) if self.z.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_abs_z < self.z_limit

    @property
    def second_moment_within_bound(self) -> bool:
        if self.second_moment_bound is None:
            return True
        slack = self.z_limit * self.second_moment_se + 1e-12 * max(1.0, self.second_moment_bound)
        return self.second_moment - slack <= self.second_moment_bound

    def as_dict(self) -> dict:
        return {
            "q": self.q, "draws": self.draws, "first_order": self.first_order,
            "mean": self.mean, "exact": self.exact, "se": self.se, "z": self.z,
            "max_abs_z": self.max_abs_z, "passed": self.passed,
            "second_moment": self.second_moment, "second_moment_se": self.second_moment_se,
            "second_moment_bound": self.second_moment_bound,
        }


def mc_unbiasedness(
    problem: BilevelProblem,
    theta,
    schedule: InnerSchedule,
    q: float,
    draws: int,
    rng: np.random.Generator,
    first_order: bool = False,
    z_limit: float = VERIFY_Z_LIMIT,
) -> MCReport:
    """
    Average `draws` UFOM estimates per task and compare with dM/dtheta.

    Tasks are enumerated with their probabilities; only the Bernoulli gate
    is sampled. `ufom_gradient` is called once per task with xi forced to
    0 and once with xi forced to 1, so each draw costs one uniform variate. With `first_order` the FOM proxy is averaged
    instead (a negative control that should fail wherever FOM is biased).

    Raises:
        PreconditionError: if the problem has no finite task set.
    """
    dist = problem.task_distribution()
    if dist is None:
        raise PreconditionError(f"{problem.name} has no finite task enumeration")
    if draws < 2:
        raise InvalidConfigError(f"draws must be at least 2, got {draws}")
    q = validate_probability(q)
    theta = np.asarray(theta, dtype=float).reshape(problem.s)

    mean = None
    var = np.zeros(problem.s)
    second = 0.0
    second_var = 0.0
    bias_sq = 0.0
    exact_sq = 0.0
    for task, prob in dist:
        # both gate outcomes are deterministic given the task: each branch of
        # the estimator runs once and only the gate is sampled per draw
        skip = ufom_gradient(problem, theta, task, schedule, q, xi=0).grad
        if first_order:
            task_mean = skip
            task_var = np.zeros(problem.s)
            task_second = float(np.dot(skip, skip))
            task_second_var = 0.0
        else:
            hit = ufom_gradient(problem, theta, task, schedule, q, xi=1)
            corrected = hit.grad
            bias_sq += prob * hit.bias_sq
            exact_sq += prob * hit.exact_sq
            hits = int(np.count_nonzero(rng.random(draws) < q))
            frac = hits / draws
            if hits == draws:
                task_mean = corrected
            elif hits == 0:
                task_mean = skip
            else:
                task_mean = frac * corrected + (1.0 - frac) * skip
            spread = frac * (1.0 - frac) * draws / (draws - 1)
            task_var = spread * (corrected - skip) ** 2
            c_sq = float(np.dot(corrected, corrected))
            f_sq = float(np.dot(skip, skip))
            task_second = frac * c_sq + (1.0 - frac) * f_sq
            task_second_var = spread * (c_sq - f_sq) ** 2
        term = prob * task_mean
        mean = term if mean is None else mean + term
        var = var + prob * prob * task_var / draws
        second += prob * task_second
        second_var += prob * prob * task_second_var / draws

    exact = meta_gradient(problem, theta, schedule)
    se = np.sqrt(var)
    diff = mean - exact
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
    bound = None if first_order else (1.0 / q - 1.0) * bias_sq + exact_sq
    return MCReport(
        q=None if first_order else q,
        draws=draws,
        mean=np.asarray(mean, dtype=float),
        exact=np.asarray(exact, dtype=float),
        se=se,
        z=z,
        second_moment=second,
        second_moment_se=math.sqrt(second_var),
        second_moment_bound=bound,
        first_order=first_order,
        z_limit=z_limit,
    )


# ------------------------------------------------------------
# Grid statistics
# ------------------------------------------------------------

@dataclass
class GridStats:
    """
    Task-expected squared bias and squared exact-gradient norm on a scalar
    theta grid, with their suprema D2_hat and V2_hat.
    """
    grid: np.ndarray
    bias_sq: np.ndarray
    exact_sq: np.ndarray

    @property
    def D2_hat(self) -> float:
        return float(np.max(self.bias_sq))

    @property
    def V2_hat(self) -> float:
        return float(np.max(self.exact_sq))

    def as_dict(self) -> dict:
        return {"points": int(self.grid.size), "lo": float(self.grid[0]), "hi": float(self.grid[-1]),
                "D2_hat": self.D2_hat, "V2_hat": self.V2_hat}


def grid_sup_stats(
    problem: BilevelProblem,
    schedule: InnerSchedule,
    theta_lo: float,
    theta_hi: float,
    n_grid: int,
) -> GridStats:
    """
    Evaluate E||b_FO - b_Exact||^2 and E||b_Exact||^2 on an even grid over
    [theta_lo, theta_hi] by exact task enumeration.

    Raises:
        PreconditionError: if s != 1 or the task set is not finite.
    """
    if problem.s != 1:
        raise PreconditionError(f"grid statistics need a scalar theta, {problem.name} has s={problem.s}")
    dist = problem.task_distribution()
    if dist is None:
        raise PreconditionError(f"{problem.name} has no finite task enumeration")
    if n_grid < 1 or not theta_hi >= theta_lo:
        raise InvalidConfigError("grid needs n_grid >= 1 and theta_hi >= theta_lo")

    grid = np.linspace(theta_lo, theta_hi, n_grid)
    bias_sq = np.zeros(n_grid)
    exact_sq = np.zeros(n_grid)
    for task, prob in dist:
        if problem.elementwise:
            fo, ex = fom_and_exact(problem, grid, task, schedule)
            fo = fo.reshape(n_grid, -1)
            ex = ex.reshape(n_grid, -1)
        else:
            pairs = [fom_and_exact(problem, np.array([t]), task, schedule) for t in grid]
            fo = np.array([p[0] for p in pairs]).reshape(n_grid, -1)
            ex = np.array([p[1] for p in pairs]).reshape(n_grid, -1)
        bias_sq += prob * np.sum((fo - ex) ** 2, axis=1)
        exact_sq += prob * np.sum(ex ** 2, axis=1)
    return GridStats(grid, bias_sq, exact_sq)


# ------------------------------------------------------------
# Empirical q*
# ------------------------------------------------------------

@dataclass
class QstarSearch:
    """
    Outcome of the q grid search.

    `curves[q]` is the replica mean of |dM/dtheta| per iteration and
    `calls[q]` the replica mean of cumulative function calls; `times[q]` is
    the function-call count at which the curve first reaches `threshold`
    (inf if never).
    """
    best_q: float
    threshold: float
    q_grid: List[float]
    times: Dict[float, float]
    curves: Dict[float, np.ndarray]
    se: Dict[float, np.ndarray]
    calls: Dict[float, np.ndarray]

    def as_dict(self) -> dict:
        return {"best_q": self.best_q, "threshold": self.threshold, "q_grid": self.q_grid,
                "times": {repr(q): t for q, t in self.times.items()}}


def first_crossing(curve: np.ndarray, calls: np.ndarray, threshold: float) -> float:
    """Function calls at the first index where `curve` <= threshold, or inf."""
    hits = np.flatnonzero(curve <= threshold)
    return float(calls[hits[0]]) if hits.size else math.inf


def empirical_qstar(
    problem: BilevelProblem,
    schedule: InnerSchedule,
    q_grid: Sequence[float],
    replicas: int,
    iters_per_run: int,
    theta0_range: Tuple[float, float],
    rng: np.random.Generator,
    outer: Optional[OuterSchedule] = None,
) -> QstarSearch:
    """
    Grid search for the q that reaches a common level fastest.

    Every q runs the same `replicas` starting points and the same task and
    gate streams. The reference level is the final mean |dM/dtheta| of the
    smallest q in the grid; time is measured in mean cumulative function
    calls (C1 = C2 = 1) at the first crossing.

    Raises:
        InvalidConfigError: if replicas < 1, the grid is empty or a q lies
            outside (0, 1].
    """
    if replicas < 1:
        raise InvalidConfigError(f"replicas must be at least 1, got {replicas}")
    grid = [validate_probability(q) for q in q_grid]
    if not grid:
        raise InvalidConfigError("q_grid must not be empty")
    if iters_per_run < 1:
        raise InvalidConfigError(f"iters_per_run must be at least 1, got {iters_per_run}")
    outer = (outer or OuterSchedule.harmonic(10.0, iters_per_run)).with_tau(iters_per_run)

    lo, hi = theta0_range
    theta0 = rng.uniform(lo, hi, replicas)
    run_seed = (int(rng.integers(2**62)), int(rng.integers(2**62)))

    curves: Dict[float, np.ndarray] = {}
    se: Dict[float, np.ndarray] = {}
    calls: Dict[float, np.ndarray] = {}
    for q in grid:
        batch = run_sgd_batch(problem, EstimatorSpec.ufom(q), schedule, outer, theta0, run_seed)
        curves[q] = batch.mean_curve()
        se[q] = batch.se_curve()
        calls[q] = batch.mean_calls()

    threshold = float(curves[min(grid)][-1])
    times = {q: first_crossing(curves[q], calls[q], threshold) for q in grid}
    best_q = min(grid, key=lambda q: (times[q], q))
    logger.info("empirical q*=%g (threshold %.4g)", best_q, threshold)
    return QstarSearch(best_q, threshold, grid, times, curves, se, calls)


# ------------------------------------------------------------
# Battery
# ------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class VerificationReport:
    checks: List[CheckResult] = field(default_factory=list)

    def add(self, name: str, passed: bool, **detail) -> CheckResult:
        result = CheckResult(name, bool(passed), detail)
        self.checks.append(result)
        (logger.info if passed else logger.warning)("check %s: %s", name, "pass" if passed else "FAIL")
        return result

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def raise_for_failures(self) -> None:
        if not self.passed:
            raise VerificationError(self.failures)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "failures": self.failures, "checks": [c.as_dict() for c in self.checks]}


def reference_problems() -> List[Tuple[BilevelProblem, InnerSchedule]]:
    """Each built-in problem with the inner schedule it is checked under."""
    divergence = make_problem("counterexample", dict(DIVERGENCE_SETUP))
    return [
        (divergence, InnerSchedule.constant(divergence.spec.alpha, divergence.spec.r)),
        (make_problem("counterexample", {**DIVERGENCE_SETUP, "dim": 3}),
         InnerSchedule.constant(divergence.spec.alpha, divergence.spec.r)),
        (make_problem("scalar_quadratic", {"w": 1.3, "v0": 0.7}), InnerSchedule.constant(0.3, 5)),
        (make_problem("weighted_toy", {}), InnerSchedule.constant(TOY_INNER_ALPHA, TOY_INNER_STEPS)),
    ]


def breakpoint_gaps(a: float, A: float) -> Dict[str, float]:
    """Largest jump in value, slope and curvature across the two breakpoints."""
    gaps = {}
    for label, z, left, right in (("core", A, PIECES[0], PIECES[1]), ("tail", A + 1.0, PIECES[1], PIECES[2])):
        lhs = piece_values(a, A, z, left)
        rhs = piece_values(a, A, z, right)
        gaps[label] = max(abs(float(l) - float(r)) for l, r in zip(lhs, rhs))
    return gaps


def call_accounting(draws: int, r: int, q: float, rng: np.random.Generator) -> Tuple[bool, dict]:
    """
    Run `draws` instrumented UFOM estimates; every draw must match its
    branch's counts exactly and the means must sit within 2% of the
    expectation (or three binomial standard errors when that is wider).
    """
    problem = make_problem("scalar_quadratic", {"w": 1.0, "v0": 0.0})
    schedule = InnerSchedule.constant(0.5, r)
    theta = np.array([1.0])
    task = problem.sample_task(rng)
    grads = np.empty(draws)
    hvps = np.empty(draws)
    exact = True
    for n in range(draws):
        est = ufom_gradient(problem, theta, task, schedule, q, rng)
        grads[n] = est.counter.grad_evals
        hvps[n] = est.counter.hvp_evals
        exact &= (est.counter.grad_evals, est.counter.hvp_evals) == branch_call_counts(r, bool(est.xi))
    want_g, want_h = expected_call_counts(r, q)
    sd = math.sqrt(q * (1.0 - q) / draws)
    tol_g = max(0.02 * want_g, 3.0 * sd * r * (r - 1) / 2.0)
    tol_h = max(0.02 * want_h, 3.0 * sd * r)
    mean_g, mean_h = float(grads.mean()), float(hvps.mean())
    ok = exact and abs(mean_g - want_g) <= tol_g and abs(mean_h - want_h) <= tol_h
    return ok, {"per_draw_exact": exact, "mean_grad_evals": mean_g, "mean_hvp_evals": mean_h,
                "expected": [want_g, want_h]}


def peak_memory(r_values: Sequence[int]) -> Tuple[bool, dict]:
    """peak_states is r for the cached pass and at most 3 for the streaming passes."""
    problem = make_problem("scalar_quadratic", {"w": 1.0, "v0": 0.0})
    task = problem.sample_task(np.random.default_rng(0))
    theta = np.array([1.0])
    detail = {}
    ok = True
    for r in r_values:
        schedule = InnerSchedule.constant(0.5 / max(r, 1), r)
        peaks = {
            "cached": exact_gradient_cached(problem, theta, task, schedule).counter.peak_states,
            "recompute": exact_gradient_recompute(problem, theta, task, schedule).counter.peak_states,
            "fom": fom_gradient(problem, theta, task, schedule).counter.peak_states,
            "ufom": ufom_gradient(problem, theta, task, schedule, 1.0, xi=1).counter.peak_states,
        }
        ok &= peaks["cached"] == r and all(peaks[k] <= 3 for k in ("recompute", "fom", "ufom"))
        detail[str(r)] = peaks
    return ok, detail


def bound_dominance(alphas: Sequence[float], grid_points: int) -> Tuple[bool, dict]:
    """Grid suprema stay below the squared analytic bounds across the alpha sweep."""
    rows = []
    ok = True
    for alpha in alphas:
        spec = CounterexampleSpec(alpha=float(alpha), **SWEEP_SETUP)
        problem = as_problem(spec)
        schedule = InnerSchedule.constant(alpha, spec.r)
        stats = grid_sup_stats(problem, schedule, SWEEP_GRID_RANGE[0], SWEEP_GRID_RANGE[1], grid_points)
        constants = regularity(spec)
        d_b, v_b = d_bound(constants, schedule), v_bound(constants, schedule)
        row_ok = stats.D2_hat <= d_b ** 2 and stats.V2_hat <= v_b ** 2
        ok &= row_ok
        rows.append({"alpha": float(alpha), "D2_hat": stats.D2_hat, "d_bound_sq": d_b ** 2,
                     "V2_hat": stats.V2_hat, "v_bound_sq": v_b ** 2, "passed": row_ok})
    return ok, {"sweep": rows}


def run_verification_battery(seed: SeedLike = 0, quick: bool = False) -> VerificationReport:
    """
    Run every oracle, accounting and statistical check.

    Args:
        seed: root seed; each check gets its own child stream.
        quick: smaller sample counts and inner lengths, for smoke runs.

    Returns:
        VerificationReport; call `raise_for_failures()` to turn failures
        into a VerificationError.
    """
    streams = iter(np.random.default_rng(s) for s in as_seed_sequence(seed).spawn(64))
    samples = 20 if quick else VERIFY_FD_SAMPLES
    mc_draws = 10_000 if quick else VERIFY_MC_DRAWS
    report = VerificationReport()

    # counterexample constants
    spec = build_counterexample(**DIVERGENCE_SETUP)
    stats = stationary_stats(spec)
    report.add("counterexample_constants", abs(spec.b2 - 17.39) <= 0.01 and abs(spec.A - 12.59) <= 0.01,
               b2=spec.b2, A=spec.A)
    report.add("divergence_identity", abs(stats.limit_grad_sq - 2.0 * DIVERGENCE_SETUP["D"]) <= 1e-9,
               limit_grad_sq=stats.limit_grad_sq, x_star=stats.x_star)

    rng = next(streams)
    worst = 0.0
    for _ in range(100 if quick else 1000):
        gaps = breakpoint_gaps(float(rng.uniform(0.01, 2.0)), float(rng.uniform(0.5, 50.0)))
        worst = max(worst, *gaps.values())
    report.add("c2_continuity", worst < 1e-10, max_gap=worst)

    # oracle contract
    for problem, schedule in reference_problems():
        label = f"{problem.name}_dim{problem.s}" if problem.name == "counterexample" and problem.s > 1 else problem.name
        fd_report = fd_check_gradients(problem, samples, rng=next(streams))
        report.add(f"fd_oracles[{label}]", fd_report.passed, max_errors=fd_report.max_errors(),
                   failures=fd_report.describe_failures())
        lin = check_hvp_linearity(problem, samples, rng=next(streams))
        report.add(f"hvp_linearity[{label}]", lin.passed, max_errors=lin.max_errors())
        eq = oracle_equivalence(problem, schedule, samples, rng=next(streams))
        report.add(f"oracle_equivalence[{label}]", eq.passed, **{k: v for k, v in eq.as_dict().items() if k != "passed"})

    # unbiasedness on the counterexample
    problem, schedule = reference_problems()[0]
    rng = next(streams)
    mc_rows = []
    mc_ok = True
    for _ in range(3 if quick else VERIFY_MC_POINTS):
        theta, _ = problem.sample_point(rng)
        for q in VERIFY_MC_QS:
            mc = mc_unbiasedness(problem, theta, schedule, q, mc_draws, rng)
            mc_ok &= mc.passed and mc.second_moment_within_bound
            mc_rows.append({"theta": float(theta[0]), "q": q, "max_abs_z": mc.max_abs_z,
                            "second_moment_ok": mc.second_moment_within_bound})
    report.add("mc_unbiasedness", mc_ok, runs=mc_rows)
    control = mc_unbiasedness(problem, np.array([1.0]), schedule, 0.5, mc_draws, rng, first_order=True)
    report.add("fom_negative_control", not control.passed, max_abs_z=control.max_abs_z)

    # resource accounting
    ok, detail = call_accounting(2_000 if quick else 10_000, 10, 0.1, next(streams))
    report.add("call_accounting", ok, **detail)
    ok, detail = peak_memory((1, 10, 100) if quick else (1, 10, 100, 1000))
    report.add("peak_memory", ok, **detail)

    # optimal q
    cost = CostModel(1.0, 1.0, 10, 0.0)
    q_star = optimal_q(0.1, 1.0, cost)
    ok = (
        abs(q_star - 0.2736) <= 1e-3
        and qstar_polynomial(0.0, 0.1, 1.0, cost) < 0.0 < qstar_polynomial(1.0, 0.1, 1.0, cost)
        and expected_time(q_star, 0.1, 1.0, cost)
        < min(expected_time(1.0, 0.1, 1.0, cost), expected_time(0.02, 0.1, 1.0, cost))
    )
    report.add("optimal_q", ok, q_star=q_star)

    alphas = np.linspace(*SWEEP_ALPHA_RANGE, 3 if quick else SWEEP_ALPHA_POINTS)
    ok, detail = bound_dominance(alphas, 1_000 if quick else SWEEP_GRID_POINTS)
    report.add("bound_dominance", ok, **detail)
    return report
