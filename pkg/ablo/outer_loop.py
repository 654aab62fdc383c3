"""
Outer SGD over theta, step-size schedules and the Adaptive-UFOM controller.

`run_sgd` is the reference driver: one replica, one task per step, any
estimator, full per-iteration diagnostics. `run_replicas` fans seeded
replicas out to worker processes. `run_sgd_batch` advances many replicas of
an elementwise problem together as one vectorized recurrence; the large
q sweeps use it.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import DEFAULT_BETA, DEFAULT_BIAS_SCALE, DEFAULT_C1, DEFAULT_C2, DEFAULT_EPSILON, DEFAULT_Q_MIN
from .errors import DivergentRolloutError, InvalidConfigError, OuterDivergenceError, PreconditionError
from .estimators import (
    GradientEstimate,
    InnerSchedule,
    branch_call_counts,
    exact_gradient_cached,
    exact_gradient_recompute,
    fom_and_exact,
    fom_gradient,
    meta_gradient,
    meta_objective,
    ufom_gradient,
    validate_probability,
)
from .problems.base import BilevelProblem
from .theory import CostModel, optimal_q
from .utils.rng import RunSeed, describe_seed, sgd_streams

logger = logging.getLogger("ablo.outer_loop")


# ------------------------------------------------------------
# Step sizes
# ------------------------------------------------------------

SCHEDULE_KINDS = ("harmonic", "inverse_sqrt", "constant")


@dataclass(frozen=True)
class OuterSchedule:
    """
    Outer step sizes gamma_k and the iteration budget.

    Attributes:
        kind: "harmonic" (c/k), "inverse_sqrt" (c k^-0.5) or "constant" (c).
        c: positive scale.
        tau: number of outer iterations.
    """
    kind: str
    c: float = 1.0
    tau: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise InvalidConfigError(f"unknown schedule kind '{self.kind}'; expected one of {SCHEDULE_KINDS}")
        if not (self.c > 0 and math.isfinite(self.c)):
            raise InvalidConfigError(f"schedule scale c must be positive, got {self.c!r}")
        if int(self.tau) != self.tau or self.tau < 0:
            raise InvalidConfigError(f"tau must be a nonnegative integer, got {self.tau!r}")

    @classmethod
    def harmonic(cls, c: float, tau: int) -> "OuterSchedule":
        return cls("harmonic", c, tau)

    @classmethod
    def inverse_sqrt(cls, tau: int, c: float = 1.0) -> "OuterSchedule":
        return cls("inverse_sqrt", c, tau)

    @classmethod
    def constant(cls, c: float, tau: int) -> "OuterSchedule":
        return cls("constant", c, tau)

    @property
    def satisfies_step_conditions(self) -> bool:
        """Whether sum gamma_k diverges while gamma_k -> 0."""
        return self.kind != "constant"

    def gamma(self, k: int) -> float:
        if k < 1:
            raise ValueError("step sizes are indexed from k = 1")
        if self.kind == "harmonic":
            return self.c / k
        if self.kind == "inverse_sqrt":
            return self.c / math.sqrt(k)
        return self.c

    def gammas(self, n: Optional[int] = None) -> np.ndarray:
        n = self.tau if n is None else n
        return np.array([self.gamma(k) for k in range(1, n + 1)])

    def with_tau(self, tau: int) -> "OuterSchedule":
        return replace(self, tau=tau)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "c": self.c, "tau": int(self.tau)}


# ------------------------------------------------------------
# Adaptive UFOM
# ------------------------------------------------------------

@dataclass(frozen=True)
class AdaptiveState:
    """
    Exponentially smoothed bias and variance statistics.

    Attributes:
        D2_sm: smoothed ||b_FO - b_Exact||^2.
        V2_sm: smoothed ||b_Exact||^2.
        k_upd: number of updates so far (one per corrected draw).
        beta: smoothing constant in (0, 1).
        q_min: floor on the chosen probability.
        bias_scale: multiplier on the debiased bias estimate.
    """
    D2_sm: float = 0.0
    V2_sm: float = 0.0
    k_upd: int = 0
    beta: float = DEFAULT_BETA
    q_min: float = DEFAULT_Q_MIN
    bias_scale: float = DEFAULT_BIAS_SCALE

    def __post_init__(self) -> None:
        if not (0.0 < self.beta < 1.0):
            raise InvalidConfigError(f"beta must lie in (0, 1), got {self.beta!r}")
        if not (0.0 < self.q_min <= 1.0):
            raise InvalidConfigError(f"q_min must lie in (0, 1], got {self.q_min!r}")
        if not self.bias_scale > 0:
            raise InvalidConfigError(f"bias_scale must be positive, got {self.bias_scale!r}")

    def debiased(self) -> Optional[Tuple[float, float]]:
        """(D2_bar, V2_bar), or None before the first update."""
        if self.k_upd == 0:
            return None
        correction = 1.0 - self.beta ** self.k_upd
        return self.bias_scale * self.D2_sm / correction, self.V2_sm / correction


def adaptive_update(state: AdaptiveState, bias_sq: float, exact_sq: float) -> AdaptiveState:
    """Fold one corrected draw into the smoothed statistics."""
    b = state.beta
    return replace(
        state,
        D2_sm=b * state.D2_sm + (1.0 - b) * bias_sq,
        V2_sm=b * state.V2_sm + (1.0 - b) * exact_sq,
        k_upd=state.k_upd + 1,
    )


def choose_q(state: AdaptiveState, cost_model: CostModel, epsilon: Optional[float] = None) -> float:
    """
    max(q*, q_min) from the current debiased statistics; 1 before any
    update. `epsilon`, when given, overrides the cost model's.
    """
    if epsilon is not None:
        cost_model = cost_model.with_epsilon(epsilon)
    stats = state.debiased()
    if stats is None:
        return 1.0
    D2, V2 = stats
    q_star = optimal_q(D2, V2, cost_model)
    return float(min(1.0, max(q_star, state.q_min)))


# ------------------------------------------------------------
# Estimator choice
# ------------------------------------------------------------

ESTIMATOR_KINDS = ("exact_cached", "exact_recompute", "fom", "ufom", "adaptive_ufom")


@dataclass(frozen=True)
class EstimatorSpec:
    """
    Which estimator the outer loop calls, with its knobs.

    `q` is used by "ufom"; beta, q_min, bias_scale and the cost constants
    by "adaptive_ufom".
    """
    kind: str
    q: Optional[float] = None
    beta: float = DEFAULT_BETA
    q_min: float = DEFAULT_Q_MIN
    bias_scale: float = DEFAULT_BIAS_SCALE
    C1: float = DEFAULT_C1
    C2: float = DEFAULT_C2
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.kind not in ESTIMATOR_KINDS:
            raise InvalidConfigError(f"unknown estimator '{self.kind}'; expected one of {ESTIMATOR_KINDS}")
        if self.kind == "ufom":
            if self.q is None:
                raise InvalidConfigError("estimator 'ufom' needs q")
            validate_probability(self.q)
        if self.kind == "adaptive_ufom":
            self.initial_state()
            CostModel(self.C1, self.C2, 0, self.epsilon)

    @classmethod
    def exact_cached(cls) -> "EstimatorSpec":
        return cls("exact_cached")

    @classmethod
    def exact_recompute(cls) -> "EstimatorSpec":
        return cls("exact_recompute")

    @classmethod
    def fom(cls) -> "EstimatorSpec":
        return cls("fom")

    @classmethod
    def ufom(cls, q: float) -> "EstimatorSpec":
        return cls("ufom", q=q)

    @classmethod
    def adaptive_ufom(cls, **kwargs: Any) -> "EstimatorSpec":
        return cls("adaptive_ufom", **kwargs)

    @property
    def label(self) -> str:
        if self.kind == "ufom":
            return f"ufom_q{self.q:g}"
        return self.kind

    def initial_state(self) -> AdaptiveState:
        return AdaptiveState(beta=self.beta, q_min=self.q_min, bias_scale=self.bias_scale)

    def cost_model(self, r: int) -> CostModel:
        return CostModel(self.C1, self.C2, r, self.epsilon)

    def as_dict(self) -> dict:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "ufom":
            out["q"] = self.q
        if self.kind == "adaptive_ufom":
            out.update(beta=self.beta, q_min=self.q_min, bias_scale=self.bias_scale,
                       C1=self.C1, C2=self.C2, epsilon=self.epsilon)
        return out


# ------------------------------------------------------------
# Run records
# ------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostics:
    """
    What `run_sgd` records besides the iterate.

    Attributes:
        exact_gradient: ||dM/dtheta||^2 by task enumeration (finite task sets only).
        objective: M(theta) by task enumeration.
        snapshot_stride: keep theta every this many iterations.
        full_theta_max: keep full theta only up to this dimension; norms otherwise.
    """
    exact_gradient: bool = True
    objective: bool = False
    snapshot_stride: int = 1
    full_theta_max: int = 16

    def __post_init__(self) -> None:
        if self.snapshot_stride < 1:
            raise InvalidConfigError("snapshot_stride must be at least 1")


@dataclass
class RunRow:
    k: int
    theta: Optional[np.ndarray]
    theta_norm: float
    grad_norm_sq: Optional[float]
    min_grad_norm_sq: Optional[float]
    q: Optional[float]
    xi: Optional[int]
    grad_calls: int
    hvp_calls: int
    d2_bar: Optional[float]
    v2_bar: Optional[float]
    objective: Optional[float]

    @property
    def function_calls(self) -> int:
        return self.grad_calls + self.hvp_calls


RUN_COLUMNS = (
    "seed", "k", "theta", "theta_norm", "grad_norm_sq", "grad_abs", "min_grad_norm_sq", "q", "xi",
    "grad_calls", "hvp_calls", "function_calls", "d2_bar", "v2_bar", "objective",
)


@dataclass
class RunRecord:
    """
    Per-iteration trace of one outer SGD run.

    `adaptive_log` keeps the raw (k, bias_sq, exact_sq) inputs of every
    Adaptive-UFOM update so the smoothed statistics can be recomputed.
    """
    estimator: str
    seed: str
    rows: List[RunRow] = field(default_factory=list)
    adaptive_log: List[Tuple[int, float, float]] = field(default_factory=list)
    final_state: Optional[AdaptiveState] = None
    final_theta: Optional[np.ndarray] = None

    def column(self, name: str) -> np.ndarray:
        values = [getattr(row, name) for row in self.rows]
        return np.array([np.nan if v is None else v for v in values], dtype=float)

    @property
    def function_calls(self) -> np.ndarray:
        return self.column("grad_calls") + self.column("hvp_calls")

    def csv_rows(self, skip_initial: bool = False) -> List[list]:
        out = []
        for row in self.rows:
            if skip_initial and row.k == 0:
                continue
            theta_cell = None
            if row.theta is not None:
                theta_cell = repr(float(row.theta[0])) if row.theta.size == 1 else " ".join(
                    repr(float(v)) for v in row.theta
                )
            grad_abs = None if row.grad_norm_sq is None else math.sqrt(row.grad_norm_sq)
            out.append([
                self.seed, row.k, theta_cell, row.theta_norm, row.grad_norm_sq, grad_abs,
                row.min_grad_norm_sq, row.q, row.xi, row.grad_calls, row.hvp_calls,
                row.function_calls, row.d2_bar, row.v2_bar, row.objective,
            ])
        return out


# ------------------------------------------------------------
# Internal helpers
# ------------------------------------------------------------

def _validate_theta0(problem: BilevelProblem, theta0) -> np.ndarray:
    theta = np.array(theta0, dtype=float).reshape(-1)
    if theta.shape != (problem.s,):
        raise InvalidConfigError(f"theta0 has {theta.size} entries, problem expects {problem.s}")
    if not np.all(np.isfinite(theta)):
        raise InvalidConfigError("theta0 must be finite")
    return theta


def _estimate(problem, estimator: EstimatorSpec, theta, task, inner, q, xi_rng) -> GradientEstimate:
    if estimator.kind == "exact_cached":
        return exact_gradient_cached(problem, theta, task, inner)
    if estimator.kind == "exact_recompute":
        return exact_gradient_recompute(problem, theta, task, inner)
    if estimator.kind == "fom":
        return fom_gradient(problem, theta, task, inner)
    return ufom_gradient(problem, theta, task, inner, q, xi_rng)


def nominal_q(estimator: EstimatorSpec) -> Optional[float]:
    """q recorded in run traces: 1 for exact, None for FOM and adaptive."""
    if estimator.kind == "ufom":
        return estimator.q
    if estimator.kind.startswith("exact"):
        return 1.0
    return None


# ------------------------------------------------------------
# Public API
# ------------------------------------------------------------

def run_sgd(
    problem: BilevelProblem,
    estimator: EstimatorSpec,
    inner: InnerSchedule,
    outer: OuterSchedule,
    theta0,
    seed: RunSeed,
    diagnostics: Optional[Diagnostics] = None,
    clip: Optional[float] = None,
    budget: Optional[int] = None,
) -> RunRecord:
    """
    Outer SGD: theta_k = theta_{k-1} - gamma_k G(theta_{k-1}, task_k).

    Args:
        problem: the oracle bundle.
        estimator: which gradient estimator to call each step.
        inner: inner-GD schedule.
        outer: step sizes and iteration budget tau.
        theta0: starting point, s entries.
        seed: run seed, or a (task_seed, xi_seed) pair.
        diagnostics: what to record; defaults to `Diagnostics()`.
        clip: clip every gradient entry to [-clip, clip] when set.
        budget: stop before the step that would start past this many
            gradient + HVP calls.

    Returns:
        RunRecord whose row 0 describes theta0.

    Raises:
        DivergentRolloutError: from an estimator, tagged with the outer iteration.
        OuterDivergenceError: if theta becomes non-finite.
    """
    diagnostics = diagnostics or Diagnostics()
    theta = _validate_theta0(problem, theta0)
    if clip is not None and not clip > 0:
        raise InvalidConfigError(f"clip must be positive, got {clip!r}")
    if budget is not None and budget < 1:
        raise InvalidConfigError(f"budget must be positive, got {budget!r}")
    if not outer.satisfies_step_conditions:
        logger.warning("constant outer step size %g does not decay; convergence is not guaranteed", outer.c)

    task_rng, xi_rng = sgd_streams(seed)
    finite_tasks = problem.task_distribution() is not None
    track_grad = diagnostics.exact_gradient and finite_tasks
    track_objective = diagnostics.objective and finite_tasks
    if (diagnostics.exact_gradient or diagnostics.objective) and not finite_tasks:
        logger.warning("%s has no finite task set; exact diagnostics disabled", problem.name)

    adaptive = estimator.kind == "adaptive_ufom"
    state = estimator.initial_state() if adaptive else None
    cost = estimator.cost_model(inner.r) if adaptive else None
    record = RunRecord(estimator=estimator.label, seed=describe_seed(seed))

    grad_calls = 0
    hvp_calls = 0
    min_sq = math.inf

    def snapshot(k: int, q: Optional[float], xi: Optional[int]) -> None:
        nonlocal min_sq
        grad_sq = None
        if track_grad:
            g = meta_gradient(problem, theta, inner)
            grad_sq = float(np.dot(g, g))
            min_sq = min(min_sq, grad_sq)
        objective = float(meta_objective(problem, theta, inner)) if track_objective else None
        keep = k % diagnostics.snapshot_stride == 0 and problem.s <= diagnostics.full_theta_max
        stats = state.debiased() if state is not None else None
        record.rows.append(RunRow(
            k=k,
            theta=theta.copy() if keep else None,
            theta_norm=float(np.linalg.norm(theta)),
            grad_norm_sq=grad_sq,
            min_grad_norm_sq=min_sq if track_grad else None,
            q=q,
            xi=xi,
            grad_calls=grad_calls,
            hvp_calls=hvp_calls,
            d2_bar=stats[0] if stats else None,
            v2_bar=stats[1] if stats else None,
            objective=objective,
        ))

    logger.info("run_sgd %s on %s: tau=%d seed=%s", estimator.label, problem.name, outer.tau, record.seed)
    snapshot(0, None, None)

    for k in range(1, outer.tau + 1):
        if budget is not None and grad_calls + hvp_calls >= budget:
            logger.info("budget of %d calls reached after %d iterations", budget, k - 1)
            break
        task = problem.sample_task(task_rng)
        q = choose_q(state, cost) if adaptive else estimator.q
        try:
            est = _estimate(problem, estimator, theta, task, inner, q, xi_rng)
        except DivergentRolloutError as exc:
            raise exc.at_outer_iteration(k)

        if adaptive and est.xi == 1:
            state = adaptive_update(state, est.bias_sq, est.exact_sq)
            record.adaptive_log.append((k, est.bias_sq, est.exact_sq))

        step = est.grad if clip is None else np.clip(est.grad, -clip, clip)
        theta = theta - outer.gamma(k) * step
        if not np.all(np.isfinite(theta)):
            raise OuterDivergenceError(k)
        grad_calls += est.counter.grad_evals
        hvp_calls += est.counter.hvp_evals

        try:
            snapshot(k, q if adaptive else nominal_q(estimator), est.xi)
        except DivergentRolloutError as exc:
            raise exc.at_outer_iteration(k)
        if k % 1000 == 0:
            logger.debug("k=%d calls=%d", k, grad_calls + hvp_calls)

    record.final_state = state
    record.final_theta = theta.copy()
    return record


def _run_job(job: tuple) -> RunRecord:
    problem, estimator, inner, outer, theta0, seed, diagnostics, clip, budget = job
    return run_sgd(problem, estimator, inner, outer, theta0, seed, diagnostics, clip, budget)


def run_replicas(
    problem: BilevelProblem,
    estimator: EstimatorSpec,
    inner: InnerSchedule,
    outer: OuterSchedule,
    theta0s: Sequence,
    seeds: Sequence[RunSeed],
    diagnostics: Optional[Diagnostics] = None,
    workers: int = 1,
    clip: Optional[float] = None,
    budget: Optional[int] = None,
) -> List[RunRecord]:
    """Independent `run_sgd` replicas, returned in replica order."""
    if len(theta0s) != len(seeds):
        raise InvalidConfigError("need one starting point per replica seed")
    jobs = [
        (problem, estimator, inner, outer, theta0, seed, diagnostics, clip, budget)
        for theta0, seed in zip(theta0s, seeds)
    ]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job) for job in jobs]
    logger.info("running %d replicas on %d worker processes", len(jobs), workers)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


# ------------------------------------------------------------
# Vectorized replica batches
# ------------------------------------------------------------

@dataclass
class BatchRecord:
    """
    Traces of R replicas advanced together; arrays have shape (tau + 1, R).

    `grad_abs` is |dM/dtheta| at each iterate; call counts are cumulative.
    """
    estimator: str
    theta: np.ndarray
    grad_abs: np.ndarray
    grad_calls: np.ndarray
    hvp_calls: np.ndarray

    @property
    def replicas(self) -> int:
        return self.theta.shape[1]

    @property
    def function_calls(self) -> np.ndarray:
        return self.grad_calls + self.hvp_calls

    def mean_curve(self) -> np.ndarray:
        return self.grad_abs.mean(axis=1)

    def se_curve(self) -> np.ndarray:
        if self.replicas < 2:
            return np.zeros(self.grad_abs.shape[0])
        return self.grad_abs.std(axis=1, ddof=1) / math.sqrt(self.replicas)

    def mean_calls(self) -> np.ndarray:
        return self.function_calls.mean(axis=1)


def run_sgd_batch(
    problem: BilevelProblem,
    estimator: EstimatorSpec,
    inner: InnerSchedule,
    outer: OuterSchedule,
    theta0: np.ndarray,
    seed: RunSeed,
) -> BatchRecord:
    """
    Advance len(theta0) independent replicas of an elementwise problem.

    Each replica draws its own task and gate outcome every step and is
    charged the deterministic call counts of the branch it took.

    Raises:
        PreconditionError: for non-elementwise problems, infinite task sets,
            or the adaptive estimator (its state is per replica and sequential).
    """
    if not problem.elementwise:
        raise PreconditionError(f"{problem.name} does not support replica batches")
    dist = problem.task_distribution()
    if dist is None:
        raise PreconditionError(f"{problem.name} has no finite task enumeration")
    if estimator.kind == "adaptive_ufom":
        raise PreconditionError("adaptive_ufom runs replicas through run_sgd")
    if not outer.satisfies_step_conditions:
        logger.warning("constant outer step size %g does not decay; convergence is not guaranteed", outer.c)

    theta = np.array(theta0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(theta)):
        raise InvalidConfigError("theta0 must be finite")
    R = theta.size
    tasks = [task for task, _ in dist]
    probs = np.array([p for _, p in dist], dtype=float)
    r = inner.r
    need_exact = estimator.kind != "fom"

    task_rng, xi_rng = sgd_streams(seed)
    shape = (outer.tau + 1, R)
    thetas = np.empty(shape)
    grad_abs = np.empty(shape)
    grad_calls = np.zeros(shape, dtype=np.int64)
    hvp_calls = np.zeros(shape, dtype=np.int64)

    thetas[0] = theta
    grad_abs[0] = np.abs(meta_gradient(problem, theta, inner))
    fo = np.empty(R)
    ex = np.empty(R)

    for k in range(1, outer.tau + 1):
        idx = task_rng.choice(len(tasks), size=R, p=probs)
        try:
            for t, task in enumerate(tasks):
                mask = idx == t
                if not mask.any():
                    continue
                if need_exact:
                    fo[mask], ex[mask] = fom_and_exact(problem, theta[mask], task, inner)
                else:
                    fo[mask] = fom_gradient(problem, theta[mask], task, inner).grad
        except DivergentRolloutError as exc:
            raise exc.at_outer_iteration(k)

        if estimator.kind == "fom":
            step = fo
            grads, hvps = branch_call_counts(r, corrected=False)
        elif estimator.kind == "exact_cached":
            step = ex
            grads, hvps = r + 1, r
        elif estimator.kind == "exact_recompute":
            step = ex
            grads, hvps = branch_call_counts(r, corrected=True)
        else:
            q = estimator.q
            xi = xi_rng.random(R) < q
            corrected = ex if q == 1.0 else fo + (ex - fo) / q
            step = np.where(xi, corrected, fo)
            g1, h1 = branch_call_counts(r, corrected=True)
            g0, h0 = branch_call_counts(r, corrected=False)
            grads = np.where(xi, g1, g0)
            hvps = np.where(xi, h1, h0)

        theta = theta - outer.gamma(k) * step
        if not np.all(np.isfinite(theta)):
            raise OuterDivergenceError(k)
        thetas[k] = theta
        grad_calls[k] = grad_calls[k - 1] + grads
        hvp_calls[k] = hvp_calls[k - 1] + hvps
        try:
            grad_abs[k] = np.abs(meta_gradient(problem, theta, inner))
        except DivergentRolloutError as exc:
            raise exc.at_outer_iteration(k)

    return BatchRecord(estimator.label, thetas, grad_abs, grad_calls, hvp_calls)
