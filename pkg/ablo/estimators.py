"""
Inner-loop gradient estimators and their resource accounting.

Four ways to turn one task's inner gradient-descent rollout into a gradient
with respect to the outer parameters theta:

- `exact_gradient_cached`: stores the trajectory and backpropagates through it.
- `exact_gradient_recompute`: same value, recomputes each inner state from
  the start point instead of storing the trajectory.
- `fom_gradient`: first-order proxy that drops every Hessian-vector term.
- `ufom_gradient`: FOM plus a Bernoulli(q) gated correction (exact - FOM)/q,
  unbiased for the exact gradient.

Call counting convention: `grad_evals` counts phi-gradients of the inner
and the outer loss (one outer call per estimate); theta-gradients of the
outer loss and V / jvp_V calls are not counted. `hvp_evals` counts paired
Hessian-vector products. `peak_states` is the largest number of inner
states held at once: the stored trajectory for the cached estimator, the
single running iterate for streaming passes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import DivergentRolloutError, InvalidConfigError, PreconditionError
from .problems.base import BilevelProblem, Task

logger = logging.getLogger("ablo.estimators")


# ------------------------------------------------------------
# Data models
# ------------------------------------------------------------

@dataclass(frozen=True)
class InnerSchedule:
    """
    Step sizes alpha_1..alpha_r of inner gradient descent.

    Attributes:
        alphas: positive step sizes, one per inner step.
    """
    alphas: Tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        for j, a in enumerate(self.alphas, start=1):
            if not (a > 0 and np.isfinite(a)):
                raise InvalidConfigError(f"inner step alpha_{j} must be positive and finite, got {a!r}")

    @classmethod
    def constant(cls, alpha: float, r: int) -> "InnerSchedule":
        if int(r) != r or r < 0:
            raise InvalidConfigError(f"r must be a nonnegative integer, got {r!r}")
        return cls(tuple([alpha] * int(r)))

    @property
    def r(self) -> int:
        return len(self.alphas)

    def prefix(self, steps: int) -> "InnerSchedule":
        """The first `steps` inner steps."""
        return InnerSchedule(self.alphas[:steps])

    def as_dict(self) -> dict:
        if len(set(self.alphas)) <= 1:
            return {"r": self.r, "alpha": self.alphas[0] if self.alphas else None}
        return {"r": self.r, "alphas": list(self.alphas)}


@dataclass
class CallCounter:
    grad_evals: int = 0
    hvp_evals: int = 0
    peak_states: int = 0

    def add_grads(self, n: int = 1) -> None:
        self.grad_evals += n

    def add_hvps(self, n: int = 1) -> None:
        self.hvp_evals += n

    def hold(self, states: int) -> None:
        if states > self.peak_states:
            self.peak_states = states

    @property
    def function_calls(self) -> int:
        return self.grad_evals + self.hvp_evals


class Branch(str, Enum):
    CACHED = "cached"
    RECOMPUTE = "recompute"
    FOM = "fom"
    UFOM_SKIP = "ufom_xi0"
    UFOM_CORRECT = "ufom_xi1"


@dataclass
class GradientEstimate:
    """
    One estimate of the hypergradient for a single task.

    Attributes:
        grad: the estimate, a vector in R^s.
        counter: oracle calls spent on it.
        branch: which path produced it.
        xi: Bernoulli outcome for UFOM estimates, else None.
        bias_sq: ||b_FO - b_Exact||^2, recorded when the exact path ran under UFOM.
        exact_sq: ||b_Exact||^2, recorded alongside bias_sq.
    """
    grad: np.ndarray
    counter: CallCounter
    branch: Branch
    xi: Optional[int] = None
    bias_sq: Optional[float] = None
    exact_sq: Optional[float] = None


class Rollout(NamedTuple):
    phi: np.ndarray
    trajectory: Optional[List[np.ndarray]]
    counter: CallCounter


# ------------------------------------------------------------
# Internal helpers
# ------------------------------------------------------------

def _check_finite(values: np.ndarray, inner_step: int, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise DivergentRolloutError(inner_step, what)


def _check_theta(problem: BilevelProblem, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if problem.elementwise and theta.ndim == 1:
        return theta
    if theta.shape != (problem.s,):
        raise PreconditionError(f"theta has shape {theta.shape}, problem expects ({problem.s},)")
    return theta


def _outer_vectors(problem: BilevelProblem, theta, phi_r, task, counter: CallCounter, r: int):
    b1 = np.asarray(problem.outer_grad_theta(theta, phi_r, task), dtype=float)
    b2 = np.asarray(problem.outer_grad_phi(theta, phi_r, task), dtype=float)
    counter.add_grads(1)
    _check_finite(b1, r, "outer theta-gradient")
    _check_finite(b2, r, "outer phi-gradient")
    return b1, b2


def _backward_step(problem, theta, phi, task, alpha, b1, b2, j: int):
    # both products use the incoming b2
    b1 = b1 - alpha * problem.hvp_theta_phi(theta, phi, task, b2)
    b2 = b2 - alpha * problem.hvp_phi_phi(theta, phi, task, b2)
    _check_finite(b2, j, "backward vector")
    _check_finite(b1, j, "backward theta-accumulator")
    return b1, b2


def _recompute_backward(problem, theta, task, schedule: InnerSchedule, b1, b2, counter: CallCounter):
    for j in range(schedule.r, 0, -1):
        phi, _, _ = inner_rollout(problem, theta, task, schedule.prefix(j - 1), counter=counter)
        b1, b2 = _backward_step(problem, theta, phi, task, schedule.alphas[j - 1], b1, b2, j)
        counter.add_hvps(1)
    return b1, b2


def _assemble(problem, theta, task, b1, b2) -> np.ndarray:
    grad = b1 + problem.jvp_V(theta, task, b2)
    _check_finite(grad, 0, "gradient estimate")
    return grad


# ------------------------------------------------------------
# Public API
# ------------------------------------------------------------

def inner_rollout(
    problem: BilevelProblem,
    theta: np.ndarray,
    task: Task,
    schedule: InnerSchedule,
    keep_trajectory: bool = False,
    counter: Optional[CallCounter] = None,
) -> Rollout:
    """
    Run inner gradient descent from V(theta, task).

    Args:
        problem: the oracle bundle.
        theta: outer parameters.
        task: the task whose inner loss is minimized.
        schedule: inner step sizes.
        keep_trajectory: store phi_0..phi_{r-1} for a later backward pass.
        counter: counter to charge; a fresh one is created when omitted.

    Returns:
        Rollout(phi_r, trajectory or None, counter).

    Raises:
        DivergentRolloutError: if a gradient or iterate becomes non-finite.
    """
    theta = _check_theta(problem, theta)
    counter = counter if counter is not None else CallCounter()
    phi = np.asarray(problem.start_point(theta, task), dtype=float)
    _check_finite(phi, 0, "start point")
    trajectory: Optional[List[np.ndarray]] = [] if keep_trajectory else None
    counter.hold(1 if trajectory is None else 0)

    for j, alpha in enumerate(schedule.alphas, start=1):
        if trajectory is not None:
            trajectory.append(phi)
            counter.hold(len(trajectory))
        g = problem.inner_grad_phi(theta, phi, task)
        counter.add_grads(1)
        _check_finite(g, j, "inner gradient")
        phi = phi - alpha * g
        _check_finite(phi, j, "inner iterate")

    return Rollout(phi, trajectory, counter)


def exact_gradient_cached(problem: BilevelProblem, theta, task: Task, schedule: InnerSchedule) -> GradientEstimate:
    """
    Exact hypergradient by reverse accumulation over a stored trajectory.
    Costs r + 1 gradients and r HVP pairs, holding r inner states.
    """
    theta = _check_theta(problem, theta)
    phi_r, trajectory, counter = inner_rollout(problem, theta, task, schedule, keep_trajectory=True)
    b1, b2 = _outer_vectors(problem, theta, phi_r, task, counter, schedule.r)
    for j in range(schedule.r, 0, -1):
        b1, b2 = _backward_step(problem, theta, trajectory[j - 1], task, schedule.alphas[j - 1], b1, b2, j)
        counter.add_hvps(1)
    return GradientEstimate(_assemble(problem, theta, task, b1, b2), counter, Branch.CACHED)


def exact_gradient_recompute(problem: BilevelProblem, theta, task: Task, schedule: InnerSchedule) -> GradientEstimate:
    """
    Exact hypergradient with constant memory: before the j-th backward step
    the state phi_{j-1} is recomputed from V(theta) using alpha_1..alpha_{j-1}.
    Costs r + 1 + r(r-1)/2 gradients and r HVP pairs.
    """
    theta = _check_theta(problem, theta)
    phi_r, _, counter = inner_rollout(problem, theta, task, schedule)
    b1, b2 = _outer_vectors(problem, theta, phi_r, task, counter, schedule.r)
    b1, b2 = _recompute_backward(problem, theta, task, schedule, b1, b2, counter)
    return GradientEstimate(_assemble(problem, theta, task, b1, b2), counter, Branch.RECOMPUTE)


def fom_gradient(problem: BilevelProblem, theta, task: Task, schedule: InnerSchedule) -> GradientEstimate:
    """dL_out/dtheta + (dV/dtheta)^T dL_out/dphi, both at phi_r."""
    theta = _check_theta(problem, theta)
    phi_r, _, counter = inner_rollout(problem, theta, task, schedule)
    b1, b2 = _outer_vectors(problem, theta, phi_r, task, counter, schedule.r)
    return GradientEstimate(_assemble(problem, theta, task, b1, b2), counter, Branch.FOM)


def validate_probability(q: float) -> float:
    if not (isinstance(q, (int, float, np.floating)) and 0.0 < q <= 1.0):
        raise InvalidConfigError(f"q must lie in (0, 1], got {q!r}")
    return float(q)


def ufom_gradient(
    problem: BilevelProblem,
    theta,
    task: Task,
    schedule: InnerSchedule,
    q: float,
    rng: Optional[np.random.Generator] = None,
    xi: Optional[int] = None,
) -> GradientEstimate:
    """
    Unbiased first-order estimate.

    The forward pass and b_FO are computed first; xi ~ Bernoulli(q) is drawn
    afterwards from `rng`. On xi = 0 b_FO is returned. On xi = 1 the exact
    gradient b_E is obtained by the recompute backward pass and
    b_FO + (b_E - b_FO)/q is returned (b_E itself when q == 1).

    Args:
        q: correction probability in (0, 1].
        rng: stream for the Bernoulli draw; required unless `xi` is given.
        xi: force the gate outcome (0 or 1) instead of drawing it.

    Raises:
        InvalidConfigError: if q is outside (0, 1].
    """
    q = validate_probability(q)
    theta = _check_theta(problem, theta)
    phi_r, _, counter = inner_rollout(problem, theta, task, schedule)
    b1, b2 = _outer_vectors(problem, theta, phi_r, task, counter, schedule.r)
    b_fo = _assemble(problem, theta, task, b1, b2)

    if xi is None:
        if rng is None:
            raise InvalidConfigError("ufom_gradient needs an rng stream when xi is not forced")
        xi = int(rng.random() < q)
    elif xi not in (0, 1):
        raise InvalidConfigError(f"xi must be 0 or 1, got {xi!r}")

    if xi == 0:
        return GradientEstimate(b_fo, counter, Branch.UFOM_SKIP, xi=0)

    e1, e2 = _recompute_backward(problem, theta, task, schedule, b1, b2, counter)
    b_exact = _assemble(problem, theta, task, e1, e2)
    grad = b_exact if q == 1.0 else b_fo + (b_exact - b_fo) / q
    diff = b_fo - b_exact
    return GradientEstimate(
        grad,
        counter,
        Branch.UFOM_CORRECT,
        xi=1,
        bias_sq=float(np.dot(np.ravel(diff), np.ravel(diff))),
        exact_sq=float(np.dot(np.ravel(b_exact), np.ravel(b_exact))),
    )


def branch_call_counts(r: int, corrected: bool) -> Tuple[int, int]:
    """Deterministic (gradient, HVP) counts of one UFOM draw."""
    if corrected:
        return r + 1 + r * (r - 1) // 2, r
    return r + 1, 0


def expected_call_counts(r: int, q: float) -> Tuple[float, float]:
    """Expected (gradient evaluations, HVP evaluations) of one UFOM estimate."""
    if int(r) != r or r < 0:
        raise InvalidConfigError(f"r must be a nonnegative integer, got {r!r}")
    q = validate_probability(q)
    return r + 1 + q * r * (r - 1) / 2.0, q * r


# ------------------------------------------------------------
# Task-expectations on finite task sets
# ------------------------------------------------------------

def _enumerate_tasks(problem: BilevelProblem):
    dist = problem.task_distribution()
    if dist is None:
        raise PreconditionError(f"{problem.name} has no finite task enumeration")
    return dist


def fom_and_exact(problem: BilevelProblem, theta, task: Task, schedule: InnerSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """b_FO and b_Exact for one task from a single cached forward pass."""
    theta = _check_theta(problem, theta)
    phi_r, trajectory, counter = inner_rollout(problem, theta, task, schedule, keep_trajectory=True)
    b1, b2 = _outer_vectors(problem, theta, phi_r, task, counter, schedule.r)
    b_fo = _assemble(problem, theta, task, b1, b2)
    for j in range(schedule.r, 0, -1):
        b1, b2 = _backward_step(problem, theta, trajectory[j - 1], task, schedule.alphas[j - 1], b1, b2, j)
    return b_fo, _assemble(problem, theta, task, b1, b2)


def meta_gradient(problem: BilevelProblem, theta, schedule: InnerSchedule) -> np.ndarray:
    """dM/dtheta by probability-weighted enumeration of the task set."""
    total = None
    for task, prob in _enumerate_tasks(problem):
        g = prob * exact_gradient_cached(problem, theta, task, schedule).grad
        total = g if total is None else total + g
    return total


def meta_objective(problem: BilevelProblem, theta, schedule: InnerSchedule):
    """M(theta) = E_task L_out(theta, phi_r) by enumeration."""
    total = 0.0
    for task, prob in _enumerate_tasks(problem):
        phi_r, _, _ = inner_rollout(problem, theta, task, schedule)
        total = total + prob * problem.outer_loss(np.asarray(theta, dtype=float), phi_r, task)
    return total
