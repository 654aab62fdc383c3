"""
Closed-form bounds and the optimal-q machinery.

- `d_bound`, `v_bound`: bounds on the FOM bias and the exact-gradient norm.
- `lipschitz_c`: smoothness constant of the meta-objective, with the
  intermediate per-step constants exposed.
- `CostModel`, `ufom_beats_exact`, `optimal_q`, `expected_time`: the
  wall-clock trade-off between cheap biased FOM steps and expensive exact
  corrections.
- `convergence_rhs`, `iterations_to_precision`: the convergence bound and
  an iteration-count estimate reported up to an unknown problem constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .constants import DEFAULT_C1, DEFAULT_C2, DEFAULT_EPSILON, QSTAR_POLISH_TOL
from .errors import IndeterminateConditionError, InvalidConfigError
from .estimators import InnerSchedule, validate_probability
from .problems.base import RegularityConstants

logger = logging.getLogger("ablo.theory")


# ------------------------------------------------------------
# Data models
# ------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """
    Wall-clock cost of one estimator call.

    Attributes:
        C1: time per phi-gradient evaluation.
        C2: time per HVP pair.
        r: inner-GD length.
        epsilon: slack of the convergence rate, 0 <= epsilon < 0.5.
    """
    C1: float = DEFAULT_C1
    C2: float = DEFAULT_C2
    r: int = 0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if not (self.C1 > 0 and self.C2 > 0):
            raise InvalidConfigError(f"C1 and C2 must be positive, got C1={self.C1!r}, C2={self.C2!r}")
        if int(self.r) != self.r or self.r < 0:
            raise InvalidConfigError(f"r must be a nonnegative integer, got {self.r!r}")
        if not (0.0 <= self.epsilon < 0.5):
            raise InvalidConfigError(f"epsilon must lie in [0, 0.5), got {self.epsilon!r}")

    @property
    def C_det(self) -> float:
        """Cost of the deterministic FOM part: C1 (r + 1)."""
        return self.C1 * (self.r + 1)

    @property
    def C_rnd(self) -> float:
        """Cost of the correction: (C1 (r - 1)/2 + C2) r."""
        return (self.C1 * (self.r - 1) / 2.0 + self.C2) * self.r

    def with_epsilon(self, epsilon: float) -> "CostModel":
        return CostModel(self.C1, self.C2, self.r, epsilon)


@dataclass(frozen=True)
class BiasVarianceStats:
    """D2: expected squared FOM bias; V2: expected squared exact gradient norm."""
    D2: float
    V2: float

    def __post_init__(self) -> None:
        if not (self.D2 >= 0 and self.V2 >= 0):
            raise InvalidConfigError(f"D2 and V2 must be nonnegative, got D2={self.D2!r}, V2={self.V2!r}")


@dataclass(frozen=True)
class LipschitzBound:
    """
    Smoothness constant C together with the per-step constants it is built from.

    A[j] bounds the Lipschitz constant of phi_j as a function of theta,
    B[j] that of the j-th backward vector; both are indexed j = 0..r.
    """
    A: np.ndarray
    B: np.ndarray
    C: float

    def __float__(self) -> float:
        return self.C


# ------------------------------------------------------------
# Internal helpers
# ------------------------------------------------------------

def _growth_prefix(schedule: InnerSchedule, L2: float) -> np.ndarray:
    # prefix[k] = prod_{i=1..k} (1 + alpha_i L2), prefix[0] = 1
    factors = 1.0 + np.asarray(schedule.alphas, dtype=float) * L2
    return np.concatenate([[1.0], np.cumprod(factors)])


def _span(prefix: np.ndarray, start: int, stop: int) -> float:
    """prod_{i=start..stop} (1 + alpha_i L2); empty products are 1."""
    if start > stop:
        return 1.0
    return float(prefix[stop] / prefix[start - 1])


def _bias_sum(constants: RegularityConstants, schedule: InnerSchedule) -> float:
    prefix = _growth_prefix(schedule, constants.L2)
    r = schedule.r
    return sum(schedule.alphas[j - 1] * _span(prefix, j, r) for j in range(1, r + 1))


# ------------------------------------------------------------
# Bounds
# ------------------------------------------------------------

def d_bound(constants: RegularityConstants, schedule: InnerSchedule) -> float:
    """(1 + M1) L1 L2 sum_j alpha_j prod_{j'=j..r} (1 + alpha_j' L2)."""
    return (1.0 + constants.M1) * constants.L1 * constants.L2 * _bias_sum(constants, schedule)


def v_bound(constants: RegularityConstants, schedule: InnerSchedule) -> float:
    """L1 + M1 L1 prod_j (1 + alpha_j L2) + L1 L2 sum_j alpha_j prod_{j'=j..r} (1 + alpha_j' L2)."""
    prefix = _growth_prefix(schedule, constants.L2)
    c = constants
    return c.L1 + c.M1 * c.L1 * float(prefix[-1]) + c.L1 * c.L2 * _bias_sum(constants, schedule)


def lipschitz_c(constants: RegularityConstants, schedule: InnerSchedule) -> LipschitzBound:
    """
    Lipschitz constant of dM/dtheta.

    The step size alpha_0, which appears in B[0], is taken to be 0.
    """
    M1, M2, L1, L2, L3 = constants.M1, constants.M2, constants.L1, constants.L2, constants.L3
    r = schedule.r
    alpha = np.concatenate([[0.0], np.asarray(schedule.alphas, dtype=float)])
    prefix = _growth_prefix(schedule, L2)

    A = np.empty(r + 1)
    for j in range(r + 1):
        tail = sum(alpha[jp] * _span(prefix, jp + 1, j) for jp in range(1, j + 1))
        A[j] = M1 * float(prefix[j]) + L2 * tail

    B = np.empty(r + 1)
    for j in range(r + 1):
        inner = sum(alpha[jp] * (1.0 + A[jp - 1]) for jp in range(j + 1, r + 1))
        B[j] = (L2 * (1.0 + A[r]) * (1.0 + alpha[j] * L2) + L1 * L3 * inner) * _span(prefix, j + 1, r)

    steps = sum(
        alpha[j] * (L2 * B[j] + L3 * (1.0 + A[j - 1]) * L1 * _span(prefix, j + 1, r))
        for j in range(1, r + 1)
    )
    C = L2 + L2 * A[r] + steps + M1 * B[0] + M2 * L1 * float(prefix[-1])
    return LipschitzBound(A=A, B=B, C=float(C))


# ------------------------------------------------------------
# Optimal probability
# ------------------------------------------------------------

def ufom_beats_exact(D2: float, V2: float, cost_model: CostModel) -> bool:
    """
    Whether some q < 1 gives a tighter time-to-precision bound than q = 1:
    D2 < C_rnd / ((2 / (1 - 2 eps)) (C_det + C_rnd)) * V2.

    Raises:
        IndeterminateConditionError: if V2 == 0.
    """
    if V2 == 0:
        raise IndeterminateConditionError("condition is indeterminate when V2 == 0")
    if D2 < 0 or V2 < 0:
        raise InvalidConfigError(f"D2 and V2 must be nonnegative, got D2={D2!r}, V2={V2!r}")
    eps = cost_model.epsilon
    threshold = cost_model.C_rnd / ((2.0 / (1.0 - 2.0 * eps)) * (cost_model.C_det + cost_model.C_rnd))
    return D2 < threshold * V2


def qstar_coefficients(D2: float, V2: float, cost_model: CostModel):
    """(a2, a1, a0) of the stationarity polynomial a2 q^2 + a1 q + a0."""
    eps = cost_model.epsilon
    a2 = cost_model.C_rnd * (V2 - D2)
    a1 = (2.0 * eps + 1.0) / (2.0 * eps - 1.0) * D2 * cost_model.C_rnd
    a0 = 2.0 / (2.0 * eps - 1.0) * D2 * cost_model.C_det
    return a2, a1, a0


def qstar_polynomial(q: float, D2: float, V2: float, cost_model: CostModel) -> float:
    a2, a1, a0 = qstar_coefficients(D2, V2, cost_model)
    return (a2 * q + a1) * q + a0


def optimal_q(D2: float, V2: float, cost_model: CostModel) -> float:
    """
    Probability minimizing `expected_time` on (0, 1].

    Returns the unique root of the stationarity polynomial in (0, 1) when
    `ufom_beats_exact` holds, 1 otherwise, and 0 when D2 == 0 (callers floor
    it with their q_min).
    """
    if D2 < 0 or V2 < 0:
        raise InvalidConfigError(f"D2 and V2 must be nonnegative, got D2={D2!r}, V2={V2!r}")
    if D2 == 0:
        return 0.0
    if V2 == 0 or not ufom_beats_exact(D2, V2, cost_model):
        return 1.0

    a2, a1, a0 = qstar_coefficients(D2, V2, cost_model)
    # a2 > 0, a1 <= 0 and a0 < 0 here, so the + root has no cancellation
    q = (-a1 + math.sqrt(a1 * a1 - 4.0 * a2 * a0)) / (2.0 * a2)
    if abs(qstar_polynomial(q, D2, V2, cost_model)) > QSTAR_POLISH_TOL:
        q = brentq(qstar_polynomial, 0.0, 1.0, args=(D2, V2, cost_model), xtol=1e-15, rtol=4 * np.finfo(float).eps)
    logger.debug("optimal q=%r for D2=%r V2=%r", q, D2, V2)
    return float(min(max(q, 0.0), 1.0))


def expected_time(q: float, D2: float, V2: float, cost_model: CostModel) -> float:
    """((1/q - 1) D2 + V2)^(2/(1 - 2 eps)) (C_det + C_rnd q)."""
    q = validate_probability(q)
    power = 2.0 / (1.0 - 2.0 * cost_model.epsilon)
    return ((1.0 / q - 1.0) * D2 + V2) ** power * (cost_model.C_det + cost_model.C_rnd * q)


# ------------------------------------------------------------
# Convergence
# ------------------------------------------------------------

def convergence_rhs(
    M0_minus_Mstar: float,
    C: float,
    q: float,
    D2: float,
    V2: float,
    gammas: Sequence[float],
) -> float:
    """Bound on sum_u gamma_u E||dM/dtheta(theta_{u-1})||^2 after len(gammas) steps."""
    if M0_minus_Mstar < 0 or C < 0 or D2 < 0 or V2 < 0:
        raise InvalidConfigError("convergence_rhs inputs must be nonnegative")
    q = validate_probability(q)
    g = np.asarray(gammas, dtype=float)
    if np.any(g < 0):
        raise InvalidConfigError("step sizes must be nonnegative")
    return M0_minus_Mstar + C * ((1.0 / q - 1.0) * D2 + V2) * float(np.sum(g * g))


def iterations_to_precision(delta: float, q: float, D2: float, V2: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """
    Iterations until min_u E||dM/dtheta||^2 <= delta under gamma_k = k^-0.5,
    up to an unknown problem-dependent constant factor.
    """
    if not delta > 0:
        raise InvalidConfigError(f"delta must be positive, got {delta!r}")
    if not (0.0 <= epsilon < 0.5):
        raise InvalidConfigError(f"epsilon must lie in [0, 0.5), got {epsilon!r}")
    q = validate_probability(q)
    scale = (1.0 / q - 1.0) * D2 + V2
    if scale == 0:
        return 0.0
    return (delta / scale) ** (1.0 / (epsilon - 0.5))
