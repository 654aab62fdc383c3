"""
Two-task piecewise-polynomial family on which FOM fails to converge.

Task i has the convex loss f_i(x), a function of z = |x - b_i/a_i| only:

    z <= A           1/2 a z^2                                   (quadratic core)
    A < z <= A + 1   -a/6 (z-A)^3 + 1/2 a (z-A)^2 + aAz - 1/2 aA^2 (cubic blend)
    z > A + 1        (1/2 a + aA) z - a/6 - 1/2 aA^2 - 1/2 aA     (linear tail)

The pieces join with matching value, slope and curvature, so f_i is C^2.
V(theta) = theta and L_in = L_out = f_i(phi^(1)); both tasks are equally
likely. Inside the shared interval I = [max b_i/a_i - A, min b_i/a_i + A]
every inner step stays in the quadratic core and all gradients have closed
forms.

b2 is chosen so that the FOM fixed point x* has squared true gradient 2D.
The contraction factor inside the b2 formula is (1 - alpha a2)^r; this is
the reading that reproduces the reference values b2 = 17.39, A = 12.59 and
the 2D identity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .base import BilevelProblem, RegularityConstants, Task, TaskDistribution, scalar_or_batch
from ..errors import ClosedFormDomainError, DegenerateFamilyError, InvalidConfigError, PreconditionError

logger = logging.getLogger("ablo.problems.counterexample")

ArrayLike = Union[float, np.ndarray]

PIECES = ("quadratic", "blend", "linear")


# ------------------------------------------------------------
# Data models
# ------------------------------------------------------------

@dataclass(frozen=True)
class CounterexampleSpec:
    """
    Parameters of the two-task family.

    Attributes:
        a1, a2: curvatures of the quadratic cores, 0 < a_i < 1/alpha, a1 != a2.
        b2: offset of task 2 (b1 is fixed at 0).
        A: half-width of the quadratic core, A > |b1/a1 - b2/a2|.
        alpha: constant inner-GD step size.
        r: number of inner-GD steps.
        b1: offset of task 1.
    """
    a1: float
    a2: float
    b2: float
    A: float
    alpha: float
    r: int
    b1: float = 0.0

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InvalidConfigError(f"alpha must be positive, got {self.alpha!r}")
        if int(self.r) != self.r or self.r < 0:
            raise InvalidConfigError(f"r must be a nonnegative integer, got {self.r!r}")
        for name in ("a1", "a2"):
            a = getattr(self, name)
            if not (0 < a < 1.0 / self.alpha):
                raise PreconditionError(f"{name}={a!r} must lie in (0, 1/alpha) = (0, {1.0 / self.alpha!r})")
        if self.a1 == self.a2:
            raise DegenerateFamilyError("a1 == a2 makes the two-task family degenerate")
        if not self.b2 > 0:
            raise PreconditionError(f"b2 must be positive, got {self.b2!r}")
        gap = abs(self.b1 / self.a1 - self.b2 / self.a2)
        if not self.A > gap:
            raise PreconditionError(f"A={self.A!r} must exceed |b1/a1 - b2/a2| = {gap!r}")

    @property
    def a(self) -> np.ndarray:
        return np.array([self.a1, self.a2])

    @property
    def b(self) -> np.ndarray:
        return np.array([self.b1, self.b2])

    @property
    def minimizers(self) -> np.ndarray:
        return self.b / self.a

    @property
    def contractions(self) -> np.ndarray:
        """(1 - alpha a_i)^r for both tasks."""
        return (1.0 - self.alpha * self.a) ** self.r

    @property
    def D(self) -> float:
        """Divergence level: half the limiting squared gradient at the FOM fixed point."""
        return 0.5 * stationary_stats(self).limit_grad_sq

    def with_alpha(self, alpha: float) -> "CounterexampleSpec":
        return CounterexampleSpec(self.a1, self.a2, self.b2, self.A, alpha, self.r, self.b1)

    def as_dict(self) -> dict:
        return {
            "a1": self.a1, "a2": self.a2, "b1": self.b1, "b2": self.b2,
            "A": self.A, "alpha": self.alpha, "r": int(self.r), "D": self.D,
        }


@dataclass(frozen=True)
class StationaryStats:
    """
    Quantities at the FOM fixed point.

    x_star zeroes the expected FOM gradient a_star x - b_star;
    limit_grad_sq is the squared true gradient there, a_hat x_star - b_hat.
    """
    a_star: float
    b_star: float
    x_star: float
    a_hat: float
    b_hat: float
    limit_grad_sq: float


# ------------------------------------------------------------
# Construction
# ------------------------------------------------------------

def build_counterexample(a1: float, a2: float, D: float, alpha: float, r: int) -> CounterexampleSpec:
    """
    Build the family member whose FOM fixed point has squared gradient 2D.

    Args:
        a1, a2: task curvatures, 0 < a_i < 1/alpha and a1 != a2.
        D: target divergence level, D > 0.
        alpha: inner step size.
        r: inner steps.

    Raises:
        DegenerateFamilyError: if a1 == a2.
        PreconditionError: if a curvature is outside (0, 1/alpha) or D <= 0.
    """
    if not (alpha > 0 and math.isfinite(alpha)):
        raise InvalidConfigError(f"alpha must be positive, got {alpha!r}")
    for name, a in (("a1", a1), ("a2", a2)):
        if not (0 < a < 1.0 / alpha):
            raise PreconditionError(f"{name}={a!r} must lie in (0, 1/alpha)")
    if a1 == a2:
        raise DegenerateFamilyError("a1 == a2 makes the two-task family degenerate")
    if not D > 0:
        raise PreconditionError(f"D must be positive, got {D!r}")

    c1 = (1.0 - alpha * a1) ** r
    c2 = (1.0 - alpha * a2) ** r
    ratio = (a1 * c1 ** 2 + a2 * c2 ** 2) / (a1 * c1 + a2 * c2)
    denom = abs(ratio * c2 - c2 ** 2)
    if denom == 0.0:
        raise DegenerateFamilyError("contraction factors coincide; b2 is undefined")
    b1 = 0.0
    b2 = 2.0 * math.sqrt(2.0 * D) / denom
    A = abs(b1 / a1 - b2 / a2) + 1.0
    spec = CounterexampleSpec(a1=a1, a2=a2, b2=b2, A=A, alpha=alpha, r=int(r), b1=b1)
    logger.debug("built counterexample b2=%r A=%r", b2, A)
    return spec


def stationary_stats(spec: CounterexampleSpec) -> StationaryStats:
    c = spec.contractions
    a, b = spec.a, spec.b
    a_star = 0.5 * float(np.sum(a * c))
    b_star = 0.5 * float(np.sum(b * c))
    a_hat = 0.5 * float(np.sum(a * c * c))
    b_hat = 0.5 * float(np.sum(b * c * c))
    x_star = b_star / a_star
    return StationaryStats(
        a_star=a_star,
        b_star=b_star,
        x_star=x_star,
        a_hat=a_hat,
        b_hat=b_hat,
        limit_grad_sq=(a_hat * x_star - b_hat) ** 2,
    )


def shared_interval(spec: CounterexampleSpec) -> Tuple[float, float]:
    """The interval where both tasks sit in their quadratic cores."""
    m = spec.minimizers
    return float(np.max(m) - spec.A), float(np.min(m) + spec.A)


def regularity(spec: CounterexampleSpec) -> RegularityConstants:
    """
    Analytic constants of the family.

    |f'| peaks on the linear tails at a(A + 1/2), the exact tail slope; the
    looser a(1/2 + A + 1/2) also bounds it. f'' lies in [0, a];
    f''' = -a on the blend. V is the identity.
    """
    a_max = max(spec.a1, spec.a2)
    return RegularityConstants(
        M1=1.0,
        M2=0.0,
        L1=a_max * (spec.A + 0.5),
        L2=a_max,
        L3=a_max,
    )


# ------------------------------------------------------------
# The piecewise losses
# ------------------------------------------------------------

def piece_values(a: ArrayLike, A: float, z: ArrayLike, piece: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Value, slope d/dz and curvature d^2/dz^2 of one piece, evaluated at z
    regardless of which region z falls in.
    """
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=float)
    if piece == "quadratic":
        return 0.5 * a * z * z, a * z, a * np.ones_like(z)
    if piece == "blend":
        t = z - A
        value = -(a / 6.0) * t ** 3 + 0.5 * a * t * t + a * A * z - 0.5 * a * A * A
        return value, -0.5 * a * t * t + a * z, -a * z + a + a * A
    if piece == "linear":
        slope = 0.5 * a + a * A
        value = slope * z - a / 6.0 - 0.5 * a * A * A - 0.5 * a * A
        return value, slope * np.ones_like(z), np.zeros_like(z)
    raise ValueError(f"unknown piece {piece!r}; expected one of {PIECES}")


def _coefficients(spec: CounterexampleSpec, i: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(i)
    if np.any((idx != 1) & (idx != 2)):
        raise PreconditionError(f"task index must be 1 or 2, got {i!r}")
    return spec.a[idx - 1], spec.b[idx - 1]


def _evaluate(spec: CounterexampleSpec, i: ArrayLike, x: ArrayLike):
    a, b = _coefficients(spec, i)
    x = np.asarray(x, dtype=float)
    u = x - b / a
    z = np.abs(u)
    in_core = z <= spec.A
    in_blend = (z > spec.A) & (z <= spec.A + 1.0)
    # every piece is evaluated everywhere; far tails can overflow the cubic
    with np.errstate(over="ignore", invalid="ignore"):
        parts = [piece_values(a, spec.A, z, piece) for piece in PIECES]
    picked = [
        np.where(in_core, parts[0][k], np.where(in_blend, parts[1][k], parts[2][k]))
        for k in range(3)
    ]
    return picked, np.sign(u)


def f_eval(spec: CounterexampleSpec, i: ArrayLike, x: ArrayLike):
    (value, _, _), _ = _evaluate(spec, i, x)
    return value[()] if value.ndim == 0 else value


def f_prime(spec: CounterexampleSpec, i: ArrayLike, x: ArrayLike):
    # sign(0) = 0 sits inside the quadratic core, where the slope is 0 anyway
    (_, slope, _), sign = _evaluate(spec, i, x)
    out = sign * slope
    return out[()] if out.ndim == 0 else out


def f_second(spec: CounterexampleSpec, i: ArrayLike, x: ArrayLike):
    (_, _, curvature), _ = _evaluate(spec, i, x)
    return curvature[()] if curvature.ndim == 0 else curvature


# ------------------------------------------------------------
# Closed-form gradients on the shared interval
# ------------------------------------------------------------

def _check_interval(spec: CounterexampleSpec, theta: float) -> None:
    lo, hi = shared_interval(spec)
    if not (lo <= theta <= hi):
        raise ClosedFormDomainError(theta, lo, hi)


def closed_form_fom_grad(spec: CounterexampleSpec, i: int, theta: float) -> float:
    """a_i (1 - alpha a_i)^r (theta - b_i/a_i), valid on the shared interval."""
    _check_interval(spec, theta)
    a, b = _coefficients(spec, i)
    c = (1.0 - spec.alpha * a) ** spec.r
    return float(a * c * (theta - b / a))


def closed_form_full_grad(spec: CounterexampleSpec, i: int, theta: float) -> float:
    """a_i (1 - alpha a_i)^{2r} (theta - b_i/a_i), valid on the shared interval."""
    _check_interval(spec, theta)
    a, b = _coefficients(spec, i)
    c = (1.0 - spec.alpha * a) ** spec.r
    return float(a * c * c * (theta - b / a))


# ------------------------------------------------------------
# As a bi-level problem
# ------------------------------------------------------------

_TASKS = (Task(id=1, payload=1), Task(id=2, payload=2))


class CounterexampleProblem(BilevelProblem):
    """
    The family as an oracle bundle. Only the first coordinate of phi enters
    the losses; with dim == 1 every oracle broadcasts over replica batches.
    """

    name = "counterexample"

    def __init__(self, spec: CounterexampleSpec, dim: int = 1) -> None:
        super().__init__(s=dim, p=dim)
        self.spec = spec
        self.dim = dim
        self.elementwise = dim == 1

    def task_distribution(self) -> TaskDistribution:
        return [(task, 0.5) for task in _TASKS]

    def sample_point(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = shared_interval(self.spec)
        pad = 2.0 * (self.spec.A + 1.0)
        return rng.uniform(lo - pad, hi + pad, self.s), rng.uniform(lo - pad, hi + pad, self.p)

    def regularity(self) -> RegularityConstants:
        return regularity(self.spec)

    def _lead(self, phi: np.ndarray) -> np.ndarray:
        return phi if self.dim == 1 else phi[0]

    def _embed(self, lead_value, like: np.ndarray) -> np.ndarray:
        if self.dim == 1:
            return np.asarray(lead_value, dtype=float)
        out = np.zeros_like(like, dtype=float)
        out[0] = lead_value
        return out

    def inner_loss(self, theta, phi, task):
        return scalar_or_batch(np.atleast_1d(f_eval(self.spec, task.payload, self._lead(phi))))

    def outer_loss(self, theta, phi, task):
        return self.inner_loss(theta, phi, task)

    def inner_grad_phi(self, theta, phi, task):
        return self._embed(f_prime(self.spec, task.payload, self._lead(phi)), phi)

    def inner_grad_theta(self, theta, phi, task):
        return np.zeros_like(theta, dtype=float)

    def outer_grad_theta(self, theta, phi, task):
        return np.zeros_like(theta, dtype=float)

    def outer_grad_phi(self, theta, phi, task):
        return self.inner_grad_phi(theta, phi, task)

    def hvp_theta_phi(self, theta, phi, task, b):
        return np.zeros_like(theta, dtype=float)

    def hvp_phi_phi(self, theta, phi, task, b):
        curvature = f_second(self.spec, task.payload, self._lead(phi))
        return self._embed(curvature * self._lead(b), b)

    def start_point(self, theta, task):
        return np.array(theta, dtype=float, copy=True)

    def jvp_V(self, theta, task, b):
        return np.array(b, dtype=float, copy=True)

    def describe(self) -> dict:
        return {**super().describe(), **self.spec.as_dict()}


def as_problem(spec: CounterexampleSpec, dim: int = 1) -> CounterexampleProblem:
    return CounterexampleProblem(spec, dim=dim)
