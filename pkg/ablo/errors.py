"""
Custom exception classes for the ablo system.

These exceptions let the estimators, the outer loop, the scenario runners
and the CLI report clear, structured errors that are easy to catch by
category (configuration, numerical divergence, verification failure).
"""

from __future__ import annotations

from typing import Optional


class AbloError(Exception):
    """
    Base class for all ablo-related errors.
    """
    pass


class InvalidConfigError(AbloError):
    """
    Raised when an experiment config or an operation argument is missing
    required fields or contains invalid values. The CLI maps it to exit code 2.
    """
    pass


class PreconditionError(AbloError):
    """
    Raised when an operation is called outside its documented domain.
    """
    pass


class DegenerateFamilyError(PreconditionError):
    """
    Raised when a two-task counterexample is requested with a1 == a2.
    """
    pass


class ClosedFormDomainError(PreconditionError):
    """
    Raised when a closed-form counterexample gradient is requested for a
    point outside the shared quadratic interval.
    """

    def __init__(self, theta: float, lo: float, hi: float) -> None:
        super().__init__(
            f"theta={theta!r} lies outside the shared quadratic interval "
            f"[{lo!r}, {hi!r}]; use the numeric estimators instead"
        )
        self.theta = theta
        self.lo = lo
        self.hi = hi

    def __reduce__(self):
        return type(self), (self.theta, self.lo, self.hi)


class DivergentRolloutError(AbloError):
    """
    Raised when an inner rollout or backward pass produces a non-finite
    value. `inner_step` is the inner-GD index j at which it happened;
    `outer_iteration` is filled in when the error crosses the outer loop.
    """

    def __init__(self, inner_step: int, what: str, outer_iteration: Optional[int] = None) -> None:
        self.inner_step = inner_step
        self.what = what
        self.outer_iteration = outer_iteration
        super().__init__(self._message())

    def _message(self) -> str:
        msg = f"non-finite {self.what} at inner step {self.inner_step}"
        if self.outer_iteration is not None:
            msg += f" (outer iteration {self.outer_iteration})"
        return msg

    def at_outer_iteration(self, k: int) -> "DivergentRolloutError":
        self.outer_iteration = k
        self.args = (self._message(),)
        return self

    def __reduce__(self):
        return type(self), (self.inner_step, self.what, self.outer_iteration)


class OuterDivergenceError(AbloError):
    """
    Raised when the outer SGD iterate becomes non-finite.
    """

    def __init__(self, outer_iteration: int) -> None:
        super().__init__(f"non-finite outer parameters at iteration {outer_iteration}")
        self.outer_iteration = outer_iteration

    def __reduce__(self):
        return type(self), (self.outer_iteration,)


class IndeterminateConditionError(AbloError):
    """
    Raised when the UFOM-vs-exact condition is queried with V2 == 0.
    """
    pass


class VerificationError(AbloError):
    """
    Raised when a verification battery reports at least one failing check.
    The CLI maps it to exit code 1.
    """

    def __init__(self, failures: list) -> None:
        super().__init__(f"{len(failures)} verification check(s) failed: " + ", ".join(failures))
        self.failures = failures

    def __reduce__(self):
        return type(self), (self.failures,)
