"""
Scalar quadratic toy problem.

L_in = 1/2 (phi - w theta)^2, L_out = 1/2 phi^2, V(theta) = v0, one task.
Inner GD with constant step alpha has the closed form
phi_r = (1 - alpha)^r v0 + (1 - (1 - alpha)^r) w theta, while the FOM
gradient is identically zero because neither L_out nor V depends on theta.
"""

from __future__ import annotations

import numpy as np

from .base import BilevelProblem, RegularityConstants, Task, TaskDistribution, scalar_or_batch
from ..errors import InvalidConfigError

_TASK = Task(id=0)


class ScalarQuadratic(BilevelProblem):
    name = "scalar_quadratic"
    elementwise = True

    def __init__(self, w: float, v0: float) -> None:
        super().__init__(s=1, p=1)
        if not (np.isfinite(w) and np.isfinite(v0)):
            raise InvalidConfigError(f"w and v0 must be finite, got w={w!r}, v0={v0!r}")
        self.w = float(w)
        self.v0 = float(v0)

    def task_distribution(self) -> TaskDistribution:
        return [(_TASK, 1.0)]

    def regularity(self, radius: float = 10.0) -> RegularityConstants:
        """
        Constants on the box |theta|, |phi| <= radius (the losses are
        unbounded quadratics, so no global L1 exists).
        """
        w = abs(self.w)
        return RegularityConstants(
            M1=0.0,
            M2=0.0,
            L1=max(1.0, w) * (1.0 + w) * radius,
            L2=1.0 + w * w,
            L3=0.0,
        )

    def closed_form_rollout(self, theta: np.ndarray, alpha: float, r: int) -> np.ndarray:
        c = (1.0 - alpha) ** r
        return c * self.v0 + (1.0 - c) * self.w * np.asarray(theta, dtype=float)

    def inner_loss(self, theta, phi, task):
        d = phi - self.w * theta
        return scalar_or_batch(0.5 * d * d)

    def outer_loss(self, theta, phi, task):
        return scalar_or_batch(0.5 * phi * phi)

    def inner_grad_phi(self, theta, phi, task):
        return phi - self.w * theta

    def inner_grad_theta(self, theta, phi, task):
        return -self.w * (phi - self.w * theta)

    def outer_grad_theta(self, theta, phi, task):
        return np.zeros_like(theta, dtype=float)

    def outer_grad_phi(self, theta, phi, task):
        return np.array(phi, dtype=float, copy=True)

    def hvp_theta_phi(self, theta, phi, task, b):
        return -self.w * b

    def hvp_phi_phi(self, theta, phi, task, b):
        return np.array(b, dtype=float, copy=True)

    def start_point(self, theta, task):
        return np.full_like(theta, self.v0, dtype=float)

    def jvp_V(self, theta, task, b):
        return np.zeros_like(theta, dtype=float)

    def describe(self) -> dict:
        return {**super().describe(), "w": self.w, "v0": self.v0}


def make_scalar_quadratic(w: float, v0: float) -> ScalarQuadratic:
    """Build the scalar quadratic problem."""
    return ScalarQuadratic(w, v0)
