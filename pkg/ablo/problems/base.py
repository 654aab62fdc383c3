"""
The oracle contract shared by every bi-level problem.

A problem bundles an inner loss, an outer loss, their first derivatives,
the two Hessian-vector products of the inner loss, a start point V(theta)
for inner gradient descent and its Jacobian-vector product. Oracles are
pure: the same (theta, phi, task) always produces the same value.

Problems flagged `elementwise` have s == p == 1 and oracles that broadcast,
so a 1-D array of independent scalar parameters can be passed in place of
a length-1 vector. Replica batches and grid statistics rely on this.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Hashable, List, Optional, Tuple

import numpy as np

from ..errors import InvalidConfigError


@dataclass(frozen=True)
class Task:
    """A task drawn from the problem's task distribution."""
    id: Hashable
    payload: Any = None


@dataclass(frozen=True)
class RegularityConstants:
    """
    Uniform bounds on the problem's derivatives.

    Attributes:
        M1: bound on the norm of dV/dtheta.
        M2: Lipschitz constant of dV/dtheta.
        L1: bound on the loss gradients with respect to theta and phi.
        L2: Lipschitz constant of the loss gradients.
        L3: Lipschitz constant of the inner-loss second derivatives.
    """
    M1: float
    M2: float
    L1: float
    L2: float
    L3: float

    def __post_init__(self) -> None:
        for name in ("M1", "M2", "L1", "L2", "L3"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidConfigError(f"regularity constant {name} must be finite and >= 0, got {value!r}")

    def as_dict(self) -> dict:
        return {"M1": self.M1, "M2": self.M2, "L1": self.L1, "L2": self.L2, "L3": self.L3}


TaskDistribution = List[Tuple[Task, float]]


class BilevelProblem(ABC):
    """
    Base class for approximate bi-level problems.

    Attributes:
        s: dimension of the outer parameters theta.
        p: dimension of the inner parameters phi.
        name: registry name.
        elementwise: whether oracles broadcast over batches of scalar problems.
    """

    name: str = "problem"
    elementwise: bool = False

    def __init__(self, s: int, p: int) -> None:
        if s < 1 or p < 1:
            raise InvalidConfigError(f"dimensions must be positive, got s={s}, p={p}")
        self.s = s
        self.p = p

    # ------------------------------------------------------------
    # Task distribution
    # ------------------------------------------------------------

    def task_distribution(self) -> Optional[TaskDistribution]:
        """Finite enumeration of (task, probability), or None when tasks are only sampled."""
        return None

    def sample_task(self, rng: np.random.Generator) -> Task:
        dist = self.task_distribution()
        if dist is None:
            raise NotImplementedError(f"{type(self).__name__} must implement sample_task")
        if len(dist) == 1:
            return dist[0][0]
        probs = np.array([p for _, p in dist], dtype=float)
        return dist[int(rng.choice(len(dist), p=probs))][0]

    def sample_point(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """A random (theta, phi) sample point for oracle checks."""
        return rng.standard_normal(self.s), rng.standard_normal(self.p)

    def regularity(self) -> Optional[RegularityConstants]:
        """Analytic regularity constants, when they are derivable."""
        return None

    # ------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------

    @abstractmethod
    def inner_loss(self, theta: np.ndarray, phi: np.ndarray, task: Task) -> float: ...

    @abstractmethod
    def outer_loss(self, theta: np.ndarray, phi: np.ndarray, task: Task) -> float: ...

    # ------------------------------------------------------------
    # First derivatives
    # ------------------------------------------------------------

    @abstractmethod
    def inner_grad_phi(self, theta: np.ndarray, phi: np.ndarray, task: Task) -> np.ndarray: ...

    @abstractmethod
    def inner_grad_theta(self, theta: np.ndarray, phi: np.ndarray, task: Task) -> np.ndarray: ...

    @abstractmethod
    def outer_grad_theta(self, theta: np.ndarray, phi: np.ndarray, task: Task) -> np.ndarray: ...

    @abstractmethod
    def outer_grad_phi(self, theta: np.ndarray, phi: np.ndarray, task: Task) -> np.ndarray: ...

    # ------------------------------------------------------------
    # Second-order products of the inner loss
    # ------------------------------------------------------------

    @abstractmethod
    def hvp_theta_phi(self, theta: np.ndarray, phi: np.ndarray, task: Task, b: np.ndarray) -> np.ndarray:
        """(d^2 L_in / dtheta dphi)^T b, a vector in R^s."""

    @abstractmethod
    def hvp_phi_phi(self, theta: np.ndarray, phi: np.ndarray, task: Task, b: np.ndarray) -> np.ndarray:
        """(d^2 L_in / dphi^2)^T b, a vector in R^p."""

    # ------------------------------------------------------------
    # Start point of inner GD
    # ------------------------------------------------------------

    @abstractmethod
    def start_point(self, theta: np.ndarray, task: Task) -> np.ndarray: ...

    @abstractmethod
    def jvp_V(self, theta: np.ndarray, task: Task, b: np.ndarray) -> np.ndarray:
        """(dV/dtheta)^T b, a vector in R^s."""

    def describe(self) -> dict:
        return {"name": self.name, "s": self.s, "p": self.p}


def scalar_or_batch(values: np.ndarray):
    """Collapse a length-1 loss vector to a float; keep replica batches as arrays."""
    values = np.asarray(values, dtype=float)
    if values.shape == (1,):
        return float(values[0])
    return values
