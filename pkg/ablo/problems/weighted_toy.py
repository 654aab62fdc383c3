"""
Weighted-data logistic classifier: data hypercleaning at desk scale.

theta holds one weight logit per training sample and phi is a linear
logistic classifier over labels in {-1, +1}:

    L_in(theta, phi)  = sum_i sigmoid(theta_i) * l_i(phi)
    L_out(theta, phi) = validation loss at phi - fold_step * dL_in/dphi

The last inner step is folded into L_out so that L_out depends on theta
while V(theta) stays constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from .base import BilevelProblem, Task, TaskDistribution
from ..errors import InvalidConfigError

logger = logging.getLogger("ablo.problems.weighted_toy")

_TASK = Task(id=0)


@dataclass(frozen=True)
class CorruptedDataset:
    """Synthetic separable data with a known set of flipped training labels."""
    features: np.ndarray
    labels: np.ndarray
    val_features: np.ndarray
    val_labels: np.ndarray
    corrupted: np.ndarray


def _logistic_loss(margins: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, -margins)


def _check_labels(labels: np.ndarray, what: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=float)
    if labels.ndim != 1:
        raise InvalidConfigError(f"{what} must be a vector, got shape {labels.shape}")
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise InvalidConfigError(f"{what} must take values in {{-1, +1}}")
    return labels


class WeightedToy(BilevelProblem):
    name = "weighted_toy"

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        val_features: np.ndarray,
        val_labels: np.ndarray,
        fold_step: float = 1.0,
        phi0: Optional[np.ndarray] = None,
    ) -> None:
        X = np.asarray(features, dtype=float)
        Xv = np.asarray(val_features, dtype=float)
        if X.ndim != 2 or Xv.ndim != 2:
            raise InvalidConfigError("features and val_features must be 2-D matrices")
        y = _check_labels(labels, "labels")
        yv = _check_labels(val_labels, "val_labels")
        if X.shape[0] != y.shape[0]:
            raise InvalidConfigError(f"features have {X.shape[0]} rows but labels have {y.shape[0]} entries")
        if Xv.shape[0] != yv.shape[0]:
            raise InvalidConfigError(
                f"val_features have {Xv.shape[0]} rows but val_labels have {yv.shape[0]} entries"
            )
        if X.shape[1] != Xv.shape[1]:
            raise InvalidConfigError("training and validation features differ in width")
        if X.shape[0] < 1 or Xv.shape[0] < 1:
            raise InvalidConfigError("training and validation sets must be non-empty")
        if not fold_step > 0:
            raise InvalidConfigError(f"fold_step must be positive, got {fold_step!r}")

        super().__init__(s=X.shape[0], p=X.shape[1])
        self.X = X
        self.y = y
        self.Xv = Xv
        self.yv = yv
        self.fold_step = float(fold_step)
        self.phi0 = np.zeros(self.p) if phi0 is None else np.asarray(phi0, dtype=float)
        if self.phi0.shape != (self.p,):
            raise InvalidConfigError(f"phi0 must have shape ({self.p},)")
        self.dataset: Optional[CorruptedDataset] = None

    @classmethod
    def from_dataset(cls, dataset: CorruptedDataset, fold_step: float = 1.0) -> "WeightedToy":
        """Build the problem over a synthetic dataset, keeping the corruption mask."""
        problem = cls(
            dataset.features, dataset.labels, dataset.val_features, dataset.val_labels, fold_step=fold_step
        )
        problem.dataset = dataset
        return problem

    def task_distribution(self) -> TaskDistribution:
        return [(_TASK, 1.0)]

    # ------------------------------------------------------------
    # Per-sample pieces
    # ------------------------------------------------------------

    def sample_losses(self, phi: np.ndarray) -> np.ndarray:
        """l_i(phi) for every training sample."""
        return _logistic_loss(self.y * (self.X @ phi))

    def _sample_slopes(self, phi: np.ndarray) -> np.ndarray:
        # d l_i / d(x_i . phi)
        return -self.y * expit(-self.y * (self.X @ phi))

    def _sample_curvatures(self, phi: np.ndarray) -> np.ndarray:
        m = self.y * (self.X @ phi)
        return expit(m) * expit(-m)

    def weights(self, theta: np.ndarray) -> np.ndarray:
        return expit(theta)

    def _weight_slopes(self, theta: np.ndarray) -> np.ndarray:
        return expit(theta) * expit(-theta)

    def validation_loss(self, psi: np.ndarray) -> float:
        return float(np.mean(_logistic_loss(self.yv * (self.Xv @ psi))))

    def _validation_grad(self, psi: np.ndarray) -> np.ndarray:
        slopes = -self.yv * expit(-self.yv * (self.Xv @ psi))
        return self.Xv.T @ slopes / self.Xv.shape[0]

    def _folded(self, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
        return phi - self.fold_step * self.inner_grad_phi(theta, phi, _TASK)

    # ------------------------------------------------------------
    # Oracles
    # ------------------------------------------------------------

    def inner_loss(self, theta, phi, task):
        return float(np.sum(self.weights(theta) * self.sample_losses(phi)))

    def outer_loss(self, theta, phi, task):
        return self.validation_loss(self._folded(theta, phi))

    def inner_grad_phi(self, theta, phi, task):
        return self.X.T @ (self.weights(theta) * self._sample_slopes(phi))

    def inner_grad_theta(self, theta, phi, task):
        return self._weight_slopes(theta) * self.sample_losses(phi)

    def hvp_theta_phi(self, theta, phi, task, b):
        return self._weight_slopes(theta) * self._sample_slopes(phi) * (self.X @ b)

    def hvp_phi_phi(self, theta, phi, task, b):
        return self.X.T @ (self.weights(theta) * self._sample_curvatures(phi) * (self.X @ b))

    def outer_grad_phi(self, theta, phi, task):
        gv = self._validation_grad(self._folded(theta, phi))
        return gv - self.fold_step * self.hvp_phi_phi(theta, phi, task, gv)

    def outer_grad_theta(self, theta, phi, task):
        gv = self._validation_grad(self._folded(theta, phi))
        return -self.fold_step * self.hvp_theta_phi(theta, phi, task, gv)

    def start_point(self, theta, task):
        return self.phi0.copy()

    def jvp_V(self, theta, task, b):
        return np.zeros(self.s)

    def describe(self) -> dict:
        return {**super().describe(), "n": self.s, "features": self.p, "fold_step": self.fold_step}


def make_weighted_toy(
    n: int,
    features: np.ndarray,
    labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    fold_step: float = 1.0,
) -> WeightedToy:
    """
    Build the weighted classifier problem.

    Args:
        n: number of training samples; must match the rows of `features`.
        features, labels: training set, labels in {-1, +1}.
        val_features, val_labels: validation set.
        fold_step: step size of the inner step folded into the outer loss.

    Raises:
        InvalidConfigError: on any shape mismatch.
    """
    if n < 1:
        raise InvalidConfigError(f"n must be at least 1, got {n}")
    if np.asarray(features).shape[0] != n:
        raise InvalidConfigError(f"n={n} but features have {np.asarray(features).shape[0]} rows")
    return WeightedToy(features, labels, val_features, val_labels, fold_step=fold_step)


def make_corrupted_dataset(
    n: int,
    n_val: int,
    n_features: int,
    corrupt_fraction: float,
    rng: np.random.Generator,
) -> CorruptedDataset:
    """
    Linearly separable Gaussian data with a bias column; a random
    `corrupt_fraction` of the training labels is flipped.
    """
    if not 0.0 <= corrupt_fraction < 1.0:
        raise InvalidConfigError(f"corrupt_fraction must lie in [0, 1), got {corrupt_fraction!r}")
    if n < 1 or n_val < 1 or n_features < 1:
        raise InvalidConfigError("dataset sizes must be positive")

    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)

    def draw(count: int) -> Tuple[np.ndarray, np.ndarray]:
        raw = rng.standard_normal((count, n_features))
        labels = np.where(raw @ direction >= 0.0, 1.0, -1.0)
        return np.hstack([raw, np.ones((count, 1))]), labels

    X, y = draw(n)
    Xv, yv = draw(n_val)
    corrupted = np.zeros(n, dtype=bool)
    corrupted[rng.choice(n, size=int(round(corrupt_fraction * n)), replace=False)] = True
    y = np.where(corrupted, -y, y)
    logger.debug("dataset: %d train (%d corrupted), %d validation", n, int(corrupted.sum()), n_val)
    return CorruptedDataset(features=X, labels=y, val_features=Xv, val_labels=yv, corrupted=corrupted)
