"""
ablo package entrypoint.

This module exposes the public API for programmatic use:

- Gradient estimators over inner gradient descent: `exact_gradient_cached`,
  `exact_gradient_recompute`, `fom_gradient`, `ufom_gradient`
- Outer SGD drivers: `run_sgd`, `run_replicas`, `run_sgd_batch`
- Bounds and the optimal-probability solver: `d_bound`, `v_bound`,
  `lipschitz_c`, `optimal_q`
- Problems: `make_problem`, `build_counterexample`
- Experiments: `load_config`, `run_scenario`, `run_verification_battery`
"""

from .config import load_config
from .estimators import (
    InnerSchedule,
    exact_gradient_cached,
    exact_gradient_recompute,
    fom_gradient,
    meta_gradient,
    ufom_gradient,
)
from .outer_loop import EstimatorSpec, OuterSchedule, run_replicas, run_sgd, run_sgd_batch
from .problems import make_problem
from .problems.counterexample import build_counterexample
from .scenarios import run_scenario
from .theory import CostModel, d_bound, lipschitz_c, optimal_q, v_bound
from .verification import run_verification_battery

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "EstimatorSpec",
    "InnerSchedule",
    "OuterSchedule",
    "build_counterexample",
    "d_bound",
    "exact_gradient_cached",
    "exact_gradient_recompute",
    "fom_gradient",
    "lipschitz_c",
    "load_config",
    "make_problem",
    "meta_gradient",
    "optimal_q",
    "run_replicas",
    "run_scenario",
    "run_sgd",
    "run_sgd_batch",
    "run_verification_battery",
    "ufom_gradient",
    "v_bound",
]
