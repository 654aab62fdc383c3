"""
Global constants for ablo.

Default numerical knobs, the synthetic experiment setups and per-scenario
budgets. Every value can be overridden from an experiment config file.
"""

from typing import Dict, Tuple

# -----------------------------------------------------------
# Schema versions (bumped whenever a column set changes)
# -----------------------------------------------------------

CSV_SCHEMA_VERSION: int = 1
MANIFEST_SCHEMA_VERSION: int = 1

# -----------------------------------------------------------
# Finite differences
# -----------------------------------------------------------

# Central-difference step, scaled by max(1, |x|) per coordinate
FD_STEP: float = 1e-5
FD_RTOL: float = 1e-5
FD_ATOL: float = 0.0

# -----------------------------------------------------------
# Cost model / optimal q
# -----------------------------------------------------------

DEFAULT_C1: float = 1.0
DEFAULT_C2: float = 1.0
DEFAULT_EPSILON: float = 0.0

# Residual above which the closed-form root gets a bracketed polish
QSTAR_POLISH_TOL: float = 1e-12

# -----------------------------------------------------------
# Adaptive UFOM
# -----------------------------------------------------------

DEFAULT_BETA: float = 0.99
DEFAULT_Q_MIN: float = 0.05
DEFAULT_BIAS_SCALE: float = 1.0

# -----------------------------------------------------------
# Counterexample: divergence setup (FOM vs UFOM curves)
# -----------------------------------------------------------

DIVERGENCE_SETUP: Dict[str, float] = {
    "a1": 0.5,
    "a2": 1.5,
    "D": 0.06,
    "alpha": 0.1,
    "r": 10,
}
DIVERGENCE_Q: float = 0.1
DIVERGENCE_GAMMA_SCALE: float = 10.0
DIVERGENCE_THETA0_RANGE: Tuple[float, float] = (-10.0, 30.0)
DIVERGENCE_REPLICAS: int = 5
DIVERGENCE_ITERATIONS: int = 10_000

# -----------------------------------------------------------
# Counterexample: alpha sweep / q* setup
# -----------------------------------------------------------

SWEEP_SETUP: Dict[str, float] = {
    "a1": 0.5,
    "a2": 1.5,
    "b2": 10.0,
    "A": 10.0,
    "r": 10,
}
SWEEP_ALPHA_RANGE: Tuple[float, float] = (1e-3, 5e-2)
SWEEP_ALPHA_POINTS: int = 10
SWEEP_GRID_RANGE: Tuple[float, float] = (-50.0, 50.0)
SWEEP_GRID_POINTS: int = 10_000
SWEEP_THETA0_RANGE: Tuple[float, float] = (-50.0, 50.0)

QGRID_RANGE: Tuple[float, float] = (0.02, 0.4)
QGRID_POINTS: int = 20
# 10000 restores the original experiment's replica count
QSTAR_REPLICAS: int = 1000
QSTAR_ITERATIONS: int = 100

RACE_ALPHA: float = 1e-2
RACE_REPLICAS: int = 1000
RACE_ITERATIONS: int = 100

# -----------------------------------------------------------
# Convergence check (gamma_k = k^-0.5)
# -----------------------------------------------------------

CONVERGENCE_ITERATIONS: int = 5_000
CONVERGENCE_REPLICAS: int = 3

# -----------------------------------------------------------
# Weighted toy (hypercleaning at desk scale)
# -----------------------------------------------------------

TOY_TRAIN_SIZE: int = 60
TOY_VAL_SIZE: int = 60
TOY_FEATURES: int = 2
TOY_CORRUPT_FRACTION: float = 0.3
TOY_INNER_STEPS: int = 20
TOY_INNER_ALPHA: float = 0.05
TOY_FOLD_STEP: float = 0.05
TOY_OUTER_STEP: float = 5.0
# Budget in function calls, equivalent to this many exact-recompute iterations
TOY_EXACT_ITERATIONS: int = 150
TOY_BIAS_SCALE: float = 0.1

# -----------------------------------------------------------
# Verification battery
# -----------------------------------------------------------

VERIFY_FD_SAMPLES: int = 100
VERIFY_MC_DRAWS: int = 100_000
VERIFY_MC_POINTS: int = 10
VERIFY_MC_QS: Tuple[float, ...] = (0.05, 0.1, 0.5, 1.0)
VERIFY_Z_LIMIT: float = 3.0
