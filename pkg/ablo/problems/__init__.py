"""
Built-in bi-level problems and the name-based registry used by configs.
"""

from __future__ import annotations

from typing import Any, Callable, Dict

import numpy as np

from .base import BilevelProblem, RegularityConstants, Task
from .counterexample import CounterexampleProblem, CounterexampleSpec, as_problem, build_counterexample
from .scalar_quadratic import ScalarQuadratic, make_scalar_quadratic
from .weighted_toy import WeightedToy, make_corrupted_dataset, make_weighted_toy
from ..errors import InvalidConfigError


def _take(params: Dict[str, Any], allowed: set, required: set, name: str) -> Dict[str, Any]:
    unknown = set(params) - allowed
    if unknown:
        raise InvalidConfigError(f"unknown parameter(s) for problem '{name}': {sorted(unknown)}")
    missing = required - set(params)
    if missing:
        raise InvalidConfigError(f"missing parameter(s) for problem '{name}': {sorted(missing)}")
    return params


def counterexample_spec(params: Dict[str, Any]) -> CounterexampleSpec:
    """
    Spec from either a target divergence level {a1, a2, D, alpha, r} or an
    explicit member {a1, a2, b2, A, alpha, r}.
    """
    keys = {"a1", "a2", "D", "b2", "A", "alpha", "r", "dim"}
    _take(params, keys, {"a1", "a2", "alpha", "r"}, "counterexample")
    if "D" in params:
        if "b2" in params or "A" in params:
            raise InvalidConfigError("counterexample takes either D or (b2, A), not both")
        return build_counterexample(
            float(params["a1"]), float(params["a2"]), float(params["D"]), float(params["alpha"]), int(params["r"])
        )
    if "b2" not in params or "A" not in params:
        raise InvalidConfigError("counterexample needs D, or both b2 and A")
    return CounterexampleSpec(
        a1=float(params["a1"]),
        a2=float(params["a2"]),
        b2=float(params["b2"]),
        A=float(params["A"]),
        alpha=float(params["alpha"]),
        r=int(params["r"]),
    )


def _counterexample(params: Dict[str, Any]) -> BilevelProblem:
    return as_problem(counterexample_spec(params), dim=int(params.get("dim", 1)))


def _scalar_quadratic(params: Dict[str, Any]) -> BilevelProblem:
    _take(params, {"w", "v0"}, {"w", "v0"}, "scalar_quadratic")
    return make_scalar_quadratic(float(params["w"]), float(params["v0"]))


def _weighted_toy(params: Dict[str, Any]) -> BilevelProblem:
    from ..constants import TOY_CORRUPT_FRACTION, TOY_FEATURES, TOY_FOLD_STEP, TOY_TRAIN_SIZE, TOY_VAL_SIZE

    _take(params, {"n", "n_val", "n_features", "corrupt_fraction", "fold_step", "data_seed"}, set(), "weighted_toy")
    dataset = make_corrupted_dataset(
        int(params.get("n", TOY_TRAIN_SIZE)),
        int(params.get("n_val", TOY_VAL_SIZE)),
        int(params.get("n_features", TOY_FEATURES)),
        float(params.get("corrupt_fraction", TOY_CORRUPT_FRACTION)),
        np.random.default_rng(int(params.get("data_seed", 0))),
    )
    return WeightedToy.from_dataset(dataset, fold_step=float(params.get("fold_step", TOY_FOLD_STEP)))


_REGISTRY: Dict[str, Callable[[Dict[str, Any]], BilevelProblem]] = {
    "counterexample": _counterexample,
    "scalar_quadratic": _scalar_quadratic,
    "weighted_toy": _weighted_toy,
}

PROBLEM_NAMES = tuple(sorted(_REGISTRY))


def make_problem(name: str, params: Dict[str, Any]) -> BilevelProblem:
    """Instantiate a built-in problem by registry name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise InvalidConfigError(f"unknown problem '{name}'; expected one of {list(PROBLEM_NAMES)}") from None
    return factory(dict(params))


__all__ = [
    "BilevelProblem",
    "CounterexampleProblem",
    "CounterexampleSpec",
    "PROBLEM_NAMES",
    "RegularityConstants",
    "ScalarQuadratic",
    "Task",
    "WeightedToy",
    "counterexample_spec",
    "make_problem",
]
