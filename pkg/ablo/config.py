"""
Configuration loading and validation for ablo.

This module defines the schema of experiment `*.json` files, validates
their contents, merges them over per-scenario defaults and CLI overrides,
and provides structured configuration objects used by the scenarios.

File layout (every key optional; missing keys take scenario defaults):

    {
      "scenario": "divergence",
      "seed": 0,
      "replicas": 5,
      "workers": 1,
      "out": "results/divergence",
      "problem": {"name": "counterexample", "params": {"a1": 0.5, ...}},
      "estimators": [{"kind": "fom"}, {"kind": "ufom", "q": 0.1}],
      "inner": {"alpha": 0.1, "r": 10},
      "outer": {"kind": "harmonic", "c": 10.0, "tau": 10000},
      "theta0_range": [-10.0, 30.0],
      "options": {}
    }
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .constants import (
    CONVERGENCE_ITERATIONS,
    CONVERGENCE_REPLICAS,
    DEFAULT_BETA,
    DEFAULT_BIAS_SCALE,
    DEFAULT_C1,
    DEFAULT_C2,
    DEFAULT_EPSILON,
    DEFAULT_Q_MIN,
    DIVERGENCE_GAMMA_SCALE,
    DIVERGENCE_ITERATIONS,
    DIVERGENCE_Q,
    DIVERGENCE_REPLICAS,
    DIVERGENCE_SETUP,
    DIVERGENCE_THETA0_RANGE,
    QGRID_POINTS,
    QGRID_RANGE,
    QSTAR_ITERATIONS,
    QSTAR_REPLICAS,
    RACE_ALPHA,
    RACE_ITERATIONS,
    RACE_REPLICAS,
    SWEEP_ALPHA_POINTS,
    SWEEP_ALPHA_RANGE,
    SWEEP_GRID_POINTS,
    SWEEP_GRID_RANGE,
    SWEEP_SETUP,
    SWEEP_THETA0_RANGE,
    TOY_BIAS_SCALE,
    TOY_EXACT_ITERATIONS,
    TOY_INNER_ALPHA,
    TOY_INNER_STEPS,
    TOY_OUTER_STEP,
)
from .errors import InvalidConfigError
from .estimators import InnerSchedule
from .outer_loop import ESTIMATOR_KINDS, SCHEDULE_KINDS, EstimatorSpec, OuterSchedule
from .problems import PROBLEM_NAMES

SCENARIOS = (
    "divergence",
    "convergence",
    "bias_variance_sweep",
    "qstar_theory_vs_experiment",
    "qstar_race",
    "weighted_toy",
    "verify",
)

# "auto" uses vectorized batches whenever the problem and estimator allow them
ENGINES = ("auto", "batch", "sequential")


# ------------------------------------------------------------
# Data models
# ------------------------------------------------------------

class ProblemConfig:
    """
    Which built-in problem to build.

    Attributes:
        name: registry name, one of `ablo.problems.PROBLEM_NAMES`.
        params: keyword parameters for the problem factory.
    """

    def __init__(self, name: str, params: Dict[str, Any]) -> None:
        self.name = name
        self.params = params

    def as_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


class EstimatorConfig:
    """
    One estimator to run.

    Attributes:
        kind: one of exact_cached, exact_recompute, fom, ufom, adaptive_ufom.
        q: correction probability for "ufom"; "auto" lets the scenario pick q*.
        beta, q_min, bias_scale, C1, C2, epsilon: Adaptive-UFOM knobs.
    """

    def __init__(
        self,
        kind: str,
        q: Any = None,
        beta: float = DEFAULT_BETA,
        q_min: float = DEFAULT_Q_MIN,
        bias_scale: float = DEFAULT_BIAS_SCALE,
        C1: float = DEFAULT_C1,
        C2: float = DEFAULT_C2,
        epsilon: float = DEFAULT_EPSILON,
    ) -> None:
        self.kind = kind
        self.q = q
        self.beta = beta
        self.q_min = q_min
        self.bias_scale = bias_scale
        self.C1 = C1
        self.C2 = C2
        self.epsilon = epsilon

    @property
    def auto_q(self) -> bool:
        return self.kind == "ufom" and self.q == "auto"

    def to_spec(self, q: Optional[float] = None) -> EstimatorSpec:
        """Build the estimator; `q` fills in an "auto" probability."""
        if self.auto_q and q is None:
            raise InvalidConfigError("estimator q='auto' needs a resolved probability")
        return EstimatorSpec(
            kind=self.kind,
            q=q if self.auto_q else self.q,
            beta=self.beta,
            q_min=self.q_min,
            bias_scale=self.bias_scale,
            C1=self.C1,
            C2=self.C2,
            epsilon=self.epsilon,
        )

    def as_dict(self) -> dict:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "ufom":
            out["q"] = self.q
        if self.kind == "adaptive_ufom":
            out.update(beta=self.beta, q_min=self.q_min, bias_scale=self.bias_scale,
                       C1=self.C1, C2=self.C2, epsilon=self.epsilon)
        return out


class InnerScheduleConfig:
    """
    Inner GD steps: either a constant `alpha` repeated `r` times or an
    explicit `alphas` list. Missing values fall back to the problem's own
    alpha and r where it has them.
    """

    def __init__(self, alpha: Optional[float] = None, r: Optional[int] = None,
                 alphas: Optional[List[float]] = None) -> None:
        self.alpha = alpha
        self.r = r
        self.alphas = alphas

    def to_schedule(self, fallback: Optional[Dict[str, Any]] = None) -> InnerSchedule:
        if self.alphas is not None:
            return InnerSchedule(tuple(self.alphas))
        fallback = fallback or {}
        alpha = self.alpha if self.alpha is not None else fallback.get("alpha")
        r = self.r if self.r is not None else fallback.get("r")
        if alpha is None or r is None:
            raise InvalidConfigError("inner schedule needs alpha and r (or alphas)")
        return InnerSchedule.constant(float(alpha), int(r))

    def as_dict(self) -> dict:
        if self.alphas is not None:
            return {"alphas": list(self.alphas)}
        return {"alpha": self.alpha, "r": self.r}


class OuterScheduleConfig:
    """Outer step sizes: kind, scale c, iteration budget tau."""

    def __init__(self, kind: str, c: float, tau: int) -> None:
        self.kind = kind
        self.c = c
        self.tau = tau

    def to_schedule(self) -> OuterSchedule:
        return OuterSchedule(self.kind, self.c, self.tau)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "c": self.c, "tau": self.tau}


class ExperimentConfig:
    """
    Validated configuration of one scenario run.
    """

    def __init__(
        self,
        scenario: str,
        problem: ProblemConfig,
        estimators: List[EstimatorConfig],
        inner: InnerScheduleConfig,
        outer: OuterScheduleConfig,
        seed: int,
        replicas: int,
        workers: int,
        out: Path,
        theta0_range: Tuple[float, float],
        options: Dict[str, Any],
    ) -> None:
        self.scenario = scenario
        self.problem = problem
        self.estimators = estimators
        self.inner = inner
        self.outer = outer
        self.seed = seed
        self.replicas = replicas
        self.workers = workers
        self.out = out
        self.theta0_range = theta0_range
        self.options = options

    def inner_schedule(self) -> InnerSchedule:
        return self.inner.to_schedule(self.problem.params)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "problem": self.problem.as_dict(),
            "estimators": [e.as_dict() for e in self.estimators],
            "inner": self.inner.as_dict(),
            "outer": self.outer.as_dict(),
            "seed": self.seed,
            "replicas": self.replicas,
            "workers": self.workers,
            "out": str(self.out),
            "theta0_range": list(self.theta0_range),
            "options": dict(self.options),
        }


# ------------------------------------------------------------
# Scenario defaults
# ------------------------------------------------------------

def _sweep_options(with_qstar: bool) -> Dict[str, Any]:
    options: Dict[str, Any] = {
        "alpha_range": list(SWEEP_ALPHA_RANGE),
        "alpha_points": SWEEP_ALPHA_POINTS,
        "grid_range": list(SWEEP_GRID_RANGE),
        "grid_points": SWEEP_GRID_POINTS,
    }
    if with_qstar:
        options.update(q_range=list(QGRID_RANGE), q_points=QGRID_POINTS, iterations=QSTAR_ITERATIONS)
    return options


SCENARIO_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "divergence": {
        "problem": {"name": "counterexample", "params": dict(DIVERGENCE_SETUP)},
        "estimators": [{"kind": "fom"}, {"kind": "ufom", "q": DIVERGENCE_Q}],
        "outer": {"kind": "harmonic", "c": DIVERGENCE_GAMMA_SCALE, "tau": DIVERGENCE_ITERATIONS},
        "replicas": DIVERGENCE_REPLICAS,
        "theta0_range": list(DIVERGENCE_THETA0_RANGE),
        "options": {"late_fraction": 0.1, "engine": "auto"},
    },
    "convergence": {
        "problem": {"name": "counterexample", "params": dict(DIVERGENCE_SETUP)},
        "estimators": [{"kind": "exact_cached"}, {"kind": "ufom", "q": DIVERGENCE_Q}],
        "outer": {"kind": "inverse_sqrt", "c": 1.0, "tau": CONVERGENCE_ITERATIONS},
        "replicas": CONVERGENCE_REPLICAS,
        "theta0_range": list(DIVERGENCE_THETA0_RANGE),
        "options": {"engine": "auto"},
    },
    "bias_variance_sweep": {
        "problem": {"name": "counterexample", "params": dict(SWEEP_SETUP)},
        "estimators": [],
        "outer": {"kind": "harmonic", "c": DIVERGENCE_GAMMA_SCALE, "tau": QSTAR_ITERATIONS},
        "replicas": 1,
        "theta0_range": list(SWEEP_THETA0_RANGE),
        "options": _sweep_options(with_qstar=False),
    },
    "qstar_theory_vs_experiment": {
        "problem": {"name": "counterexample", "params": dict(SWEEP_SETUP)},
        "estimators": [],
        "outer": {"kind": "harmonic", "c": DIVERGENCE_GAMMA_SCALE, "tau": QSTAR_ITERATIONS},
        "replicas": QSTAR_REPLICAS,
        "theta0_range": list(SWEEP_THETA0_RANGE),
        "options": _sweep_options(with_qstar=True),
    },
    "qstar_race": {
        "problem": {"name": "counterexample", "params": {**SWEEP_SETUP, "alpha": RACE_ALPHA}},
        "estimators": [{"kind": "fom"}, {"kind": "ufom", "q": "auto"}, {"kind": "ufom", "q": 1.0}],
        "outer": {"kind": "harmonic", "c": DIVERGENCE_GAMMA_SCALE, "tau": RACE_ITERATIONS},
        "replicas": RACE_REPLICAS,
        "theta0_range": list(SWEEP_THETA0_RANGE),
        "options": {"grid_range": list(SWEEP_GRID_RANGE), "grid_points": SWEEP_GRID_POINTS, "target": None},
    },
    "weighted_toy": {
        "problem": {"name": "weighted_toy", "params": {}},
        "estimators": [
            {"kind": "exact_recompute"},
            {"kind": "fom"},
            {"kind": "adaptive_ufom", "bias_scale": TOY_BIAS_SCALE},
        ],
        "inner": {"alpha": TOY_INNER_ALPHA, "r": TOY_INNER_STEPS},
        "outer": {"kind": "inverse_sqrt", "c": TOY_OUTER_STEP, "tau": 1_000_000},
        "replicas": 1,
        "theta0_range": [0.0, 0.0],
        "options": {"budget_iterations": TOY_EXACT_ITERATIONS},
    },
    "verify": {
        "problem": {"name": "counterexample", "params": dict(DIVERGENCE_SETUP)},
        "estimators": [],
        "outer": {"kind": "harmonic", "c": 1.0, "tau": 0},
        "replicas": 1,
        "theta0_range": [0.0, 0.0],
        "options": {"quick": False},
    },
}

_TOP_LEVEL_KEYS = {
    "scenario", "seed", "replicas", "workers", "out", "problem", "estimators",
    "inner", "outer", "theta0_range", "options",
}


# ------------------------------------------------------------
# Internal helpers
# ------------------------------------------------------------

def _check_keys(block: Dict[str, Any], allowed: set, where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise InvalidConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfigError(f"`{where}` must be a number, got {value!r}")
    if not math.isfinite(value):
        raise InvalidConfigError(f"`{where}` must be finite, got {value!r}")
    return float(value)


def _count(value: Any, where: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise InvalidConfigError(f"`{where}` must be an integer >= {minimum}, got {value!r}")
    return value


def _range(value: Any, where: str) -> Tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise InvalidConfigError(f"`{where}` must be a [lo, hi] pair, got {value!r}")
    lo, hi = _number(value[0], where), _number(value[1], where)
    if hi < lo:
        raise InvalidConfigError(f"`{where}` must have lo <= hi, got {value!r}")
    return lo, hi


def _validate_problem(block: Any) -> ProblemConfig:
    if not isinstance(block, dict):
        raise InvalidConfigError("`problem` must be an object with `name` and `params`.")
    _check_keys(block, {"name", "params"}, "problem")
    name = block.get("name")
    if name not in PROBLEM_NAMES:
        raise InvalidConfigError(f"unknown problem {name!r}; expected one of {list(PROBLEM_NAMES)}")
    params = block.get("params", {})
    if not isinstance(params, dict):
        raise InvalidConfigError("`problem.params` must be an object.")
    return ProblemConfig(name, dict(params))


def _validate_estimator(block: Any, index: int) -> EstimatorConfig:
    where = f"estimators[{index}]"
    if not isinstance(block, dict):
        raise InvalidConfigError(f"`{where}` must be an object.")
    _check_keys(block, {"kind", "q", "beta", "q_min", "bias_scale", "C1", "C2", "epsilon"}, where)
    kind = block.get("kind")
    if kind not in ESTIMATOR_KINDS:
        raise InvalidConfigError(f"`{where}.kind` must be one of {list(ESTIMATOR_KINDS)}, got {kind!r}")
    q = block.get("q")
    if kind == "ufom":
        if q != "auto":
            q = _number(q, f"{where}.q") if q is not None else None
            if q is None or not 0.0 < q <= 1.0:
                raise InvalidConfigError(f"`{where}.q` must lie in (0, 1] or be \"auto\", got {block.get('q')!r}")
    elif q is not None:
        raise InvalidConfigError(f"`{where}.q` only applies to kind 'ufom'")
    knobs = {k: _number(block[k], f"{where}.{k}") for k in ("beta", "q_min", "bias_scale", "C1", "C2", "epsilon") if k in block}
    config = EstimatorConfig(kind=kind, q=q, **knobs)
    if not config.auto_q:
        config.to_spec()
    return config


def _validate_inner(block: Any) -> InnerScheduleConfig:
    if block is None:
        return InnerScheduleConfig()
    if not isinstance(block, dict):
        raise InvalidConfigError("`inner` must be an object.")
    _check_keys(block, {"alpha", "r", "alphas"}, "inner")
    if "alphas" in block:
        if "alpha" in block or "r" in block:
            raise InvalidConfigError("`inner` takes either alphas or (alpha, r)")
        alphas = block["alphas"]
        if not isinstance(alphas, list):
            raise InvalidConfigError("`inner.alphas` must be a list of numbers.")
        values = [_number(a, "inner.alphas") for a in alphas]
        if any(a <= 0 for a in values):
            raise InvalidConfigError("`inner.alphas` must all be positive.")
        return InnerScheduleConfig(alphas=values)
    alpha = block.get("alpha")
    if alpha is not None:
        alpha = _number(alpha, "inner.alpha")
        if alpha <= 0:
            raise InvalidConfigError(f"`inner.alpha` must be positive, got {alpha!r}")
    r = block.get("r")
    if r is not None:
        r = _count(r, "inner.r")
    return InnerScheduleConfig(alpha=alpha, r=r)


def _validate_outer(block: Any) -> OuterScheduleConfig:
    if not isinstance(block, dict):
        raise InvalidConfigError("`outer` must be an object.")
    _check_keys(block, {"kind", "c", "tau"}, "outer")
    kind = block.get("kind")
    if kind not in SCHEDULE_KINDS:
        raise InvalidConfigError(f"`outer.kind` must be one of {list(SCHEDULE_KINDS)}, got {kind!r}")
    c = _number(block.get("c", 1.0), "outer.c")
    if c <= 0:
        raise InvalidConfigError(f"`outer.c` must be positive, got {c!r}")
    tau = _count(block.get("tau"), "outer.tau")
    return OuterScheduleConfig(kind, c, tau)


def _validate_options(scenario: str, options: Any) -> Dict[str, Any]:
    if not isinstance(options, dict):
        raise InvalidConfigError("`options` must be an object.")
    defaults = SCENARIO_DEFAULTS[scenario]["options"]
    _check_keys(options, set(defaults), f"options for scenario '{scenario}'")
    merged = {**defaults, **options}
    for key in ("alpha_range", "grid_range", "q_range"):
        if key in merged:
            merged[key] = list(_range(merged[key], f"options.{key}"))
    for key in ("alpha_points", "grid_points", "q_points", "iterations", "budget_iterations"):
        if key in merged:
            merged[key] = _count(merged[key], f"options.{key}", minimum=1)
    if "alpha_range" in merged and merged["alpha_range"][0] <= 0:
        raise InvalidConfigError("`options.alpha_range` must be positive.")
    if "q_range" in merged and not (0.0 < merged["q_range"][0] and merged["q_range"][1] <= 1.0):
        raise InvalidConfigError("`options.q_range` must lie in (0, 1].")
    if "late_fraction" in merged:
        frac = _number(merged["late_fraction"], "options.late_fraction")
        if not 0.0 < frac <= 1.0:
            raise InvalidConfigError("`options.late_fraction` must lie in (0, 1].")
    if "quick" in merged and not isinstance(merged["quick"], bool):
        raise InvalidConfigError("`options.quick` must be true or false.")
    if "engine" in merged and merged["engine"] not in ENGINES:
        raise InvalidConfigError(f"`options.engine` must be one of {list(ENGINES)}, got {merged['engine']!r}")
    if merged.get("target") is not None:
        target = _number(merged["target"], "options.target")
        if target <= 0:
            raise InvalidConfigError("`options.target` must be positive.")
    return merged


def _merge(base: Dict[str, Any], layer: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in layer.items():
        if value is None:
            continue
        if key == "options" and isinstance(value, dict):
            out["options"] = {**out.get("options", {}), **value}
        else:
            out[key] = copy.deepcopy(value)
    return out


# ------------------------------------------------------------
# Public API
# ------------------------------------------------------------

def config_from_dict(raw: Dict[str, Any], scenario: Optional[str] = None,
                     overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Validate `raw` over the scenario defaults, then apply CLI `overrides`
    (keys seed, replicas, iterations, workers, out; None values are skipped).
    """
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_LEVEL_KEYS, "config")
    file_scenario = raw.get("scenario")
    if scenario is not None and file_scenario is not None and file_scenario != scenario:
        raise InvalidConfigError(f"config is for scenario {file_scenario!r}, not {scenario!r}")
    scenario = scenario or file_scenario
    if scenario not in SCENARIOS:
        raise InvalidConfigError(f"unknown scenario {scenario!r}; expected one of {list(SCENARIOS)}")

    defaults = {"seed": 0, "workers": 1, "out": f"results/{scenario}", "inner": None,
                **copy.deepcopy(SCENARIO_DEFAULTS[scenario])}
    raw_problem = raw.get("problem")
    if isinstance(raw_problem, dict) and "inner" not in raw and raw_problem.get("name") != defaults["problem"]["name"]:
        # the default inner schedule belongs to the default problem
        defaults["inner"] = None
    merged = _merge(defaults, {k: v for k, v in raw.items() if k != "scenario"})

    overrides = dict(overrides or {})
    _check_keys(overrides, {"seed", "replicas", "iterations", "workers", "out"}, "overrides")
    iterations = overrides.pop("iterations", None)
    merged = _merge(merged, overrides)
    if iterations is not None:
        if "iterations" in merged["options"]:
            merged["options"]["iterations"] = iterations
        else:
            merged["outer"] = {**merged["outer"], "tau": iterations}

    estimators = merged.get("estimators", [])
    if not isinstance(estimators, list):
        raise InvalidConfigError("`estimators` must be a list.")

    return ExperimentConfig(
        scenario=scenario,
        problem=_validate_problem(merged["problem"]),
        estimators=[_validate_estimator(block, i) for i, block in enumerate(estimators)],
        inner=_validate_inner(merged.get("inner")),
        outer=_validate_outer(merged["outer"]),
        seed=_count(merged["seed"], "seed"),
        replicas=_count(merged["replicas"], "replicas", minimum=1),
        workers=_count(merged["workers"], "workers", minimum=1),
        out=Path(str(merged["out"])),
        theta0_range=_range(merged["theta0_range"], "theta0_range"),
        options=_validate_options(scenario, merged.get("options", {})),
    )


def load_config(path: Optional[Path], scenario: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an experiment config file.

    Args:
        path: Path to a JSON config, or None to run on scenario defaults.
        scenario: Scenario name; must agree with the file's `scenario` key if both are given.
        overrides: CLI overrides applied last.

    Returns:
        ExperimentConfig: A validated configuration object.

    Raises:
        InvalidConfigError: If the file is missing, unreadable,
                            or contains invalid fields.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        if not path.exists():
            raise InvalidConfigError(f"Config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"Invalid JSON in {path}: {exc}") from exc
    return config_from_dict(raw, scenario, overrides)
