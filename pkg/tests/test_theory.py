import numpy as np
import pytest

from ablo.errors import IndeterminateConditionError, InvalidConfigError
from ablo.estimators import InnerSchedule
from ablo.problems.base import RegularityConstants
from ablo.theory import (
    CostModel,
    convergence_rhs,
    d_bound,
    expected_time,
    iterations_to_precision,
    lipschitz_c,
    optimal_q,
    qstar_coefficients,
    qstar_polynomial,
    ufom_beats_exact,
    v_bound,
)
from ablo.verification import bound_dominance

REFERENCE_COST = CostModel(C1=1.0, C2=1.0, r=10, epsilon=0.0)
CONSTANTS = RegularityConstants(M1=1.0, M2=0.0, L1=2.0, L2=3.0, L3=4.0)


def test_cost_model_terms():
    assert REFERENCE_COST.C_det == 11.0
    assert REFERENCE_COST.C_rnd == 55.0


@pytest.mark.parametrize("kwargs", [
    {"C1": 0.0, "C2": 1.0, "r": 10},
    {"C1": 1.0, "C2": 1.0, "r": -1},
    {"C1": 1.0, "C2": 1.0, "r": 10, "epsilon": 0.5},
])
def test_cost_model_validation(kwargs):
    with pytest.raises(InvalidConfigError):
        CostModel(**kwargs)


def test_reference_optimal_q():
    q = optimal_q(0.1, 1.0, REFERENCE_COST)
    roots = np.roots(qstar_coefficients(0.1, 1.0, REFERENCE_COST))
    inside = [float(z.real) for z in roots if abs(z.imag) < 1e-12 and 0.0 < z.real < 1.0]
    assert q == pytest.approx(0.2736, abs=1e-3)
    assert inside == [pytest.approx(q, abs=1e-12)]
    assert qstar_polynomial(0.0, 0.1, 1.0, REFERENCE_COST) < 0.0 < qstar_polynomial(1.0, 0.1, 1.0, REFERENCE_COST)
    t = expected_time(q, 0.1, 1.0, REFERENCE_COST)
    assert t < min(expected_time(1.0, 0.1, 1.0, REFERENCE_COST), expected_time(0.02, 0.1, 1.0, REFERENCE_COST))


def test_expected_time_minimum_sits_at_optimal_q():
    grid = np.linspace(0.001, 1.0, 1000)
    times = [expected_time(q, 0.1, 1.0, REFERENCE_COST) for q in grid]
    q_grid = grid[int(np.argmin(times))]
    assert abs(q_grid - optimal_q(0.1, 1.0, REFERENCE_COST)) <= grid[1] - grid[0]


def test_condition_and_fallbacks():
    # threshold is C_rnd / (2 (C_det + C_rnd)) = 5/12
    assert ufom_beats_exact(0.4, 1.0, REFERENCE_COST)
    assert not ufom_beats_exact(0.42, 1.0, REFERENCE_COST)
    assert optimal_q(0.42, 1.0, REFERENCE_COST) == 1.0
    assert optimal_q(0.0, 1.0, REFERENCE_COST) == 0.0
    with pytest.raises(IndeterminateConditionError):
        ufom_beats_exact(0.1, 0.0, REFERENCE_COST)
    with pytest.raises(InvalidConfigError):
        optimal_q(-0.1, 1.0, REFERENCE_COST)


def test_epsilon_widens_the_condition():
    slack = REFERENCE_COST.with_epsilon(0.25)
    assert not ufom_beats_exact(0.3, 1.0, slack)
    assert ufom_beats_exact(0.3, 1.0, REFERENCE_COST)


def test_scaling_costs_scales_time_only():
    scaled = CostModel(C1=3.0, C2=3.0, r=10)
    assert optimal_q(0.1, 1.0, scaled) == pytest.approx(optimal_q(0.1, 1.0, REFERENCE_COST), rel=1e-12)
    assert expected_time(0.3, 0.1, 1.0, scaled) == pytest.approx(3.0 * expected_time(0.3, 0.1, 1.0, REFERENCE_COST))


def test_optimal_q_decreases_as_bias_shrinks():
    qs = [optimal_q(d2, 1.0, REFERENCE_COST) for d2 in (0.3, 0.1, 0.01, 0.001)]
    assert all(a > b for a, b in zip(qs, qs[1:]))


def test_bounds_without_inner_steps():
    schedule = InnerSchedule.constant(0.1, 0)
    assert d_bound(CONSTANTS, schedule) == 0.0
    assert v_bound(CONSTANTS, schedule) == pytest.approx(4.0)
    # L2 + L2 M1 + M1 L2 (1 + M1) with alpha_0 = 0
    assert lipschitz_c(CONSTANTS, schedule).C == pytest.approx(12.0)


def test_single_step_bias_bound():
    schedule = InnerSchedule.constant(0.1, 1)
    assert d_bound(CONSTANTS, schedule) == pytest.approx(2.0 * 2.0 * 3.0 * 0.1 * 1.3)


def test_bounds_grow_with_step_size_and_length():
    small = InnerSchedule.constant(0.01, 10)
    large = InnerSchedule.constant(0.05, 10)
    longer = InnerSchedule.constant(0.01, 20)
    for bound in (d_bound, v_bound):
        assert bound(CONSTANTS, small) < bound(CONSTANTS, large)
        assert bound(CONSTANTS, small) < bound(CONSTANTS, longer)
    lip = lipschitz_c(CONSTANTS, small)
    assert lip.A.shape == lip.B.shape == (11,)
    assert float(lip) == lip.C > 0


def test_convergence_rhs():
    assert convergence_rhs(2.5, 10.0, 0.1, 1.0, 1.0, [0.0, 0.0]) == 2.5
    assert convergence_rhs(2.5, 10.0, 1.0, 7.0, 1.0, [1.0, 0.5]) == pytest.approx(2.5 + 10.0 * 1.25)
    assert convergence_rhs(0.0, 1.0, 0.5, 1.0, 1.0, [1.0]) == pytest.approx(2.0)


def test_iterations_to_precision():
    assert iterations_to_precision(0.01, 1.0, 0.0, 1.0) == pytest.approx(1e4)
    assert iterations_to_precision(0.01, 0.5, 1.0, 1.0) == pytest.approx(4e4)
    assert iterations_to_precision(0.01, 1.0, 0.0, 0.0) == 0.0
    with pytest.raises(InvalidConfigError):
        iterations_to_precision(0.0, 1.0, 0.0, 1.0)


def test_grid_statistics_stay_below_analytic_bounds():
    ok, detail = bound_dominance([1e-3, 2e-2, 5e-2], 2001)
    assert ok, detail
