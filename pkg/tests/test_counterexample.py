import numpy as np
import pytest

from ablo.errors import ClosedFormDomainError, DegenerateFamilyError, InvalidConfigError, PreconditionError
from ablo.estimators import InnerSchedule, exact_gradient_cached, fom_gradient, inner_rollout, meta_gradient
from ablo.problems import counterexample_spec, make_problem
from ablo.problems.counterexample import (
    PIECES,
    as_problem,
    build_counterexample,
    closed_form_fom_grad,
    closed_form_full_grad,
    f_eval,
    f_prime,
    f_second,
    piece_values,
    regularity,
    shared_interval,
    stationary_stats,
)


def test_reference_constants(divergence_spec):
    assert divergence_spec.b2 == pytest.approx(17.39, abs=0.01)
    assert divergence_spec.A == pytest.approx(12.59, abs=0.01)
    assert divergence_spec.b1 == 0.0


def test_fixed_point_has_twice_the_divergence_level(divergence_spec):
    stats = stationary_stats(divergence_spec)
    assert stats.limit_grad_sq == pytest.approx(0.12, abs=1e-9)
    assert divergence_spec.D == pytest.approx(0.06, abs=1e-9)


def test_true_gradient_at_fom_fixed_point(divergence_spec, counterexample, divergence_schedule):
    stats = stationary_stats(divergence_spec)
    x_star = np.array([stats.x_star])
    fom_mean = sum(0.5 * fom_gradient(counterexample, x_star, task, divergence_schedule).grad
                   for task, _ in counterexample.task_distribution())
    assert abs(float(fom_mean[0])) < 1e-10
    g = meta_gradient(counterexample, x_star, divergence_schedule)
    assert float(g[0]) ** 2 == pytest.approx(0.12, rel=1e-9)


@pytest.mark.parametrize("a,A", [(0.5, 12.59), (1.5, 3.0), (0.01, 0.5)])
def test_pieces_join_with_matching_derivatives(a, A):
    for z, left, right in ((A, PIECES[0], PIECES[1]), (A + 1.0, PIECES[1], PIECES[2])):
        lhs = piece_values(a, A, z, left)
        rhs = piece_values(a, A, z, right)
        for l, r in zip(lhs, rhs):
            assert float(l) == pytest.approx(float(r), abs=1e-10)


def test_losses_are_convex_with_bounded_slope(divergence_spec):
    L = regularity(divergence_spec)
    x = np.linspace(-80.0, 100.0, 20001)
    for i in (1, 2):
        assert np.all(f_second(divergence_spec, i, x) >= 0.0)
        assert np.all(f_second(divergence_spec, i, x) <= L.L2 + 1e-12)
        assert np.all(np.abs(f_prime(divergence_spec, i, x)) <= L.L1 + 1e-9)


def test_slope_is_strictly_increasing_between_the_tails(divergence_spec):
    A = divergence_spec.A
    for i, m in zip((1, 2), divergence_spec.minimizers):
        x = np.linspace(m - A - 0.99, m + A + 0.99, 40001)
        assert np.all(np.diff(f_prime(divergence_spec, i, x)) > 0.0)
        wide = np.linspace(m - 5 * A, m + 5 * A, 40001)
        assert np.all(np.diff(f_prime(divergence_spec, i, wide)) >= 0.0)


def test_tail_slope_attains_l1(divergence_spec):
    L = regularity(divergence_spec)
    x = np.linspace(-200.0, 200.0, 4001)
    steepest = max(float(np.max(np.abs(f_prime(divergence_spec, i, x)))) for i in (1, 2))
    assert steepest == pytest.approx(L.L1, rel=1e-12)


@pytest.mark.parametrize("alpha,r", [(0.05, 20), (0.1, 10), (0.3, 5), (0.6, 1), (0.6, 15)])
def test_inner_rollouts_stay_in_shared_interval(alpha, r):
    spec = counterexample_spec({"a1": 0.5, "a2": 1.5, "b2": 10.0, "A": 10.0, "alpha": alpha, "r": r})
    problem = as_problem(spec)
    lo, hi = shared_interval(spec)
    theta = np.linspace(lo, hi, 101)
    schedule = InnerSchedule.constant(alpha, r)
    for task, _ in problem.task_distribution():
        phi_r, trajectory, _ = inner_rollout(problem, theta, task, schedule, keep_trajectory=True)
        for phi in trajectory + [phi_r]:
            assert np.all(phi >= lo - 1e-12) and np.all(phi <= hi + 1e-12)


def test_slope_matches_finite_differences(divergence_spec):
    h = 1e-6
    x = np.array([-40.0, -13.2, -5.0, 0.3, 11.0, 24.9, 30.5, 60.0])
    for i in (1, 2):
        numeric = (f_eval(divergence_spec, i, x + h) - f_eval(divergence_spec, i, x - h)) / (2 * h)
        np.testing.assert_allclose(f_prime(divergence_spec, i, x), numeric, rtol=1e-6, atol=1e-6)


def test_far_tails_stay_finite(divergence_spec):
    x = np.array([-1e12, 1e12])
    assert np.all(np.isfinite(f_eval(divergence_spec, 2, x)))
    assert np.all(np.isfinite(f_prime(divergence_spec, 2, x)))


def test_closed_forms_match_estimators(divergence_spec, counterexample, divergence_schedule):
    lo, hi = shared_interval(divergence_spec)
    assert lo == pytest.approx(-1.0, abs=0.01)
    for theta in (lo + 0.5, 3.0, 8.0, hi - 0.5):
        for task, _ in counterexample.task_distribution():
            i = task.payload
            fo = fom_gradient(counterexample, np.array([theta]), task, divergence_schedule).grad
            ex = exact_gradient_cached(counterexample, np.array([theta]), task, divergence_schedule).grad
            assert float(fo[0]) == pytest.approx(closed_form_fom_grad(divergence_spec, i, theta), rel=1e-10)
            assert float(ex[0]) == pytest.approx(closed_form_full_grad(divergence_spec, i, theta), rel=1e-10)


def test_closed_form_outside_shared_interval(divergence_spec):
    with pytest.raises(ClosedFormDomainError) as info:
        closed_form_fom_grad(divergence_spec, 1, 40.0)
    assert info.value.theta == 40.0


def test_equal_curvatures_are_degenerate():
    with pytest.raises(DegenerateFamilyError):
        build_counterexample(a1=0.5, a2=0.5, D=0.06, alpha=0.1, r=10)


@pytest.mark.parametrize("kwargs", [
    {"a1": 0.5, "a2": 10.0, "D": 0.06, "alpha": 0.1, "r": 10},
    {"a1": 0.5, "a2": 1.5, "D": 0.0, "alpha": 0.1, "r": 10},
])
def test_invalid_family_parameters(kwargs):
    with pytest.raises(PreconditionError):
        build_counterexample(**kwargs)


def test_bad_task_index(divergence_spec):
    with pytest.raises(PreconditionError):
        f_eval(divergence_spec, 3, 0.0)


def test_spec_from_explicit_offsets():
    spec = counterexample_spec({"a1": 0.5, "a2": 1.5, "b2": 10.0, "A": 10.0, "alpha": 0.01, "r": 10})
    assert spec.b2 == 10.0 and spec.A == 10.0
    with pytest.raises(InvalidConfigError):
        counterexample_spec({"a1": 0.5, "a2": 1.5, "b2": 10.0, "D": 0.1, "alpha": 0.01, "r": 10})
    with pytest.raises(InvalidConfigError):
        counterexample_spec({"a1": 0.5, "a2": 1.5, "alpha": 0.01, "r": 10})


def test_padded_problem_ignores_extra_coordinates(divergence_schedule):
    from ablo.constants import DIVERGENCE_SETUP

    flat = make_problem("counterexample", dict(DIVERGENCE_SETUP))
    padded = make_problem("counterexample", {**DIVERGENCE_SETUP, "dim": 3})
    assert not padded.elementwise
    g1 = meta_gradient(flat, np.array([2.0]), divergence_schedule)
    g3 = meta_gradient(padded, np.array([2.0, -4.0, 7.0]), divergence_schedule)
    assert float(g3[0]) == pytest.approx(float(g1[0]), rel=1e-12)
    np.testing.assert_array_equal(g3[1:], 0.0)
