import numpy as np
import pytest

from ablo.errors import DivergentRolloutError, InvalidConfigError
from ablo.estimators import (
    Branch,
    InnerSchedule,
    branch_call_counts,
    exact_gradient_cached,
    exact_gradient_recompute,
    expected_call_counts,
    fom_and_exact,
    fom_gradient,
    inner_rollout,
    meta_gradient,
    ufom_gradient,
)


def _quadratic_exact(problem, theta, alpha, r):
    c = (1.0 - alpha) ** r
    phi_r = c * problem.v0 + (1.0 - c) * problem.w * theta
    return phi_r * (1.0 - c) * problem.w


def test_rollout_matches_closed_form(quadratic):
    schedule = InnerSchedule.constant(0.3, 5)
    theta = np.array([0.4])
    phi_r, trajectory, counter = inner_rollout(quadratic, theta, quadratic.sample_task(None), schedule,
                                               keep_trajectory=True)
    np.testing.assert_allclose(phi_r, quadratic.closed_form_rollout(theta, 0.3, 5), rtol=1e-14)
    assert len(trajectory) == 5
    assert counter.grad_evals == 5


@pytest.mark.parametrize("theta", [-2.0, 0.0, 0.4, 3.5])
def test_exact_gradient_on_scalar_quadratic(quadratic, theta):
    schedule = InnerSchedule.constant(0.3, 5)
    task = quadratic.sample_task(None)
    want = _quadratic_exact(quadratic, theta, 0.3, 5)
    cached = exact_gradient_cached(quadratic, np.array([theta]), task, schedule)
    recompute = exact_gradient_recompute(quadratic, np.array([theta]), task, schedule)
    assert float(cached.grad[0]) == pytest.approx(want, rel=1e-12, abs=1e-14)
    assert float(recompute.grad[0]) == pytest.approx(float(cached.grad[0]), rel=1e-12, abs=1e-14)


def test_fom_is_blind_on_scalar_quadratic(quadratic):
    schedule = InnerSchedule.constant(0.3, 5)
    est = fom_gradient(quadratic, np.array([1.7]), quadratic.sample_task(None), schedule)
    assert est.branch is Branch.FOM
    np.testing.assert_array_equal(est.grad, 0.0)


def test_zero_inner_steps(quadratic):
    schedule = InnerSchedule.constant(0.3, 0)
    task = quadratic.sample_task(None)
    est = exact_gradient_cached(quadratic, np.array([2.0]), task, schedule)
    fo = fom_gradient(quadratic, np.array([2.0]), task, schedule)
    np.testing.assert_array_equal(est.grad, fo.grad)
    assert (est.counter.grad_evals, est.counter.hvp_evals) == (1, 0)


def test_cached_and_recompute_agree_with_varying_steps(counterexample):
    schedule = InnerSchedule((0.02, 0.1, 0.05, 0.3, 0.07))
    for task, _ in counterexample.task_distribution():
        for theta in (-30.0, -1.5, 4.0, 26.0):
            a = exact_gradient_cached(counterexample, np.array([theta]), task, schedule).grad
            b = exact_gradient_recompute(counterexample, np.array([theta]), task, schedule).grad
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("r", [1, 2, 10])
def test_call_counts_per_branch(quadratic, r):
    schedule = InnerSchedule.constant(0.1, r)
    task = quadratic.sample_task(None)
    theta = np.array([1.0])
    cached = exact_gradient_cached(quadratic, theta, task, schedule).counter
    recompute = exact_gradient_recompute(quadratic, theta, task, schedule).counter
    skip = ufom_gradient(quadratic, theta, task, schedule, 0.5, xi=0).counter
    correct = ufom_gradient(quadratic, theta, task, schedule, 0.5, xi=1).counter
    assert (cached.grad_evals, cached.hvp_evals) == (r + 1, r)
    assert (recompute.grad_evals, recompute.hvp_evals) == (r + 1 + r * (r - 1) // 2, r)
    assert (skip.grad_evals, skip.hvp_evals) == branch_call_counts(r, corrected=False) == (r + 1, 0)
    assert (correct.grad_evals, correct.hvp_evals) == branch_call_counts(r, corrected=True)
    assert cached.peak_states == r
    assert recompute.peak_states == skip.peak_states == correct.peak_states == 1


def test_expected_call_counts():
    assert expected_call_counts(10, 0.1) == pytest.approx((15.5, 1.0))
    assert expected_call_counts(10, 1.0) == pytest.approx((56.0, 10.0))


def test_ufom_branches(counterexample, divergence_schedule):
    theta = np.array([20.0])
    task = counterexample.task_distribution()[1][0]
    fo, ex = fom_and_exact(counterexample, theta, task, divergence_schedule)

    skip = ufom_gradient(counterexample, theta, task, divergence_schedule, 0.25, xi=0)
    assert skip.branch is Branch.UFOM_SKIP and skip.bias_sq is None
    np.testing.assert_allclose(skip.grad, fo, rtol=1e-15)

    hit = ufom_gradient(counterexample, theta, task, divergence_schedule, 0.25, xi=1)
    assert hit.branch is Branch.UFOM_CORRECT
    np.testing.assert_allclose(hit.grad, fo + (ex - fo) / 0.25, rtol=1e-12)
    assert hit.bias_sq == pytest.approx(float(np.sum((fo - ex) ** 2)), rel=1e-12)
    assert hit.exact_sq == pytest.approx(float(np.sum(ex ** 2)), rel=1e-12)

    always = ufom_gradient(counterexample, theta, task, divergence_schedule, 1.0, np.random.default_rng(0))
    assert always.xi == 1
    np.testing.assert_allclose(always.grad, ex, rtol=1e-14)


def test_ufom_mean_is_exact_over_both_gate_outcomes(counterexample, divergence_schedule):
    q = 0.1
    theta = np.array([-7.0])
    for task, _ in counterexample.task_distribution():
        g0 = ufom_gradient(counterexample, theta, task, divergence_schedule, q, xi=0).grad
        g1 = ufom_gradient(counterexample, theta, task, divergence_schedule, q, xi=1).grad
        ex = exact_gradient_cached(counterexample, theta, task, divergence_schedule).grad
        np.testing.assert_allclose((1 - q) * g0 + q * g1, ex, rtol=1e-10)


@pytest.mark.parametrize("q", [0.0, -0.1, 1.5, float("nan")])
def test_invalid_probability(quadratic, q):
    schedule = InnerSchedule.constant(0.1, 3)
    with pytest.raises(InvalidConfigError):
        ufom_gradient(quadratic, np.array([1.0]), quadratic.sample_task(None), schedule, q, np.random.default_rng(0))


def test_ufom_needs_a_stream_or_forced_gate(quadratic):
    schedule = InnerSchedule.constant(0.1, 3)
    with pytest.raises(InvalidConfigError):
        ufom_gradient(quadratic, np.array([1.0]), quadratic.sample_task(None), schedule, 0.5)
    with pytest.raises(InvalidConfigError):
        ufom_gradient(quadratic, np.array([1.0]), quadratic.sample_task(None), schedule, 0.5, xi=2)


def test_nonpositive_step_sizes_are_rejected():
    with pytest.raises(InvalidConfigError):
        InnerSchedule((0.1, 0.0))
    with pytest.raises(InvalidConfigError):
        InnerSchedule.constant(0.1, -1)


def test_divergent_rollout_reports_the_step(quadratic):
    schedule = InnerSchedule.constant(1e154, 4)
    with pytest.raises(DivergentRolloutError) as info:
        inner_rollout(quadratic, np.array([1e154]), quadratic.sample_task(None), schedule)
    assert info.value.inner_step >= 1


def test_meta_gradient_broadcasts_over_replicas(counterexample, divergence_schedule):
    thetas = np.array([-10.0, 0.0, 5.0, 30.0])
    batch = meta_gradient(counterexample, thetas, divergence_schedule)
    single = [float(meta_gradient(counterexample, np.array([t]), divergence_schedule)[0]) for t in thetas]
    np.testing.assert_allclose(batch, single, rtol=1e-14)
