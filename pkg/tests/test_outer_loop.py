import math
import pickle

import numpy as np
import pytest

from ablo.constants import DIVERGENCE_SETUP
from ablo.errors import DivergentRolloutError, InvalidConfigError, OuterDivergenceError, PreconditionError
from ablo.estimators import InnerSchedule, branch_call_counts
from ablo.outer_loop import (
    AdaptiveState,
    Diagnostics,
    EstimatorSpec,
    OuterSchedule,
    RUN_COLUMNS,
    adaptive_update,
    choose_q,
    nominal_q,
    run_replicas,
    run_sgd,
    run_sgd_batch,
)
from ablo.problems import make_problem
from ablo.problems.counterexample import stationary_stats
from ablo.theory import CostModel, optimal_q
from ablo.utils.rng import replica_seeds


def test_schedule_steps():
    assert OuterSchedule.harmonic(10.0, 5).gammas().tolist() == [10.0, 5.0, 10.0 / 3, 2.5, 2.0]
    assert OuterSchedule.inverse_sqrt(3).gamma(4) == 0.5
    assert OuterSchedule.constant(0.1, 3).gammas().tolist() == [0.1, 0.1, 0.1]
    assert not OuterSchedule.constant(0.1, 3).satisfies_step_conditions
    with pytest.raises(ValueError):
        OuterSchedule.harmonic(1.0, 3).gamma(0)
    with pytest.raises(InvalidConfigError):
        OuterSchedule("cosine", 1.0, 3)


def test_adaptive_state_debiasing():
    state = AdaptiveState(beta=0.9, bias_scale=0.5)
    assert state.debiased() is None
    state = adaptive_update(state, bias_sq=2.0, exact_sq=4.0)
    # one update: (1 - beta) x / (1 - beta) == x
    assert state.debiased() == pytest.approx((0.5 * 2.0, 4.0))
    state = adaptive_update(state, bias_sq=0.0, exact_sq=0.0)
    d2, v2 = state.debiased()
    assert d2 == pytest.approx(0.5 * 0.9 * 0.1 * 2.0 / (1 - 0.81))
    assert v2 == pytest.approx(0.9 * 0.1 * 4.0 / (1 - 0.81))


@pytest.mark.parametrize("kwargs", [{"beta": 1.0}, {"q_min": 0.0}, {"bias_scale": 0.0}])
def test_adaptive_state_validation(kwargs):
    with pytest.raises(InvalidConfigError):
        AdaptiveState(**kwargs)


def test_choose_q_before_and_after_updates():
    cost = CostModel(1.0, 1.0, 10)
    state = AdaptiveState(q_min=0.05)
    assert choose_q(state, cost) == 1.0
    state = adaptive_update(state, 0.1, 1.0)
    assert choose_q(state, cost) == pytest.approx(optimal_q(0.1, 1.0, cost))
    tiny = adaptive_update(AdaptiveState(q_min=0.05), 1e-12, 1.0)
    assert choose_q(tiny, cost) == 0.05
    large = adaptive_update(AdaptiveState(q_min=0.05), 5.0, 1.0)
    assert choose_q(large, cost) == 1.0


def test_estimator_spec():
    assert EstimatorSpec.ufom(0.1).label == "ufom_q0.1"
    assert EstimatorSpec.fom().label == "fom"
    assert EstimatorSpec.adaptive_ufom(bias_scale=0.1).initial_state().bias_scale == 0.1
    with pytest.raises(InvalidConfigError):
        EstimatorSpec("ufom")
    with pytest.raises(InvalidConfigError):
        EstimatorSpec.ufom(0.0)
    with pytest.raises(InvalidConfigError):
        EstimatorSpec("sgd")


def test_run_record_rows(counterexample, divergence_schedule):
    record = run_sgd(counterexample, EstimatorSpec.ufom(0.5), divergence_schedule,
                     OuterSchedule.harmonic(10.0, 20), [3.0], seed=7)
    assert len(record.rows) == 21
    assert record.rows[0].k == 0 and record.rows[0].grad_calls == 0
    r = divergence_schedule.r
    for prev, row in zip(record.rows, record.rows[1:]):
        spent = (row.grad_calls - prev.grad_calls, row.hvp_calls - prev.hvp_calls)
        assert spent == branch_call_counts(r, corrected=bool(row.xi))
        assert row.q == 0.5
        assert row.min_grad_norm_sq <= prev.min_grad_norm_sq
    rows = record.csv_rows(skip_initial=True)
    assert len(rows) == 20 and all(len(row) == len(RUN_COLUMNS) for row in rows)
    assert record.function_calls[-1] == record.rows[-1].grad_calls + record.rows[-1].hvp_calls


def test_traces_leave_q_empty_for_fom(counterexample, divergence_schedule):
    assert nominal_q(EstimatorSpec.fom()) is None
    assert nominal_q(EstimatorSpec.exact_cached()) == 1.0
    assert nominal_q(EstimatorSpec.ufom(0.2)) == 0.2
    record = run_sgd(counterexample, EstimatorSpec.fom(), divergence_schedule, OuterSchedule.harmonic(10.0, 3),
                     [1.0], seed=0)
    assert all(row.q is None for row in record.rows)
    q_col = RUN_COLUMNS.index("q")
    assert all(row[q_col] is None for row in record.csv_rows(skip_initial=True))


def test_runs_are_reproducible(counterexample, divergence_schedule):
    outer = OuterSchedule.harmonic(10.0, 50)
    a = run_sgd(counterexample, EstimatorSpec.ufom(0.2), divergence_schedule, outer, [1.0], seed=3)
    b = run_sgd(counterexample, EstimatorSpec.ufom(0.2), divergence_schedule, outer, [1.0], seed=3)
    assert a.csv_rows() == b.csv_rows()


def test_gate_stream_is_independent_of_task_stream(counterexample, divergence_schedule):
    outer = OuterSchedule.harmonic(10.0, 200)
    a = run_sgd(counterexample, EstimatorSpec.ufom(0.3), divergence_schedule, outer, [1.0], seed=(5, 1))
    b = run_sgd(counterexample, EstimatorSpec.ufom(0.3), divergence_schedule, outer, [1.0], seed=(5, 2))
    assert [row.xi for row in a.rows] != [row.xi for row in b.rows]
    assert a.seed == "5/1"


def test_budget_stops_before_overspending(counterexample, divergence_schedule):
    r = divergence_schedule.r
    per_exact = sum(branch_call_counts(r, corrected=True))
    record = run_sgd(counterexample, EstimatorSpec.exact_recompute(), divergence_schedule,
                     OuterSchedule.harmonic(10.0, 1000), [3.0], seed=0, budget=5 * per_exact)
    assert record.rows[-1].k == 5
    assert record.function_calls[-1] == 5 * per_exact


def test_adaptive_run_logs_updates(counterexample, divergence_schedule):
    spec = EstimatorSpec.adaptive_ufom(beta=0.9, q_min=0.05)
    record = run_sgd(counterexample, spec, divergence_schedule, OuterSchedule.harmonic(10.0, 100), [20.0], seed=1)
    assert record.rows[1].q == 1.0
    qs = [row.q for row in record.rows[1:]]
    assert all(0.05 <= q <= 1.0 for q in qs)
    assert len(record.adaptive_log) == sum(row.xi for row in record.rows[1:])
    assert record.final_state.k_upd == len(record.adaptive_log)
    assert record.rows[-1].d2_bar is not None


def test_diagnostics_can_be_switched_off(counterexample, divergence_schedule):
    record = run_sgd(counterexample, EstimatorSpec.fom(), divergence_schedule, OuterSchedule.harmonic(1.0, 3),
                     [0.0], seed=0, diagnostics=Diagnostics(exact_gradient=False, objective=True))
    assert record.rows[-1].grad_norm_sq is None
    assert record.rows[-1].objective is not None


def test_clip_bounds_every_step(counterexample, divergence_schedule):
    record = run_sgd(counterexample, EstimatorSpec.ufom(0.05), divergence_schedule, OuterSchedule.constant(1.0, 30),
                     [25.0], seed=4, clip=0.1)
    thetas = [float(row.theta[0]) for row in record.rows]
    assert max(abs(b - a) for a, b in zip(thetas, thetas[1:])) <= 0.1 + 1e-12


def test_outer_divergence_is_reported(quadratic):
    schedule = InnerSchedule.constant(0.5, 2)
    with pytest.raises((OuterDivergenceError, DivergentRolloutError)):
        run_sgd(quadratic, EstimatorSpec.exact_cached(), schedule, OuterSchedule.constant(1e308, 5), [1.0], seed=0)


def test_theta0_shape_is_checked(counterexample, divergence_schedule):
    with pytest.raises(InvalidConfigError):
        run_sgd(counterexample, EstimatorSpec.fom(), divergence_schedule, OuterSchedule.harmonic(1.0, 1),
                [1.0, 2.0], seed=0)


def test_replicas_in_worker_processes_match_serial(counterexample, divergence_schedule):
    outer = OuterSchedule.harmonic(10.0, 15)
    seeds = replica_seeds(11, 3)
    theta0s = [[-5.0], [0.0], [12.0]]
    serial = run_replicas(counterexample, EstimatorSpec.ufom(0.1), divergence_schedule, outer, theta0s, seeds)
    parallel = run_replicas(counterexample, EstimatorSpec.ufom(0.1), divergence_schedule, outer, theta0s, seeds,
                            workers=2)
    assert [r.csv_rows() for r in serial] == [r.csv_rows() for r in parallel]


def test_errors_survive_pickling():
    err = DivergentRolloutError(3, "inner gradient").at_outer_iteration(9)
    back = pickle.loads(pickle.dumps(err))
    assert (back.inner_step, back.outer_iteration) == (3, 9)
    assert str(back) == str(err)


def test_batch_accounting(counterexample, divergence_schedule):
    outer = OuterSchedule.harmonic(10.0, 40)
    theta0 = np.linspace(-10.0, 30.0, 8)
    batch = run_sgd_batch(counterexample, EstimatorSpec.ufom(0.3), divergence_schedule, outer, theta0, seed=2)
    assert batch.theta.shape == batch.grad_abs.shape == (41, 8)
    g0, _ = branch_call_counts(divergence_schedule.r, corrected=False)
    steps_g = np.diff(batch.grad_calls, axis=0)
    steps_h = np.diff(batch.hvp_calls, axis=0)
    corrected = steps_h > 0
    assert np.all(steps_g[~corrected] == g0)
    assert np.all(steps_h[corrected] == divergence_schedule.r)
    assert batch.mean_calls()[-1] == pytest.approx(batch.function_calls[-1].mean())
    assert batch.se_curve().shape == (41,)


def test_batch_rejects_unsupported_inputs(divergence_schedule):
    padded = make_problem("counterexample", {**DIVERGENCE_SETUP, "dim": 2})
    with pytest.raises(PreconditionError):
        run_sgd_batch(padded, EstimatorSpec.fom(), divergence_schedule, OuterSchedule.harmonic(1.0, 1), [0.0], 0)
    flat = make_problem("counterexample", dict(DIVERGENCE_SETUP))
    with pytest.raises(PreconditionError):
        run_sgd_batch(flat, EstimatorSpec.adaptive_ufom(), divergence_schedule, OuterSchedule.harmonic(1.0, 1),
                      [0.0], 0)


def test_exact_batch_is_deterministic_given_tasks(counterexample, divergence_schedule):
    outer = OuterSchedule.harmonic(10.0, 30)
    a = run_sgd_batch(counterexample, EstimatorSpec.exact_cached(), divergence_schedule, outer, [1.0, 2.0], seed=9)
    b = run_sgd_batch(counterexample, EstimatorSpec.exact_recompute(), divergence_schedule, outer, [1.0, 2.0], seed=9)
    np.testing.assert_allclose(a.theta, b.theta, rtol=1e-12)
    assert a.grad_calls[-1, 0] < b.grad_calls[-1, 0]


@pytest.mark.slow
def test_fom_stalls_while_ufom_converges(divergence_spec, counterexample, divergence_schedule):
    outer = OuterSchedule.harmonic(10.0, 10_000)
    rng = np.random.default_rng(2024)
    theta0 = rng.uniform(-10.0, 30.0, 5)
    limit = stationary_stats(divergence_spec).limit_grad_sq

    fom = run_sgd_batch(counterexample, EstimatorSpec.fom(), divergence_schedule, outer, theta0, seed=1)
    late = (fom.grad_abs[-1000:] ** 2).mean()
    assert 0.06 <= late <= 0.18
    assert abs(late - limit) < 0.06
    assert np.all((fom.grad_abs[-1000:] ** 2).mean(axis=0) > divergence_spec.D)

    ufom = run_sgd_batch(counterexample, EstimatorSpec.ufom(0.1), divergence_schedule, outer, theta0, seed=1)
    min_so_far = np.minimum.accumulate(ufom.grad_abs ** 2, axis=0)[-1]
    assert np.all(min_so_far < 1e-3)
    assert math.isfinite(float(ufom.theta[-1].max()))
