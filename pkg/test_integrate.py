"""
Tests for the integrator: step functions, streaming runs, hidden-path
replay, sinks and ensembles.
"""

import math

import numpy as np
import pytest

from damping_lab.errors import ModelSpecError, ReplayMismatchError, SingularStepError
from damping_lab.integrate import (
    EXPLICIT, MomentAccumulator, SampleBuffer, SampleSpill, SimConfig, TrajectoryExcerpt,
    ensemble_damping_exponential, ensemble_expectation, integrated_damping, log_mean_jackknife,
    read_spill, record_hidden_path, simulate_stream, step_hidden, step_observable,
)
from damping_lab.model import OU, STATIONARY, Affine, Constant, Hinge, ScalarModel


def implicit_variance(n_steps, dt=0.01, b=1.0):
    """Exact variance of the implicit X recursion with constant damping from x0 = 0."""
    var = 0.0
    for _ in range(n_steps):
        var = (var + dt) / (1.0 + b * dt) ** 2
    return var


def test_sim_config_validation():
    with pytest.raises(ModelSpecError):
        SimConfig(dt=0.0, n_steps=10)
    with pytest.raises(ModelSpecError):
        SimConfig(n_steps=10, burn_in=10)
    with pytest.raises(ModelSpecError):
        SimConfig(n_steps=10, scheme='rk4')
    config = SimConfig.from_horizon(100.0, dt=0.01, burn_in_time=1.0)
    assert (config.n_steps, config.burn_in) == (10_000, 100)
    assert SimConfig.from_dict(config.to_dict()) == config


def test_step_hidden_is_euler(ou2):
    u = step_hidden(np.array([1.0]), ou2, 0.01, np.array([0.5]))
    assert u[0] == pytest.approx(1.0 - 0.02 + 0.1 * 0.5)


def test_step_observable_schemes():
    x = np.array([1.0])
    assert step_observable(x, 1.0, 1.0, 0.01, np.array([0.0]))[0] == pytest.approx(1.0 / 1.01)
    assert step_observable(x, 1.0, 1.0, 0.01, np.array([0.0]), EXPLICIT)[0] == pytest.approx(0.99)
    matrix = step_observable(np.array([1.0, 2.0]), np.eye(2), np.eye(2), 0.01, np.zeros(2))
    np.testing.assert_allclose(matrix, np.array([1.0, 2.0]) / 1.01)


def test_step_observable_singular_step():
    with pytest.raises(SingularStepError) as info:
        step_observable(np.array([1.0]), -200.0, 1.0, 0.01, np.array([0.0]), step_index=7)
    assert info.value.step_index == 7
    assert info.value.b_value == -200.0


@pytest.mark.parametrize('dt', [1e-3, 0.1, 1.0, 10.0, 1e3])
def test_implicit_step_contracts_without_noise(dt):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 1)) * 10.0
    b = rng.uniform(1e-3, 50.0, 200)
    out = step_observable(x, b, 0.0, dt, np.zeros_like(x))
    assert np.all(np.abs(out) < np.abs(x))

    xs = rng.standard_normal((200, 3))
    m = rng.standard_normal((200, 3, 3))
    spd = m @ np.swapaxes(m, 1, 2) + 0.1 * np.eye(3)
    out = step_observable(xs, spd, np.zeros((3, 3)), dt, np.zeros_like(xs))
    assert np.all(np.linalg.norm(out, axis=1) < np.linalg.norm(xs, axis=1))


def test_simulate_stream_is_deterministic(ou2):
    model = ScalarModel(Hinge(1.0, 1.0, 1.0), ou2)
    config = SimConfig(dt=0.01, n_steps=2000, block_size=500, seed=3)
    first, second = SampleBuffer(source='x'), SampleBuffer(source='x')
    simulate_stream(model, config, sinks=(first,))
    simulate_stream(model, config, sinks=(second,))
    assert first.values().shape == (2000,)
    np.testing.assert_array_equal(first.values(), second.values())


def test_burn_in_and_thinning(ou2):
    model = ScalarModel(Constant(1.0), ou2)
    config = SimConfig(dt=0.01, n_steps=1000, burn_in=200, thinning=4, block_size=300)
    buffer = SampleBuffer()
    run = simulate_stream(model, config, sinks=(buffer,))
    assert run.samples_seen == 200
    assert buffer.values().shape == (200,)
    assert run.final_state.t == pytest.approx(10.0)


@pytest.mark.parametrize('mode', ['values', 'increments'])
def test_replay_matches_fresh_run(ou2, mode):
    model = ScalarModel(Affine(1.0, 1.0), ou2)
    config = SimConfig(dt=0.01, n_steps=1500, block_size=400, seed=11)
    record = record_hidden_path(ou2, config, STATIONARY, mode=mode)
    fresh, replayed = SampleBuffer(source='x'), SampleBuffer(source='x')
    simulate_stream(model, config, sinks=(fresh,))
    simulate_stream(model, config, sinks=(replayed,), replay=record)
    np.testing.assert_array_equal(fresh.values(), replayed.values())


def test_replay_shared_between_dampings(ou2):
    """One record drives several dampings; their u columns coincide."""
    config = SimConfig(dt=0.01, n_steps=800, block_size=300, seed=5)
    record = record_hidden_path(ou2, config)
    excerpts = []
    for damping in (Constant(1.0), Hinge(1.0, 1.0, 2.0)):
        excerpt = TrajectoryExcerpt(0.0, 8.0)
        simulate_stream(ScalarModel(damping, ou2), config, sinks=(excerpt,), replay=record)
        excerpts.append(excerpt.to_frame())
    np.testing.assert_array_equal(excerpts[0]['u'].values, excerpts[1]['u'].values)


def test_replay_mismatch(ou2):
    record = record_hidden_path(ou2, SimConfig(dt=0.01, n_steps=100))
    model = ScalarModel(Constant(1.0), ou2)
    with pytest.raises(ReplayMismatchError):
        simulate_stream(model, SimConfig(dt=0.02, n_steps=100), replay=record)
    with pytest.raises(ReplayMismatchError):
        simulate_stream(model, SimConfig(dt=0.01, n_steps=200), replay=record)
    with pytest.raises(ReplayMismatchError):
        simulate_stream(ScalarModel(Constant(1.0), OU(3.0)), SimConfig(dt=0.01, n_steps=100),
                        replay=record)


def test_negative_damping_raises_singular_step():
    model = ScalarModel(Constant(-200.0), OU(2.0))
    with pytest.raises(SingularStepError) as info:
        simulate_stream(model, SimConfig(dt=0.01, n_steps=10))
    assert info.value.step_index == 0
    partial = info.value.summary
    assert partial.n_steps == 0 and partial.samples_seen == 0
    assert partial.diagnostics[0].startswith('aborted: implicit step is singular')


def test_failure_summary_keeps_completed_blocks():
    # u relaxes from 300 and b = u - 150 turns the implicit step singular near u = 50
    model = ScalarModel(Affine(-150.0, 1.0), OU(2.0), u0=300.0)
    config = SimConfig(dt=0.01, n_steps=200, block_size=10)
    with pytest.raises(SingularStepError) as info:
        simulate_stream(model, config, sinks=(SampleBuffer(),))
    partial = info.value.summary
    assert 0 < partial.n_steps < 200
    assert partial.n_steps % 10 == 0
    assert partial.samples_seen == partial.n_steps
    assert partial.final_state.t == pytest.approx(partial.n_steps * 0.01)
    assert partial.to_dict()['diagnostics'] == [f'aborted: {info.value}']


def test_run_summary_diagnostics(ou2):
    config = SimConfig(dt=0.01, n_steps=500, seed=1)
    assert simulate_stream(ScalarModel(Constant(1.0), ou2), config).diagnostics == []
    run = simulate_stream(ScalarModel(Affine(0.0, 1.0), ou2), config)
    assert len(run.diagnostics) == 1
    assert run.diagnostics[0].endswith('of 500 steps had negative damping')
    sparse = simulate_stream(ScalarModel(Constant(1.0), ou2), SimConfig(dt=0.01, n_steps=50, thinning=100))
    assert sparse.samples_seen == 0
    assert sparse.diagnostics == ['no samples emitted: burn-in or thinning covers the whole run']


def test_trajectory_excerpt_window(ou2):
    excerpt = TrajectoryExcerpt(5.0, 10.0)
    simulate_stream(ScalarModel(Constant(1.0), ou2), SimConfig(dt=0.01, n_steps=2000, block_size=333),
                    sinks=(excerpt,))
    frame = excerpt.to_frame()
    assert list(frame.columns) == ['t', 'x', 'abs_x', 'u']
    assert 499 <= len(frame) <= 502
    assert frame['t'].min() >= 5.0 and frame['t'].max() <= 10.0
    np.testing.assert_array_equal(frame['abs_x'].values, np.abs(frame['x'].values))


def test_sample_spill_holds_the_stream(ou2, tmp_path):
    path = tmp_path / 'samples.bin'
    spill = SampleSpill(path, dt=0.01, thinning=1, seed=2)
    buffer = SampleBuffer()
    simulate_stream(ScalarModel(Constant(1.0), ou2), SimConfig(dt=0.01, n_steps=500, seed=2),
                    sinks=(spill, buffer))
    spill.close()
    header, data = read_spill(path)
    assert header == {'dt': 0.01, 'thinning': 1, 'seed': 2}
    np.testing.assert_array_equal(data, buffer.values())


def test_moment_accumulator_values_and_merge():
    acc = MomentAccumulator([1.0, 2.0])
    acc.update([1.0, 2.0])
    np.testing.assert_allclose(acc.log_moments(), [math.log(2.5), math.log(8.5)])

    rng = np.random.default_rng(0)
    norms = np.abs(rng.standard_normal(1000)) * 10.0
    whole = MomentAccumulator([1.0, 3.0, 6.0])
    whole.update(norms)
    left, right = MomentAccumulator([1.0, 3.0, 6.0]), MomentAccumulator([1.0, 3.0, 6.0])
    left.update(norms[:300])
    right.update(norms[300:])
    np.testing.assert_allclose(left.merge(right).log_moments(), whole.log_moments(), rtol=1e-12)
    np.testing.assert_allclose(right.merge(left).log_moments(), whole.log_moments(), rtol=1e-12)


def test_moment_accumulator_merge_is_associative():
    rng = np.random.default_rng(1)
    norms = np.exp(rng.normal(0.0, 2.0, 900))
    grid = [0.5, 2.0, 5.0]
    parts = []
    for chunk in np.split(norms, [200, 650]):
        acc = MomentAccumulator(grid)
        acc.update(chunk)
        parts.append(acc)
    a, b, c = parts
    nested_right = a.merge(b.merge(c))
    nested_left = a.merge(b).merge(c)
    assert nested_right.count == nested_left.count == 900
    np.testing.assert_allclose(nested_right.log_moments(), nested_left.log_moments(), rtol=1e-12)
    np.testing.assert_allclose(c.merge(a).merge(b).log_moments(), nested_left.log_moments(), rtol=1e-12)


def test_moment_accumulator_rejects_bad_grid():
    with pytest.raises(ModelSpecError):
        MomentAccumulator([0.0, 1.0])
    with pytest.raises(ModelSpecError):
        MomentAccumulator([1.0]).merge(MomentAccumulator([2.0]))


def test_log_mean_jackknife():
    mean, se = log_mean_jackknife(np.log([1.0, 2.0, 3.0, 4.0]))
    assert mean == pytest.approx(math.log(2.5))
    assert se > 0
    mean, se = log_mean_jackknife(np.full(10, 3.0))
    assert (mean, se) == (pytest.approx(3.0), 0.0)


def test_conditional_estimator_is_exact_for_constant_damping(ou2):
    model = ScalarModel(Constant(1.0), ou2)
    config = SimConfig(dt=0.01, n_steps=1000)
    curve = ensemble_expectation(model, config, [1.0, 2.0], t_final=5.0, n_traj=64,
                                 estimator='conditional')
    var = implicit_variance(500)
    np.testing.assert_allclose(curve.log_estimates, [math.log(var), math.log(3.0 * var ** 2)])
    np.testing.assert_allclose(curve.log_standard_errors, 0.0, atol=1e-12)


def test_direct_estimator_matches_exact_variance(ou2):
    model = ScalarModel(Constant(1.0), ou2)
    config = SimConfig(dt=0.01, n_steps=1000, seed=4)
    curve = ensemble_expectation(model, config, [1.0], t_final=2.0, n_traj=2000, batch_size=500)
    exact = math.log(implicit_variance(200))
    assert abs(curve.log_estimates[0] - exact) <= 4.0 * curve.log_standard_errors[0] + 0.01


def test_ensemble_independent_of_workers(ou2):
    model = ScalarModel(Hinge(1.0, 1.0, 1.0), ou2)
    config = SimConfig(dt=0.01, n_steps=1000, seed=9)
    serial = ensemble_expectation(model, config, [1.0, 2.0], 1.0, 256, workers=1, batch_size=64)
    threaded = ensemble_expectation(model, config, [1.0, 2.0], 1.0, 256, workers=4, batch_size=64)
    np.testing.assert_array_equal(serial.log_estimates, threaded.log_estimates)


def test_conditional_estimator_needs_scalar_observable(ou2):
    model = ScalarModel(Constant(1.0), ou2, d_x=2)
    with pytest.raises(ModelSpecError):
        ensemble_expectation(model, SimConfig(n_steps=100), [1.0], 0.5, 10, estimator='conditional')


def test_integrated_damping_of_constant(ou2):
    out = integrated_damping(ou2, Constant(2.0), [0.5, 1.0], dt=0.01, n_traj=8)
    assert out.shape == (8, 2)
    np.testing.assert_allclose(out, np.tile([1.0, 2.0], (8, 1)))
    with pytest.raises(ModelSpecError):
        integrated_damping(ou2, Constant(2.0), [0.005], dt=0.01, n_traj=8)


def test_damping_exponential_of_constant(ou2):
    curve = ensemble_damping_exponential(ou2, Constant(1.0), [1.0, 2.0], t_final=1.0, n_traj=50)
    np.testing.assert_allclose(curve.log_estimates, [-2.0, -4.0])


def test_halving_dt_moves_variance_less_than_monte_carlo_error(ou2):
    config = SimConfig(dt=0.01, n_steps=1000, seed=6)
    direct = ensemble_expectation(ScalarModel(Constant(1.0), ou2), config, [1.0], t_final=4.0,
                                  n_traj=2000, batch_size=500)
    shift = abs(math.log(implicit_variance(200, dt=0.02)) - math.log(implicit_variance(400, dt=0.01)))
    assert shift < direct.log_standard_errors[0]

    model = ScalarModel(Hinge(1.0, 1.0, 1.0), ou2)
    coarse, fine = (
        ensemble_expectation(model, SimConfig(dt=dt, n_steps=1000, seed=6), [1.0], t_final=4.0,
                             n_traj=2000, batch_size=500, estimator='conditional')
        for dt in (0.02, 0.01)
    )
    moved = abs(coarse.log_estimates[0] - fine.log_estimates[0])
    assert moved < 3.0 * math.hypot(coarse.log_standard_errors[0], fine.log_standard_errors[0])


def test_stronger_hinge_damping_has_smaller_moments(ou2):
    """Hinge(1, 0.5, 1) >= Hinge(1, 1, 1) pointwise, with hidden and observable noise shared."""
    config = SimConfig(dt=0.01, n_steps=1000, seed=8)
    p_grid = [1.0, 2.0, 3.0]
    strong, weak = ScalarModel(Hinge(1.0, 0.5, 1.0), ou2), ScalarModel(Hinge(1.0, 1.0, 1.0), ou2)

    a = ensemble_expectation(strong, config, p_grid, 4.0, 2000, batch_size=500, estimator='conditional')
    b = ensemble_expectation(weak, config, p_grid, 4.0, 2000, batch_size=500, estimator='conditional')
    # the conditional variance is monotone in b path by path
    assert np.all(a.log_estimates <= b.log_estimates + 1e-12)

    a = ensemble_expectation(strong, config, p_grid, 4.0, 2000, batch_size=500)
    b = ensemble_expectation(weak, config, p_grid, 4.0, 2000, batch_size=500)
    tolerance = 3.0 * np.hypot(a.log_standard_errors, b.log_standard_errors)
    assert np.all(a.log_estimates <= b.log_estimates + tolerance)
