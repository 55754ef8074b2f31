import numpy as np
import pytest

from hjadjoint.adjoint import constant_test_function, solve_adjoint
from hjadjoint.errors import InvalidStart, MismatchedPair, StabilityViolation
from hjadjoint.grid import Grid
from hjadjoint.models import ObstacleProblemSpec, hamiltonian_catalog
from hjadjoint.solvers import solve_penalized_obstacle
from hjadjoint.stochastic import (
    bump_test_function,
    closed_form_exit_time,
    dynkin_residual,
    occupation_vs_adjoint,
    simulate,
    stability_limit,
    verify_monte_carlo,
)

DT, T = 2e-4, 2.0


@pytest.fixture(scope="module")
def free():
    spec = ObstacleProblemSpec(Grid.box(64), hamiltonian_catalog("quadratic"), 1.0)
    return solve_penalized_obstacle(spec, 0.5)


@pytest.fixture(scope="module")
def drifted():
    spec = ObstacleProblemSpec(Grid.box(32), hamiltonian_catalog("quadratic", shift=1.0), 0.2)
    return solve_penalized_obstacle(spec, 0.25)


def test_same_seed_same_batch(free):
    a = simulate(free, [0.5], 300, DT, T, seed=3, block_size=150)
    b = simulate(free, [0.5], 300, DT, T, seed=3, block_size=150)
    c = simulate(free, [0.5], 300, DT, T, seed=4, block_size=150)
    assert np.array_equal(a.exit_time, b.exit_time)
    assert np.array_equal(a.occupation, b.occupation)
    assert not np.array_equal(a.exit_time, c.exit_time)


def test_thread_count_does_not_change_results(free):
    a = simulate(free, [0.5], 400, DT, T, seed=5, threads=1, block_size=100)
    b = simulate(free, [0.5], 400, DT, T, seed=5, threads=4, block_size=100)
    assert np.array_equal(a.exit_time, b.exit_time)
    assert np.array_equal(a.final_state, b.final_state)


def test_input_guards(free):
    limit = stability_limit(free.grid, free.eps)
    with pytest.raises(StabilityViolation):
        simulate(free, [0.5], 10, 1.01 * limit, T)
    for bad in ([0.0], [1.0], [1.2], [0.5, 0.5]):
        with pytest.raises(InvalidStart):
            simulate(free, bad, 10, DT, T)


def test_exit_time_standard_error_halves_with_four_times_the_paths(free):
    small = simulate(free, [0.5], 1000, DT, T, seed=11)
    large = simulate(free, [0.5], 4000, DT, T, seed=12)
    ratio = large.exit_time_std_error / small.exit_time_std_error
    assert 0.4 <= ratio <= 0.6


def test_exit_time_matches_closed_form(free):
    batch = simulate(free, [0.3], 2000, DT, T, seed=1)
    expected = closed_form_exit_time(free, [0.3])
    assert expected == pytest.approx(0.21)
    assert abs(batch.mean_exit_time - expected) <= 4 * batch.exit_time_std_error
    assert batch.censored_fraction == 0.0


def test_more_noise_exits_sooner():
    spec = ObstacleProblemSpec(Grid.box(32), hamiltonian_catalog("quadratic"), 1.0)
    times = []
    for eps in (0.25, 1.0):
        r = solve_penalized_obstacle(spec, eps)
        times.append(simulate(r, [0.5], 1000, 1e-4, T, seed=2).mean_exit_time)
    assert times[1] < times[0]


def test_exited_paths_stop_on_the_boundary(free):
    batch = simulate(free, [0.5], 1000, DT, T, seed=7)
    x = batch.final_state[batch.exited]
    dist = np.minimum(x, 1 - x).min(axis=1)
    assert np.all(dist <= free.grid.h)


def test_kept_paths_are_consistent(free):
    batch = simulate(free, [0.5], 20, DT, T, seed=8, keep_paths=True)
    assert len(batch.paths) == 20
    for path, final in zip(batch.paths, batch.final_state):
        np.testing.assert_allclose(path[0], [0.5])
        np.testing.assert_allclose(path[-1], final)


def test_dynkin_residuals(drifted):
    one, bump = constant_test_function(1.0), bump_test_function()
    batch = simulate(drifted, [0.5], 2000, 5e-4, T, seed=9, observe=(one,))
    assert dynkin_residual(batch, drifted, one).residual == 0.0
    replay = dynkin_residual(batch, drifted, bump)  # replays the batch
    assert replay.within(4.0)
    observed = simulate(drifted, [0.5], 2000, 5e-4, T, seed=9, observe=(bump,))
    assert dynkin_residual(observed, drifted, bump) == replay


def test_occupation_is_closer_to_the_matching_adjoint(free):
    batch = simulate(free, [0.5], 4000, DT, T, seed=10)
    near = occupation_vs_adjoint(batch, solve_adjoint(free, [0.5]))
    far = occupation_vs_adjoint(batch, solve_adjoint(free, [0.25]))
    assert near < far


def test_mismatched_results_are_rejected(free, drifted):
    batch = simulate(free, [0.5], 20, DT, T)
    with pytest.raises(MismatchedPair):
        dynkin_residual(batch, drifted, constant_test_function())
    with pytest.raises(MismatchedPair):
        occupation_vs_adjoint(batch, solve_adjoint(drifted))


def test_verify_monte_carlo_summary(free):
    check = verify_monte_carlo(free, [0.5], 2000, DT, T, seed=1)
    row = check.summary_row()
    assert row["expected_exit_time"] == pytest.approx(0.25)
    assert {"dynkin_const1", "dynkin_bump", "occupation_l1", "exit_time_z"} <= set(row)
    assert check.passed(4.0)


def test_closed_form_undefined_with_drift(drifted):
    assert np.isnan(closed_form_exit_time(drifted, [0.5]))
