import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjadjoint.errors import InvalidSpec, NonConvergence
from hjadjoint.grid import Grid, ScalarField
from hjadjoint.models import (
    CellSystemSpec,
    CoupledSystemSpec,
    ObstacleProblemSpec,
    ObstacleSystemSpec,
    hamiltonian_catalog,
    shifted,
)
from hjadjoint.solvers import (
    SolverSettings,
    limit_residual,
    solve,
    solve_coupled_system,
    solve_obstacle_direct,
    solve_obstacle_system,
    solve_obstacle_system_direct,
    solve_penalized_obstacle,
    solve_scalar_cell,
    solve_system_cell,
    solve_system_direct,
)

FREE = hamiltonian_catalog("quadratic")
EIKONAL = hamiltonian_catalog("quadratic", shift=1.0)
PENDULUM = hamiltonian_catalog("quadratic", potential="cosine", amplitude=1.0)


def closed_form(grid):
    """Solution of u + |u'|^2/2 = 1 on (0, 1) with zero boundary values."""
    d = np.minimum(grid.coords[:, 0], 1 - grid.coords[:, 0])
    return 1 - (1 - d / np.sqrt(2)) ** 2


@pytest.fixture(scope="module")
def fine():
    return Grid.box(4096)


# obstacle problem ----------------------------------------------------------


@pytest.mark.parametrize("eps", [0.5, 0.1, 1e-3])
def test_trivial_instance_has_zero_solution(eps):
    g = Grid.box(64)
    r = solve_penalized_obstacle(ObstacleProblemSpec(g, FREE, 1.0), eps)
    assert np.all(r.u == 0.0) and r.residual_linf == 0.0 and r.newton_iters == 0


def test_direct_trivial_instances():
    g = Grid.box(64)
    for psi in (1.0, 0.0):
        u = solve_obstacle_direct(ObstacleProblemSpec(g, FREE, psi))
        assert np.all(u.values == 0.0)


def test_closed_form_solves_the_continuous_equation(fine):
    x = fine.coords[:, 0]
    d = np.minimum(x, 1 - x)
    u = closed_form(fine)
    du = np.sqrt(2) * (1 - d / np.sqrt(2))
    assert np.max(np.abs(u + 0.5 * du**2 - 1)) < 1e-15
    # away from the kink the discrete limit residual is a grid error
    from hjadjoint.solvers import _ObstacleLimit, DEFAULT_SETTINGS

    limit = _ObstacleLimit(ObstacleProblemSpec(fine, EIKONAL, 10.0), 0.0, DEFAULT_SETTINGS)
    F, _ = limit(u[fine.interior], False)
    away = np.abs(x[fine.interior] - 0.5) > 2 * fine.h
    assert np.max(np.abs(F[away])) < 2 * fine.h


def test_penalized_solution_near_closed_form(fine):
    r = solve_penalized_obstacle(ObstacleProblemSpec(fine, EIKONAL, 10.0), 1e-3)
    assert np.max(np.abs(r.u - closed_form(fine))) <= 0.15
    assert r.residual_linf <= r.tolerance
    assert r.u[0] == 0.0 and r.u[-1] == 0.0


def test_direct_solution_within_grid_error_of_closed_form(fine):
    spec = ObstacleProblemSpec(fine, EIKONAL, 10.0)
    u = solve_obstacle_direct(spec)
    assert np.max(np.abs(u.values - closed_form(fine))) <= 5 * fine.h
    assert limit_residual(spec, u) <= 1e-10


def test_active_obstacle_penalized_vs_direct(fine):
    spec = ObstacleProblemSpec(fine, EIKONAL, 0.2)
    eps = 1e-3
    r = solve_penalized_obstacle(spec, eps)
    u = solve_obstacle_direct(spec, settings=SolverSettings())
    assert np.max(r.u - 0.2) <= 2.0 * eps
    assert np.max(np.abs(r.u - u.values)) <= np.sqrt(eps)
    assert 0 < r.diagnostics["overshoot"] < 2
    assert np.isclose(u.values.max(), 0.2)
    # penalty bound: max gamma_eps <= max(|Lap psi| + |H(x, D psi)| + |psi|) + 1
    assert r.diagnostics["penalty_max"] <= 1.0 + 0.2 + 1.0


@given(st.floats(0.05, 0.6), st.floats(0.0, 0.3), st.integers(0, 2**32 - 1))
def test_solution_monotone_in_obstacle(base, lift, seed):
    g = Grid.box(24)
    rng = np.random.default_rng(seed)
    psi = base + 0.1 * rng.random(g.node_count)
    bigger = psi + lift * rng.random(g.node_count)
    lo = solve_penalized_obstacle(ObstacleProblemSpec(g, EIKONAL, psi), 0.05)
    hi = solve_penalized_obstacle(ObstacleProblemSpec(g, EIKONAL, bigger), 0.05)
    assert np.all(hi.u >= lo.u - 1e-12)


def test_newton_history_decreases_and_jacobian_is_m_matrix():
    g = Grid.box(256)
    r = solve_penalized_obstacle(ObstacleProblemSpec(g, EIKONAL, 0.2), 0.01)
    hist = np.array(r.residual_history)
    assert hist.size >= 2 and np.all(np.diff(hist) < 0)
    J = r.jacobian.toarray()
    off = J - np.diag(np.diag(J))
    assert np.all(np.diag(J) > 0) and np.all(off <= 0)
    assert r.diagnostics["monotone"]


def test_uniform_bounds_over_sweep():
    g = Grid.box(1024)
    spec = ObstacleProblemSpec(g, EIKONAL, 0.2)
    warm, sups, lips = None, [], []
    for k in range(4, 11):
        warm = solve_penalized_obstacle(spec, 2.0**-k, warm)
        sups.append(warm.diagnostics["sup_norm"])
        lips.append(warm.diagnostics["lipschitz"])
    assert max(sups) <= 0.2 + 2 * 2.0**-4 and max(lips) <= 1.5
    assert np.all(np.diff(sups) <= 0)  # no growth as eps decreases


def test_warm_and_cold_starts_agree():
    g = Grid.box(512)
    spec = ObstacleProblemSpec(g, EIKONAL, 0.2)
    warm = solve_penalized_obstacle(spec, 0.01)
    hot = solve_penalized_obstacle(spec, 0.005, warm)
    cold = solve_penalized_obstacle(spec, 0.005)
    assert np.max(np.abs(hot.u - cold.u)) <= 10 * hot.tolerance


def test_nonconvergence_is_reported():
    g = Grid.box(512)
    spec = ObstacleProblemSpec(g, EIKONAL, 0.2)
    tight = SolverSettings(max_iter=1, continuation_start=1e-3)
    with pytest.raises(NonConvergence) as info:
        solve_penalized_obstacle(spec, 1e-4, settings=tight)
    assert info.value.iterations is not None and info.value.residual > 0


def test_eps_must_be_positive():
    spec = ObstacleProblemSpec(Grid.box(8), EIKONAL, 1.0)
    with pytest.raises(ValueError):
        solve_penalized_obstacle(spec, 0.0)


def test_two_dimensional_obstacle_is_symmetric():
    g = Grid.box(32, 2)
    r = solve_penalized_obstacle(ObstacleProblemSpec(g, EIKONAL, 0.2), 0.01)
    A = r.u.reshape(g.shape)
    assert r.residual_linf <= r.tolerance
    assert np.max(np.abs(A - A.T)) < 1e-12 and np.max(np.abs(A - A[::-1])) < 1e-12
    u = solve_obstacle_direct(ObstacleProblemSpec(g, EIKONAL, 0.2))
    assert np.max(np.abs(u.values - r.u)) <= np.sqrt(0.01)


# coupled systems -------------------------------------------------------------


def test_zero_at_zero_system():
    g = Grid.box(32)
    spec = CoupledSystemSpec(g, 2, -1, -1, 2, FREE, FREE)
    r = solve_coupled_system(spec, 0.1)
    assert all(np.all(f == 0) for f in r.values())
    assert all(np.all(f.values == 0) for f in solve_system_direct(spec))


def test_symmetric_system_reduces_to_scalar(fine):
    spec = CoupledSystemSpec(fine, 2, -1, -1, 2, EIKONAL, EIKONAL)
    eps = 0.01
    u1, u2 = solve_coupled_system(spec, eps).values()
    assert np.max(np.abs(u1 - u2)) <= 1e-12
    scalar = solve_penalized_obstacle(ObstacleProblemSpec(fine, EIKONAL, 10.0), eps)
    assert np.max(np.abs(u1 - scalar.u)) <= 1e-9
    d1, d2 = solve_system_direct(spec)
    assert np.max(np.abs(d1.values - closed_form(fine))) <= 5 * fine.h
    assert np.max(np.abs(d1.values - d2.values)) <= 1e-12


def test_swapping_equations_swaps_solutions():
    g = Grid.box(256)
    H2 = hamiltonian_catalog("quadratic", potential="cosine", amplitude=0.25, shift=1.0)
    a = solve_coupled_system(CoupledSystemSpec(g, 2, -0.5, -1, 3, EIKONAL, H2), 0.02)
    b = solve_coupled_system(CoupledSystemSpec(g, 3, -1, -0.5, 2, H2, EIKONAL), 0.02)
    np.testing.assert_allclose(a.values()[0], b.values()[1], atol=1e-12)
    np.testing.assert_allclose(a.values()[1], b.values()[0], atol=1e-12)


@pytest.mark.parametrize("k", [0.1, 0.5])
def test_raising_first_hamiltonian_lowers_direct_solution(k):
    g = Grid.box(256)
    H2 = hamiltonian_catalog("quadratic", shift=0.5)
    base = solve_system_direct(CoupledSystemSpec(g, 2, -0.5, -1, 3, EIKONAL, H2))
    raised = solve_system_direct(CoupledSystemSpec(g, 2, -0.5, -1, 3, shifted(EIKONAL, k), H2))
    for b, r in zip(base, raised):
        assert np.all(r.values <= b.values + 1e-12)
    assert np.any(raised[0].values < base[0].values - 1e-6)


# obstacle systems -----------------------------------------------------------


def test_obstacle_system_trivial_and_symmetric():
    g = Grid.box(64)
    r = solve_obstacle_system(ObstacleSystemSpec(g, FREE, FREE, 1.0, 1.0), 0.1)
    assert all(np.all(f == 0) for f in r.values())
    r = solve_obstacle_system(ObstacleSystemSpec(g, EIKONAL, EIKONAL, 0.1, 0.1), 0.05)
    u1, u2 = r.values()
    assert np.max(np.abs(u1 - u2)) <= 1e-12


def test_obstacle_system_active_constraint_vs_direct():
    g = Grid.box(1024)
    spec = ObstacleSystemSpec(g, EIKONAL, FREE, 0.05, 0.05)
    eps = 1e-3
    r = solve_obstacle_system(spec, eps)
    d = solve_obstacle_system_direct(spec)
    u1, u2 = r.values()
    assert np.max(u1 - u2) > 0.045  # the switching constraint binds
    assert np.max(d[0].values - d[1].values) == pytest.approx(0.05, abs=1e-10)
    err = max(np.max(np.abs(a - b.values)) for a, b in zip(r.values(), d))
    assert err <= np.sqrt(eps)
    assert 0 < r.diagnostics["theta_over_eps"] < 5
    assert limit_residual(spec, d) <= 1e-10


# cell problems ----------------------------------------------------------------


@pytest.mark.parametrize("P", [0.0, 0.4, -1.3])
def test_scalar_cell_free_hamiltonian(P):
    r = solve_scalar_cell(FREE, [P], 0.3, Grid.torus(64))
    assert np.max(np.abs(r.u)) < 1e-13
    assert r.hbar[0] == pytest.approx(0.5 * P * P, abs=1e-13)


def test_scalar_cell_pendulum_tends_to_max_potential():
    g = Grid.torus(2048)
    errors, warm = [], None
    for eta in (0.5, 0.25, 0.125, 0.0625):
        warm = solve_scalar_cell(PENDULUM, [0.0], eta, g, warm)
        errors.append(1.0 - warm.hbar[0])
        assert abs(np.mean(warm.u)) < 1e-12
    assert np.all(np.diff(errors) < 0) and errors[-1] < 0.02


def test_scalar_cell_shift_and_anchor_invariance():
    g = Grid.torus(256)
    base = solve_scalar_cell(PENDULUM, [0.2], 0.2, g)
    up = solve_scalar_cell(shifted(PENDULUM, 0.7), [0.2], 0.2, g)
    assert up.hbar[0] - base.hbar[0] == pytest.approx(0.7, abs=1e-12)
    assert np.max(np.abs(up.u - base.u)) < 1e-10
    for anchor in (0, 77, 255):
        other = solve_scalar_cell(PENDULUM, [0.2], 0.2, g, anchor=anchor)
        assert abs(other.hbar[0] - base.hbar[0]) <= 1e-10
        assert np.max(np.abs(other.u - base.u)) <= 1e-9


def test_scalar_cell_rejects_bad_input():
    with pytest.raises(InvalidSpec):
        solve_scalar_cell(FREE, [0.0], 0.1, Grid.box(8))
    with pytest.raises(ValueError):
        solve_scalar_cell(FREE, [0.0], 0.0, Grid.torus(8))


def test_cell_system_constant_hamiltonians_match_hand_solution():
    g = Grid.torus(32)
    a, b, c1, c2, eps = 0.3, -0.8, 1.5, 0.5, 0.05
    spec = CellSystemSpec(g, c1, c2, hamiltonian_catalog("quadratic", shift=-a),
                          hamiltonian_catalog("quadratic", shift=-b))
    r = solve_system_cell(spec, eps)
    # (c1 + eps) u1 - c1 u2 = -a ; -c2 u1 + (c2 + eps) u2 = -b
    u1, u2 = np.linalg.solve([[c1 + eps, -c1], [-c2, c2 + eps]], [-a, -b])
    np.testing.assert_allclose(r.values()[0], u1, rtol=1e-12)
    np.testing.assert_allclose(r.values()[1], u2, rtol=1e-12)
    assert r.mu == pytest.approx(c2 * a + c1 * b, abs=1e-12)
    # both components tend to the common value mu / (c1 + c2)
    assert abs(r.hbar[0] - (c2 * a + c1 * b) / (c1 + c2)) < 2 * eps


def test_cell_system_symmetric_matches_scalar_cell():
    g = Grid.torus(1024)
    spec = CellSystemSpec(g, 1.0, 1.0, PENDULUM, PENDULUM)
    eps = 2.0**-8
    r = solve_system_cell(spec, eps)
    u1, u2 = r.values()
    assert np.max(np.abs(u1 - u2)) <= 1e-9 * np.max(np.abs(u1))
    scalar = solve_scalar_cell(PENDULUM, [0.0], np.sqrt(2 * eps**2), g)
    assert abs(r.hbar[0] - scalar.hbar[0]) <= 2 * eps
    assert r.diagnostics["scaled_sup_norm"] < 2


def test_dispatch():
    g = Grid.box(16)
    assert solve(ObstacleProblemSpec(g, FREE, 1.0), 0.1).kind == "obstacle"
    with pytest.raises(TypeError):
        solve(object(), 0.1)
    field = ScalarField(g, np.zeros(g.node_count))
    assert limit_residual(ObstacleProblemSpec(g, FREE, 1.0), field) == 0.0
