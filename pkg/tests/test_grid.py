from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjadjoint.grid import (
    Grid,
    ScalarField,
    hessian,
    integrate,
    laplacian,
    quadrature,
    read_csv,
    upwind_gradient,
    write_csv,
)


def field(grid, f):
    return ScalarField(grid, f(grid.coords[:, 0]) if grid.dim == 1 else f(grid.coords))


@pytest.mark.parametrize("cells", [2, 3, 7, 10, 64, 4096])
def test_spacing_times_cells_is_exactly_one(cells):
    g = Grid.torus(cells)
    assert g.spacing * cells == Fraction(1)
    assert Grid.box(cells).spacing * cells == 1


def test_node_layout():
    assert Grid.torus(8).node_count == 8 and Grid.torus(8).boundary.size == 0
    box = Grid.box(8)
    assert box.node_count == 9
    assert box.boundary.tolist() == [0, 8]
    box2 = Grid.box(4, 2)
    assert box2.node_count == 25 and box2.interior.size == 9
    with pytest.raises(ValueError):
        Grid.box(1)
    with pytest.raises(ValueError):
        Grid.torus(8, 3)


def test_laplacian_of_constant_on_torus_is_zero():
    g = Grid.torus(16, 2)
    assert np.all(laplacian(ScalarField(g, np.full(g.node_count, 3.5))).values == 0.0)


def test_laplacian_of_sine_matches_second_derivative():
    g = Grid.torus(256)
    x = g.coords[:, 0]
    lap = laplacian(ScalarField(g, np.sin(2 * np.pi * x))).values
    err = np.max(np.abs(lap + 4 * np.pi**2 * np.sin(2 * np.pi * x)))
    # leading Taylor term of the centered stencil; the error attains it at the crest
    bound = (2 * np.pi) ** 4 * g.h**2 / 12
    assert 0.999 * bound < err <= bound


def test_dirichlet_laplacian_stencil():
    # four cells: nodes 0..4, the two end nodes are boundary
    g = Grid.box(4)
    f = ScalarField(g, np.array([0.0, 1.0, 1.0, 0.0, 0.0]))
    lap = laplacian(f).values
    assert lap.tolist() == [0.0, -16.0, -16.0, 16.0, 0.0]


def test_upwind_gradient_stencil_on_torus():
    g = Grid.torus(4)
    back, fwd = upwind_gradient(ScalarField(g, np.array([0.0, 1.0, 3.0, 0.0])))
    assert back.values[1, 0] == 4.0
    assert fwd.values[1, 0] == 8.0
    # wraparound at node 0
    assert back.values[0, 0] == 0.0 and fwd.values[3, 0] == 0.0


def test_upwind_gradient_of_zero_and_affine():
    g = Grid.box(16)
    back, fwd = upwind_gradient(ScalarField(g, np.zeros(g.node_count)))
    assert not back.values.any() and not fwd.values.any()
    slope = 2.5
    back, fwd = upwind_gradient(field(g, lambda x: slope * x))
    inner = slice(2, -2)
    np.testing.assert_allclose(back.values[inner, 0], slope, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fwd.values[inner, 0], slope, rtol=0, atol=1e-12)


def test_box_ghost_value_is_zero():
    g = Grid.box(4)
    f = ScalarField(g, np.array([1.0, 1.0, 1.0, 1.0, 1.0]))
    back, fwd = upwind_gradient(f)
    assert back.values[0, 0] == 4.0  # (1 - 0)/h with ghost 0
    assert fwd.values[4, 0] == -4.0


def test_laplacian_of_affine_field_vanishes_away_from_wrap():
    g = Grid.box(32, 2)
    f = field(g, lambda x: 0.3 + 1.5 * x[:, 0] - 2.0 * x[:, 1])
    lap = laplacian(f).values.reshape(g.shape)
    assert np.max(np.abs(lap[1:-1, 1:-1])) < 1e-9


def test_integrate_examples():
    g = Grid.torus(256)
    assert integrate(ScalarField(g, np.ones(g.node_count))) == pytest.approx(1.0, abs=1e-15)
    assert integrate(ScalarField(g, np.zeros(g.node_count))) == 0.0
    x = g.coords[:, 0]
    assert abs(integrate(ScalarField(g, np.sin(2 * np.pi * x) ** 2)) - 0.5) < 1e-12
    g2 = Grid.torus(32, 2)
    assert integrate(ScalarField(g2, np.ones(g2.node_count))) == pytest.approx(1.0, abs=1e-14)


@given(
    st.integers(2, 40),
    st.integers(0, 2**32 - 1),
    st.sampled_from([1, 2]),
)
def test_summation_by_parts_on_torus(cells, seed, dim):
    g = Grid.torus(min(cells, 12) if dim == 2 else cells, dim)
    rng = np.random.default_rng(seed)
    f = ScalarField(g, rng.standard_normal(g.node_count))
    k = ScalarField(g, rng.standard_normal(g.node_count))
    a = integrate(ScalarField(g, f.values * laplacian(k).values))
    b = integrate(ScalarField(g, k.values * laplacian(f).values))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_integrate_is_linear(a, b, seed):
    g = Grid.box(17)
    rng = np.random.default_rng(seed)
    f, k = rng.standard_normal((2, g.node_count))
    lhs = integrate(ScalarField(g, a * f + b * k))
    rhs = a * integrate(ScalarField(g, f)) + b * integrate(ScalarField(g, k))
    assert abs(lhs - rhs) <= 1e-13 * (1 + abs(a) + abs(b)) * np.sum(np.abs(f) + np.abs(k)) / 17


def test_hessian_of_quadratic_is_exact_inside():
    g = Grid.box(16, 2)
    x, y = g.coords.T
    d2 = hessian(g, x * x + 3 * x * y - y * y).reshape(*g.shape, 2, 2)
    inner = d2[2:-2, 2:-2]
    np.testing.assert_allclose(inner[..., 0, 0], 2.0, atol=1e-9)
    np.testing.assert_allclose(inner[..., 1, 1], -2.0, atol=1e-9)
    np.testing.assert_allclose(inner[..., 0, 1], 3.0, atol=1e-9)
    np.testing.assert_allclose(inner[..., 1, 0], 3.0, atol=1e-9)


def test_field_validation():
    g = Grid.box(4)
    with pytest.raises(ValueError):
        ScalarField(g, np.zeros(4))


def test_csv_round_trip(tmp_path):
    g = Grid.box(5, 2)
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, g.node_count))
    path = tmp_path / "f.csv"
    write_csv(path, g, a, b)
    header = path.read_text().splitlines()[0]
    assert header == "i0,i1,value1,value2"
    back = read_csv(path, g)
    assert np.array_equal(back[:, 0], a) and np.array_equal(back[:, 1], b)
    ScalarField(g, a).to_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "i0,i1,value"
    assert quadrature(g, a) == pytest.approx(integrate(ScalarField(g, a)))
