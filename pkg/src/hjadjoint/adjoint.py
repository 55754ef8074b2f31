"""Discrete adjoint measures and the identities they satisfy.

The adjoint field solves ``J^T sigma = d`` where ``J`` is the Jacobian of
the discrete residual at a converged solution and ``d`` is the discrete
Dirac mass ``1/h^n`` at one node of one component (scaled by ``eps`` for
the coupled cell problem). For the scalar cell problem ``sigma`` is the
normalized null vector of ``J^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MismatchedPair, SingularJacobian
from .grid import Grid, ScalarField, central_gradient, hessian
from .models import penalty_eval
from .solvers import (
    CELL_SCALAR,
    CELL_SYSTEM,
    OBSTACLE,
    PENALTY,
    CellSolveResult,
    SolveResult,
    SolverSettings,
    DEFAULT_SETTINGS,
    solve,
)


@dataclass(frozen=True)
class AdjointSolution:
    result: SolveResult
    sigma: tuple
    source_node: int | None
    component: int
    boundary_flux: float
    boundary_flux_nodes: np.ndarray
    mass_weighted: float
    solve_residual: float

    @property
    def grid(self) -> Grid:
        return self.sigma[0].grid

    def values(self) -> tuple:
        return tuple(s.values for s in self.sigma)

    @property
    def sigma_min(self) -> float:
        return min(float(s.values.min()) for s in self.sigma)


def _resolve_node(grid: Grid, x0) -> int:
    if x0 is None:
        return grid.nearest_node(np.full(grid.dim, 0.5))
    if isinstance(x0, (int, np.integer)):
        return int(x0)
    return grid.nearest_node(x0)


def _factorize_solve(matrix: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    try:
        out = spla.spsolve(sp.csc_matrix(matrix), rhs)
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise SingularJacobian(str(exc)) from exc
    if not np.all(np.isfinite(out)):
        raise SingularJacobian("transpose solve produced non-finite values")
    return out


def solve_adjoint(result: SolveResult, x0=None, component: int = 1) -> AdjointSolution:
    """Adjoint measure with source at node ``x0`` (index or point; default the center)."""
    grid = result.grid
    m = result.components
    if component not in range(1, m + 1):
        raise ValueError(f"component must be in 1..{m}")
    vol = grid.cell_volume
    J = result.jacobian

    if result.kind == CELL_SCALAR:
        n = grid.node_count
        ones = np.ones((n, 1))
        augmented = sp.bmat(
            [[J.T, sp.csr_matrix(ones)], [sp.csr_matrix(vol * ones.T), None]], format="csc"
        )
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        sol = _factorize_solve(augmented, rhs)
        sigma_unknown = sol[:-1]
        node = None
        d = np.zeros(n)
    else:
        node = _resolve_node(grid, x0)
        position = np.searchsorted(grid.interior, node)
        if position >= grid.interior.size or grid.interior[position] != node:
            raise ValueError(f"source node {node} is not interior")
        inner = grid.interior.size
        d = np.zeros(m * inner)
        d[(component - 1) * inner + position] = result.source_scale / vol
        sigma_unknown = _factorize_solve(J.T, d)

    solve_residual = float(np.max(np.abs(J.T @ sigma_unknown - d)))
    inner = grid.interior.size
    fields = tuple(
        ScalarField(grid, grid.embed(sigma_unknown[j * inner : (j + 1) * inner])) for j in range(m)
    )
    scale = result.source_scale if result.source_scale else 1.0
    flux_nodes = vol * (result.boundary_coupling.T @ sigma_unknown) / scale
    weighted = sum(
        vol * float(np.sum(w * s.values)) for w, s in zip(result.mass_weights, fields)
    )
    return AdjointSolution(
        result=result,
        sigma=fields,
        source_node=node,
        component=component,
        boundary_flux=float(np.sum(flux_nodes)),
        boundary_flux_nodes=flux_nodes,
        mass_weighted=weighted,
        solve_residual=solve_residual,
    )


def _check_pair(adj: AdjointSolution, result: SolveResult) -> None:
    if adj.result is not result:
        raise MismatchedPair("adjoint solution was computed from a different result")


def mass_identity_check(adj: AdjointSolution, result: SolveResult) -> float:
    """Residual of ``sum_j int w_j sigma_j = 1 + boundary_flux``.

    The weights ``w_j`` are the zeroth-order coefficients of the linearized
    operator (row sums of the coupling block), the flux is the
    boundary-coupling block of the Jacobian applied to ``sigma``.
    """
    _check_pair(adj, result)
    return abs(adj.mass_weighted - 1.0 - adj.boundary_flux)


# Matrix-free transpose --------------------------------------------------------


def _neighbor(grid: Grid, f: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Values at ``i + step*e_axis``; ghost nodes outside the box are zero."""
    arr = f.reshape(grid.shape)
    if grid.is_torus:
        return np.roll(arr, -step, axis=axis).reshape(-1)
    out = np.zeros_like(arr)
    src = [slice(None)] * grid.dim
    dst = [slice(None)] * grid.dim
    if step > 0:
        src[axis], dst[axis] = slice(step, None), slice(None, -step)
    else:
        src[axis], dst[axis] = slice(None, step), slice(-step, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out.reshape(-1)


def apply_adjoint(result: SolveResult, sigma_unknown: np.ndarray) -> np.ndarray:
    """``J^T sigma`` assembled in divergence form without forming ``J``."""
    lin = result.linearization
    grid = lin.grid
    h = grid.h
    m = lin.components
    inner = grid.interior
    if result.kind == CELL_SCALAR:
        inner = np.arange(grid.node_count)
    k_inner = inner.size
    sig = []
    for j in range(m):
        full = np.zeros(grid.node_count)
        full[inner] = sigma_unknown[j * k_inner : (j + 1) * k_inner]
        sig.append(full)
    out = []
    for k in range(m):
        acc = sum(np.asarray(lin.zeroth[j][k], float) * sig[j] for j in range(m))
        acc = acc + np.zeros(grid.node_count)
        s = sig[k]
        for axis in range(grid.dim):
            wb = lin.back[k][:, axis] * s
            wf = lin.fwd[k][:, axis] * s
            acc += (wb - _neighbor(grid, wb, axis, 1)) / h
            acc += (_neighbor(grid, wf, axis, -1) - wf) / h
            acc -= lin.viscosity * (
                _neighbor(grid, s, axis, 1) - 2.0 * s + _neighbor(grid, s, axis, -1)
            ) / h**2
        out.append(acc[inner])
    return np.concatenate(out)


def transpose_consistency(result: SolveResult, n_pairs: int = 100, seed: int = 0) -> float:
    """Largest ``|<J a, b> - <a, J^T b>| / (|J a| |b|)`` over random pairs.

    ``J a`` uses the assembled sparse Jacobian and ``J^T b`` the matrix-free
    divergence form, so the check compares two independent code paths.
    """
    rng = np.random.default_rng(seed)
    J = result.jacobian
    worst = 0.0
    for _ in range(n_pairs):
        a = rng.standard_normal(J.shape[1])
        b = rng.standard_normal(J.shape[0])
        Ja = J @ a
        lhs = float(Ja @ b)
        rhs = float(a @ apply_adjoint(result, b))
        scale = float(np.linalg.norm(Ja) * np.linalg.norm(b)) or 1.0
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


# Hessian integrals ------------------------------------------------------------


@dataclass(frozen=True)
class HessianIntegral:
    value: float
    hessian_term: float
    gradient_term: float
    unweighted: float


def _hessian_weight(result: SolveResult) -> float:
    if result.kind == CELL_SYSTEM:
        return result.eps**2
    if result.kind == CELL_SCALAR:
        return result.eps**2
    return result.eps


def hessian_integral(adj: AdjointSolution, result: SolveResult) -> HessianIntegral:
    """Viscosity-weighted ``int |D^2 u|^2 sigma`` summed over components.

    For the penalized obstacle problem the gradient term
    ``(1/2) int (1 + gamma_eps') |Du|^2 sigma`` is added to ``value``.
    """
    _check_pair(adj, result)
    grid = result.grid
    vol = grid.cell_volume
    unweighted = 0.0
    for u, s in zip(result.values(), adj.values()):
        d2 = hessian(grid, u)
        unweighted += vol * float(np.sum(np.sum(d2**2, axis=(1, 2)) * s))
    weighted = _hessian_weight(result) * unweighted
    gradient = 0.0
    if result.kind == OBSTACLE:
        du = central_gradient(grid, result.u)
        gradient = 0.5 * vol * float(np.sum(result.mass_weights[0] * np.sum(du**2, axis=1) * adj.values()[0]))
    return HessianIntegral(weighted + gradient, weighted, gradient, unweighted)


# Epsilon derivative -----------------------------------------------------------


def epsilon_derivative(base: SolveResult, bumped: SolveResult) -> float:
    """Finite-difference ``max |d u / d eps|`` between two solves.

    For the coupled cell problem the differentiated quantity is ``eps * u``,
    for the scalar cell problem it is the effective Hamiltonian.
    """
    deps = bumped.eps - base.eps
    if deps == 0:
        raise ValueError("the two results share the same parameter")
    if base.kind == CELL_SCALAR:
        return abs(bumped.hbar[0] - base.hbar[0]) / abs(deps)
    if base.kind == CELL_SYSTEM:
        pairs = [(bumped.eps * b, base.eps * a) for a, b in zip(base.values(), bumped.values())]
    else:
        pairs = list(zip(bumped.values(), base.values()))
    return max(float(np.max(np.abs(b - a))) for b, a in pairs) / abs(deps)


def epsilon_derivative_bound(
    spec, eps: float, deps: float | None = None, warm_start=None,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> float:
    """Surrogate of ``max |u_eps|`` from solves at ``eps`` and ``eps + deps``."""
    deps = 1e-3 * eps if deps is None else deps
    if not 0 < deps:
        raise ValueError("deps must be positive")
    base = solve(spec, eps, warm_start, settings)
    bumped = solve(spec, eps + deps, base, settings)
    return epsilon_derivative(base, bumped)


# Measure quadratures ------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Smooth ``phi(x, p)`` with the derivatives the transport identity needs.

    Each callable maps ``(x, p)`` arrays of shape ``(m, n)`` to the value
    ``(m,)``, ``grad_x``/``grad_p`` ``(m, n)``, ``laplacian_x`` ``(m,)``,
    ``hess_xp`` ``(m, n, n)`` indexed ``[x_i, p_j]`` and ``hess_pp``
    ``(m, n, n)``. Missing derivatives are taken to be zero.
    """

    value: Callable
    grad_x: Callable | None = None
    grad_p: Callable | None = None
    laplacian_x: Callable | None = None
    hess_xp: Callable | None = None
    hess_pp: Callable | None = None
    spatial: Callable | None = None
    name: str = "phi"

    __test__ = False  # keep pytest from collecting this class

    @property
    def depends_on_p(self) -> bool:
        return any(f is not None for f in (self.grad_p, self.hess_xp, self.hess_pp))

    def spatial_parts(self, x):
        """Value, x-gradient and x-Laplacian for a momentum-free function."""
        if self.spatial is not None:
            return self.spatial(x)
        m, n = x.shape
        p = np.zeros_like(x)
        return (
            np.asarray(self.value(x, p), float) * np.ones(m),
            self._or_zero(self.grad_x, x, p, (m, n)),
            self._or_zero(self.laplacian_x, x, p, (m,)),
        )

    def _or_zero(self, fn, x, p, shape):
        return np.zeros(shape) if fn is None else np.asarray(fn(x, p), float)

    def evaluate(self, x, p):
        m, n = x.shape
        return (
            np.asarray(self.value(x, p), float) * np.ones(m),
            self._or_zero(self.grad_x, x, p, (m, n)),
            self._or_zero(self.grad_p, x, p, (m, n)),
            self._or_zero(self.laplacian_x, x, p, (m,)),
            self._or_zero(self.hess_xp, x, p, (m, n, n)),
            self._or_zero(self.hess_pp, x, p, (m, n, n)),
        )


def constant_test_function(c: float = 1.0) -> TestFunction:
    return TestFunction(value=lambda x, p: np.full(x.shape[0], float(c)), name=f"const{c:g}")


def sine_test_function() -> TestFunction:
    """``prod_i sin(pi x_i)``: vanishes on the box boundary, one-signed Laplacian."""

    def value(x, p):
        return np.prod(np.sin(np.pi * x), axis=1)

    def grad(x, p):
        s, c = np.sin(np.pi * x), np.cos(np.pi * x)
        out = np.empty_like(x)
        for i in range(x.shape[1]):
            others = np.prod(np.delete(s, i, axis=1), axis=1) if x.shape[1] > 1 else 1.0
            out[:, i] = np.pi * c[:, i] * others
        return out

    def lap(x, p):
        return -x.shape[1] * np.pi**2 * value(x, p)

    return TestFunction(value=value, grad_x=grad, laplacian_x=lap, name="sine")


@dataclass(frozen=True)
class MeasureQuadratures:
    mu_int: float
    gamma1_int: float
    gamma2_int: float
    m_trace: float
    bracket_int: float
    identity_residual: float
    reduced_residual: float


def measure_quadratures(adj: AdjointSolution, result: SolveResult, phi: TestFunction) -> MeasureQuadratures:
    """Finite-eps quadratures of ``phi`` against the adjoint measure.

    ``identity_residual`` is the defect of the full transport identity at
    this ``eps``; ``reduced_residual`` is the defect of its eps-free form
    ``gamma1 + gamma2 + int {H, phi} sigma = phi(x0)``, meaningful for
    ``phi`` independent of ``p``.
    """
    _check_pair(adj, result)
    if result.kind != OBSTACLE:
        raise TypeError("measure quadratures are defined for the obstacle problem")
    spec = result.spec
    grid = result.grid
    vol = grid.cell_volume
    eps = result.eps
    x = grid.coords
    u = result.u
    sigma = adj.values()[0]
    du = central_gradient(grid, u)
    dpsi = central_gradient(grid, spec.psi)
    d2u = hessian(grid, u)
    weight = 1.0 + penalty_eval(PENALTY, eps, u - spec.psi)[1]

    val, gx, gp, lapx, hxp, hpp = phi.evaluate(x, du)
    H = spec.hamiltonian
    bracket = np.sum(H.grad_p(x, du) * gx, axis=1) - np.sum(H.grad_x(x, du) * gp, axis=1)

    def integral(f):
        return vol * float(np.sum(f * sigma))

    mu_int = integral(val)
    gamma1 = integral(weight * val)
    boundary = grid.boundary
    gamma2 = -float(np.sum(adj.boundary_flux_nodes * val[boundary]))
    m_trace = eps * integral(np.einsum("mij,mik,mjk->m", d2u, d2u, hpp))
    bracket_int = integral(bracket)

    src = adj.source_node
    lhs = (
        integral((np.sum(gp * (du - dpsi), axis=1) - val) * weight)
        + integral(np.sum(gp * dpsi, axis=1) - bracket)
        + val[src]
        - gamma2
    )
    rhs = -eps * integral(lapx + 2.0 * np.einsum("mij,mij->m", hxp, d2u)) - m_trace
    reduced = abs(gamma1 + gamma2 + bracket_int - val[src])
    return MeasureQuadratures(
        mu_int=mu_int,
        gamma1_int=gamma1,
        gamma2_int=gamma2,
        m_trace=m_trace,
        bracket_int=bracket_int,
        identity_residual=abs(lhs - rhs),
        reduced_residual=reduced,
    )


__all__ = [
    "AdjointSolution", "solve_adjoint", "mass_identity_check", "apply_adjoint",
    "transpose_consistency", "HessianIntegral", "hessian_integral",
    "epsilon_derivative", "epsilon_derivative_bound", "TestFunction",
    "constant_test_function", "sine_test_function", "MeasureQuadratures",
    "measure_quadratures", "CellSolveResult",
]
