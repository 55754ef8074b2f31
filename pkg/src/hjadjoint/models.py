"""Problem data: Hamiltonians, the penalty family, and problem specifications.

Evaluators are vectorized: ``x`` and ``p`` are arrays of shape ``(m, dim)``
and scalar outputs have shape ``(m,)``.

Coercivity and superlinearity at infinity cannot be checked numerically;
every catalog entry satisfies them by construction (each is at least
quadratic in ``p`` with a bounded, smooth x-dependence).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidSpec
from .grid import Domain, Grid, central_gradient

TWO_PI = 2.0 * np.pi

# Labels of the structural hypotheses, reported verbatim by validation errors.
OBSTACLE_COMPATIBILITY = "H2.2"
COUPLING_SIGNS = "H3.2"
COUPLING_ROW_SUMS = "H3.3"
COUPLING_COMPATIBILITY = "H3.4"
CELL_COUPLING = "H4.2"
SYSTEM_CONVEXITY = "H5.1"
SYSTEM_DX_BOUND = "H5.3"
SYSTEM_COMPATIBILITY = "H5.4"


class Potential:
    """Smooth bounded potential V(x) depending on the first coordinate only."""

    def __init__(self, kind="zero", amplitude=1.0, table=None):
        self.kind = kind
        self.amplitude = float(amplitude)
        if kind == "zero":
            self.grad_bound = 0.0
        elif kind == "cosine":
            self.grad_bound = TWO_PI * abs(self.amplitude)
        elif kind == "table":
            values = np.asarray(table, dtype=float)
            if values.ndim != 1 or values.size < 3:
                raise InvalidSpec("potential table needs at least 3 samples")
            xs = np.linspace(0.0, 1.0, values.size + 1)
            self._spline = CubicSpline(xs, np.append(values, values[0]), bc_type="periodic")
            self._dspline = self._spline.derivative()
            # |V'| is maximal at a knot or where V'' vanishes
            crit = self._spline.derivative(2).roots(extrapolate=False)
            pts = np.concatenate([xs, crit[np.isfinite(crit)]])
            self.grad_bound = float(np.max(np.abs(self._dspline(pts))))
        else:
            raise InvalidSpec(f"unknown potential {kind!r}")

    def value(self, x: np.ndarray) -> np.ndarray:
        x1 = x[:, 0]
        if self.kind == "zero":
            return np.zeros_like(x1)
        if self.kind == "cosine":
            return self.amplitude * np.cos(TWO_PI * x1)
        return self._spline(np.mod(x1, 1.0))

    def grad(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x, dtype=float)
        if self.kind == "cosine":
            out[:, 0] = -TWO_PI * self.amplitude * np.sin(TWO_PI * x[:, 0])
        elif self.kind == "table":
            out[:, 0] = self._dspline(np.mod(x[:, 0], 1.0))
        return out

    @property
    def maximum(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "cosine":
            return abs(self.amplitude)
        return float(np.max(self._spline(np.linspace(0.0, 1.0, 4097))))


@dataclass(frozen=True)
class HamiltonianModel:
    """H(x, p) with analytic derivatives and structural flags."""

    catalog_id: str
    eval: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_p: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    convex_in_p: bool
    dx_bounded: bool
    dx_bound: float = np.inf
    params: dict = field(default_factory=dict)

    def __call__(self, x, p):
        return self.eval(x, p)


def hamiltonian_catalog(catalog_id: str, **params) -> HamiltonianModel:
    """Build a catalog Hamiltonian.

    Parameters
    ----------
    catalog_id : {"quadratic", "double_well", "linear_coercive"}
        ``quadratic`` is ``|p|^2/2 + V(x) - c``, ``double_well`` is
        ``(|p|^2 - 1)^2/4 + V(x) - c`` and ``linear_coercive`` is
        ``|p|^2/2 + b.p + V(x) - c``.
    potential : {"zero", "cosine", "table"}
    amplitude : float
        Coefficient of ``cos(2 pi x_1)`` for the cosine potential.
    table : sequence of float
        Samples of V on ``[0, 1)`` for the table potential.
    shift : float
        The constant ``c``.
    drift : sequence of float
        The vector ``b`` of ``linear_coercive``.
    """
    potential = Potential(
        params.get("potential", "zero"), params.get("amplitude", 1.0), params.get("table")
    )
    shift = float(params.get("shift", 0.0))

    if catalog_id == "quadratic":
        def value(x, p):
            return 0.5 * np.sum(p * p, axis=1) + potential.value(x) - shift

        def dp(x, p):
            return np.array(p, dtype=float, copy=True)

        convex = True
    elif catalog_id == "double_well":
        def value(x, p):
            return 0.25 * (np.sum(p * p, axis=1) - 1.0) ** 2 + potential.value(x) - shift

        def dp(x, p):
            return (np.sum(p * p, axis=1) - 1.0)[:, None] * p

        convex = False
    elif catalog_id == "linear_coercive":
        drift = np.atleast_1d(np.asarray(params.get("drift", [0.0]), dtype=float))

        def value(x, p):
            b = np.broadcast_to(drift, p.shape)
            return 0.5 * np.sum(p * p, axis=1) + np.sum(b * p, axis=1) + potential.value(x) - shift

        def dp(x, p):
            return p + np.broadcast_to(drift, p.shape)

        convex = True
    else:
        raise InvalidSpec(f"unknown hamiltonian id {catalog_id!r}")

    def dx(x, p):
        return potential.grad(x)

    return HamiltonianModel(
        catalog_id=catalog_id,
        eval=value,
        grad_p=dp,
        grad_x=dx,
        convex_in_p=convex,
        dx_bounded=True,
        dx_bound=potential.grad_bound,
        params=dict(params),
    )


def shifted(model: HamiltonianModel, constant: float) -> HamiltonianModel:
    """The Hamiltonian ``H + constant``."""
    return HamiltonianModel(
        catalog_id=model.catalog_id,
        eval=lambda x, p: model.eval(x, p) + constant,
        grad_p=model.grad_p,
        grad_x=model.grad_x,
        convex_in_p=model.convex_in_p,
        dx_bounded=model.dx_bounded,
        dx_bound=model.dx_bound,
        params={**model.params, "shift": model.params.get("shift", 0.0) - constant},
    )


# Penalty ------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyModel:
    """Reference penalty ``gamma(s) = s - 1 + exp(-s)`` for ``s > 0``, zero otherwise.

    It is C^1, convex, with derivative in ``(0, 1)`` on ``s > 0``.
    """

    def gamma(self, s):
        s = np.asarray(s, dtype=float)
        pos = np.maximum(s, 0.0)
        return np.where(s > 0, pos + np.expm1(-pos), 0.0)

    def gamma_prime(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s > 0, -np.expm1(-np.maximum(s, 0.0)), 0.0)


def penalty_eval(pm: PenaltyModel, eps: float, s):
    """Return ``(gamma_eps(s), gamma_eps'(s), d gamma_eps / d eps (s))``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    r = np.asarray(s, dtype=float) / eps
    g = pm.gamma(r)
    gp = pm.gamma_prime(r)
    return g, gp / eps, -(r / eps) * gp


# Specifications -----------------------------------------------------------


def _as_field(grid: Grid, values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(grid.node_count, float(arr))
    arr = arr.reshape(-1)
    if arr.size != grid.node_count:
        raise InvalidSpec(f"field has {arr.size} values, grid has {grid.node_count} nodes")
    return arr


def _require_box(grid: Grid, what: str) -> None:
    if grid.kind is not Domain.BOX:
        raise InvalidSpec(f"{what} needs a Dirichlet box grid")


@dataclass(frozen=True)
class ObstacleProblemSpec:
    grid: Grid
    hamiltonian: HamiltonianModel
    psi: np.ndarray

    def __post_init__(self):
        _require_box(self.grid, "obstacle problem")
        psi = _as_field(self.grid, self.psi)
        bad = np.flatnonzero(psi[self.grid.boundary] < 0)
        if bad.size:
            node = self.grid.boundary[bad[0]]
            raise InvalidSpec(f"obstacle negative on the boundary at node {node}")
        object.__setattr__(self, "psi", psi)


@dataclass(frozen=True)
class CoupledSystemSpec:
    grid: Grid
    c11: float
    c12: float
    c21: float
    c22: float
    H1: HamiltonianModel
    H2: HamiltonianModel

    def __post_init__(self):
        _require_box(self.grid, "coupled system")
        if self.c12 > 0 or self.c21 > 0:
            raise InvalidSpec(
                f"off-diagonal couplings must be nonpositive, got c12={self.c12}, c21={self.c21}",
                COUPLING_SIGNS,
            )
        if self.alpha <= 0:
            raise InvalidSpec(
                f"coupling row sums must be positive, got {self.c11 + self.c12}, {self.c21 + self.c22}",
                COUPLING_ROW_SUMS,
            )

    @property
    def coupling(self) -> np.ndarray:
        return np.array([[self.c11, self.c12], [self.c21, self.c22]])

    @property
    def alpha(self) -> float:
        return float(min(self.c11 + self.c12, self.c21 + self.c22))


@dataclass(frozen=True)
class CellSystemSpec:
    grid: Grid
    c1: float
    c2: float
    H1: HamiltonianModel
    H2: HamiltonianModel
    P: np.ndarray = None

    def __post_init__(self):
        if self.grid.kind is not Domain.TORUS:
            raise InvalidSpec("cell problems need a torus grid")
        if not (self.c1 > 0 and self.c2 > 0):
            raise InvalidSpec(f"couplings must be positive, got c1={self.c1}, c2={self.c2}", CELL_COUPLING)
        P = np.zeros(self.grid.dim) if self.P is None else np.atleast_1d(np.asarray(self.P, float))
        if P.size != self.grid.dim:
            raise InvalidSpec("momentum shift P must have one entry per dimension")
        object.__setattr__(self, "P", P)


@dataclass(frozen=True)
class ObstacleSystemSpec:
    grid: Grid
    H1: HamiltonianModel
    H2: HamiltonianModel
    psi1: np.ndarray
    psi2: np.ndarray

    def __post_init__(self):
        _require_box(self.grid, "obstacle system")
        for name, H in (("H1", self.H1), ("H2", self.H2)):
            if not H.convex_in_p:
                raise InvalidSpec(f"{name} must be convex in p", SYSTEM_CONVEXITY)
            if not (H.dx_bounded and np.isfinite(H.dx_bound)):
                raise InvalidSpec(f"{name} must have bounded x-derivative", SYSTEM_DX_BOUND)
        psi1 = _as_field(self.grid, self.psi1)
        psi2 = _as_field(self.grid, self.psi2)
        object.__setattr__(self, "psi1", psi1)
        object.__setattr__(self, "psi2", psi2)
        if self.alpha <= 0:
            raise InvalidSpec("obstacles must be bounded below by a positive constant")

    @property
    def alpha(self) -> float:
        return float(min(self.psi1.min(), self.psi2.min()))


# Compatibility ------------------------------------------------------------


@dataclass(frozen=True)
class CompatibilityReport:
    ok: bool
    min_slack: float
    worst_node: int


def _check_subsolution(grid, phis, psi_bounds):
    for phi in phis:
        on_boundary = np.flatnonzero(np.abs(phi[grid.boundary]) > 0)
        if on_boundary.size:
            raise InvalidSpec(
                f"test function must vanish on the boundary (node {grid.boundary[on_boundary[0]]})"
            )
    for lower, upper in psi_bounds:
        bad = np.flatnonzero((lower > upper + 0.0))
        if bad.size:
            raise InvalidSpec(f"test function violates the obstacle at node {bad[0]}")


def _report(grid: Grid, values: np.ndarray) -> CompatibilityReport:
    inner = values[grid.interior]
    k = int(np.argmax(inner))
    worst = float(inner[k])
    return CompatibilityReport(ok=bool(worst < 0), min_slack=-worst, worst_node=int(grid.interior[k]))


def check_compatibility(spec: ObstacleProblemSpec, phi) -> CompatibilityReport:
    """Nodewise test that ``phi + H(x, D phi) < 0`` with centered gradients."""
    grid = spec.grid
    phi = _as_field(grid, phi)
    _check_subsolution(grid, [phi], [(phi, spec.psi)])
    value = phi + spec.hamiltonian.eval(grid.coords, central_gradient(grid, phi))
    return _report(grid, value)


def check_system_compatibility(spec: CoupledSystemSpec, phi1, phi2) -> CompatibilityReport:
    grid = spec.grid
    phi1, phi2 = _as_field(grid, phi1), _as_field(grid, phi2)
    _check_subsolution(grid, [phi1, phi2], [])
    x = grid.coords
    r1 = spec.c11 * phi1 + spec.c12 * phi2 + spec.H1.eval(x, central_gradient(grid, phi1))
    r2 = spec.c21 * phi1 + spec.c22 * phi2 + spec.H2.eval(x, central_gradient(grid, phi2))
    return _report(grid, np.maximum(r1, r2))


def check_obstacle_system_compatibility(spec: ObstacleSystemSpec, phi1, phi2) -> CompatibilityReport:
    grid = spec.grid
    phi1, phi2 = _as_field(grid, phi1), _as_field(grid, phi2)
    diff = phi1 - phi2
    _check_subsolution(grid, [phi1, phi2], [(diff, spec.psi1), (-spec.psi2, diff)])
    x = grid.coords
    r1 = phi1 + spec.H1.eval(x, central_gradient(grid, phi1))
    r2 = phi2 + spec.H2.eval(x, central_gradient(grid, phi2))
    return _report(grid, np.maximum(r1, r2))
