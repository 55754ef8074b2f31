"""Newton solvers for the penalized and viscous problems, and direct
reference solvers for their limits on the same grid.

Every regularized solve returns the :class:`Linearization` of the discrete
residual at the solution together with its sparse restriction to the
unknowns, so that adjoint computations transpose exactly the operator that
was solved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import LaxFriedrichs, Linearization
from .errors import InvalidSpec, NonConvergence
from .grid import Grid, ScalarField
from .models import (
    CellSystemSpec,
    CoupledSystemSpec,
    HamiltonianModel,
    ObstacleProblemSpec,
    ObstacleSystemSpec,
    PenaltyModel,
    penalty_eval,
)

log = logging.getLogger(__name__)

PENALTY = PenaltyModel()

OBSTACLE = "obstacle"
SYSTEM = "system"
OBSTACLE_SYSTEM = "obstacle_system"
CELL_SYSTEM = "cell_system"
CELL_SCALAR = "cell_scalar"


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 60
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 2.0**-30
    p_range: float = 3.0
    continuation_factor: float = 4.0
    continuation_start: float = 0.25
    reference_eps_floor: float = 1e-4
    kappa_start: float = 0.05
    kappa_factor: float = 8.0
    kappa_min: float = 1e-6


DEFAULT_SETTINGS = SolverSettings()


@dataclass(frozen=True)
class NewtonOutcome:
    x: np.ndarray
    residual: np.ndarray
    jacobian: sp.csr_matrix
    iterations: int
    history: tuple


def newton(
    system, x0: np.ndarray, tol: float, settings: SolverSettings = DEFAULT_SETTINGS, damped: bool = True
) -> NewtonOutcome:
    """Damped Newton iteration with an Armijo line search on the residual 2-norm.

    ``system(x, jac)`` returns the residual and, when ``jac`` is true, the
    sparse Jacobian. The stopping test is ``max|F| <= tol`` with ``tol``
    raised, if necessary, to the roundoff floor of the residual (see
    :func:`roundoff_floor`). With ``damped=False`` full steps are always
    taken, which for max-type residuals is policy iteration.
    """
    x = np.array(x0, dtype=float, copy=True)
    F, J = system(x, True)
    merit = float(F @ F)
    history = [np.sqrt(merit)]
    for it in range(settings.max_iter + 1):
        if not np.all(np.isfinite(F)):
            raise NonConvergence("residual is not finite", it, np.inf)
        if np.max(np.abs(F), initial=0.0) <= max(tol, roundoff_floor(J, x)):
            return NewtonOutcome(x, F, J, it, tuple(history))
        if it == settings.max_iter:
            break
        step = spla.spsolve(sp.csc_matrix(J), -F)
        if not np.all(np.isfinite(step)):
            raise NonConvergence("Newton step is not finite", it, float(np.max(np.abs(F))))
        t = 1.0
        while damped:
            trial = x + t * step
            F_trial, _ = system(trial, False)
            m_trial = float(F_trial @ F_trial)
            if np.isfinite(m_trial) and m_trial <= (1.0 - 2.0 * settings.armijo * t) * merit:
                break
            t *= settings.backtrack
            if t < settings.min_step:
                raise NonConvergence(
                    f"line search failed at iteration {it}", it, float(np.max(np.abs(F)))
                )
        x = x + t * step
        F, J = system(x, True)
        merit = float(F @ F)
        history.append(np.sqrt(merit))
    raise NonConvergence(
        f"no convergence in {settings.max_iter} iterations", settings.max_iter, float(np.max(np.abs(F)))
    )


def roundoff_floor(J, x) -> float:
    """Size of the residual error caused by rounding the stencil sums.

    With viscosity ``nu`` the stencil entries grow like ``nu / h**2``, so on
    fine grids a fixed absolute tolerance can sit below what floating point
    can resolve.
    """
    row_norm = float(abs(J).sum(axis=1).max()) if J.shape[0] else 0.0
    return 4.0 * np.finfo(float).eps * row_norm * max(1.0, float(np.max(np.abs(x), initial=0.0)))


# Results ------------------------------------------------------------------


@dataclass(frozen=True)
class SolveResult:
    kind: str
    spec: object
    eps: float
    fields: tuple
    residual_linf: float
    newton_iters: int
    jacobian: sp.csr_matrix
    boundary_coupling: sp.csr_matrix
    linearization: Linearization
    mass_weights: tuple
    source_scale: float
    tolerance: float
    residual_history: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    settings: SolverSettings = DEFAULT_SETTINGS

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    @property
    def u(self) -> np.ndarray:
        return self.fields[0].values

    @property
    def components(self) -> int:
        return len(self.fields)

    def values(self) -> tuple:
        return tuple(f.values for f in self.fields)


@dataclass(frozen=True)
class CellSolveResult(SolveResult):
    hbar: tuple = ()
    hbar_spread: tuple = ()
    anchor: int | None = None
    momentum: np.ndarray | None = None

    @property
    def mu(self) -> float:
        """Invariant ``c2 Hbar_1 + c1 Hbar_2`` of the coupled cell problem."""
        if self.kind != CELL_SYSTEM:
            raise AttributeError("mu is defined for the coupled cell problem only")
        return self.spec.c2 * self.hbar[0] + self.spec.c1 * self.hbar[1]


# Problem assemblies ---------------------------------------------------------


class _Assembly:
    """Residual on stacked node fields, restricted to the unknown rows."""

    grid: Grid
    components: int

    def evaluate(self, fields):  # pragma: no cover - interface
        raise NotImplementedError

    def mass_weights(self, fields):  # pragma: no cover - interface
        raise NotImplementedError

    source_scale = 1.0
    policy = False  # max-type residual solved by undamped policy iteration

    def unpack(self, x: np.ndarray) -> list:
        g = self.grid
        m = g.interior.size
        return [g.embed(x[j * m : (j + 1) * m]) for j in range(self.components)]

    def pack(self, fields) -> np.ndarray:
        return np.concatenate([f[self.grid.interior] for f in fields])

    def __call__(self, x, jac):
        fields = self.unpack(x)
        residuals, lin = self.evaluate(fields)
        F = self.pack(residuals)
        return F, (lin.split()[0] if jac else None)


class _PenalizedObstacle(_Assembly):
    components = 1

    def __init__(self, spec: ObstacleProblemSpec, eps: float, settings: SolverSettings):
        self.spec, self.eps, self.grid = spec, eps, spec.grid
        self.scheme = LaxFriedrichs(self.grid, spec.hamiltonian, settings.p_range)

    def evaluate(self, fields):
        (u,) = fields
        g = self.grid
        value, back, fwd = self.scheme.evaluate(u)
        pen, dpen, _ = penalty_eval(PENALTY, self.eps, u - self.spec.psi)
        F = u + value + pen - self.eps * (g.laplacian_matrix @ u)
        return [F], Linearization(g, ((1.0 + dpen,),), (back,), (fwd,), self.eps)

    def mass_weights(self, fields):
        (u,) = fields
        return (1.0 + penalty_eval(PENALTY, self.eps, u - self.spec.psi)[1],)


class _CoupledSystem(_Assembly):
    components = 2

    def __init__(self, spec: CoupledSystemSpec, eps: float, settings: SolverSettings):
        self.spec, self.eps, self.grid = spec, eps, spec.grid
        self.schemes = (
            LaxFriedrichs(self.grid, spec.H1, settings.p_range),
            LaxFriedrichs(self.grid, spec.H2, settings.p_range),
        )

    def evaluate(self, fields):
        g, c = self.grid, self.spec.coupling
        out, backs, fwds = [], [], []
        for j, (scheme, u) in enumerate(zip(self.schemes, fields)):
            value, back, fwd = scheme.evaluate(u)
            out.append(c[j, 0] * fields[0] + c[j, 1] * fields[1] + value
                       - self.eps * (g.laplacian_matrix @ u))
            backs.append(back)
            fwds.append(fwd)
        zeroth = ((c[0, 0], c[0, 1]), (c[1, 0], c[1, 1]))
        return out, Linearization(g, zeroth, tuple(backs), tuple(fwds), self.eps)

    def mass_weights(self, fields):
        n = self.grid.node_count
        c = self.spec.coupling
        return (np.full(n, c[0].sum()), np.full(n, c[1].sum()))


class _PenalizedObstacleSystem(_Assembly):
    components = 2

    def __init__(self, spec: ObstacleSystemSpec, eps: float, settings: SolverSettings):
        self.spec, self.eps, self.grid = spec, eps, spec.grid
        self.schemes = (
            LaxFriedrichs(self.grid, spec.H1, settings.p_range),
            LaxFriedrichs(self.grid, spec.H2, settings.p_range),
        )

    def gaps(self, fields):
        u1, u2 = fields
        return u1 - u2 - self.spec.psi1, u2 - u1 - self.spec.psi2

    def evaluate(self, fields):
        g = self.grid
        thetas = self.gaps(fields)
        out, backs, fwds, slopes = [], [], [], []
        for scheme, u, theta in zip(self.schemes, fields, thetas):
            value, back, fwd = scheme.evaluate(u)
            pen, dpen, _ = penalty_eval(PENALTY, self.eps, theta)
            out.append(u + value + pen - self.eps * (g.laplacian_matrix @ u))
            backs.append(back)
            fwds.append(fwd)
            slopes.append(dpen)
        zeroth = ((1.0 + slopes[0], -slopes[0]), (-slopes[1], 1.0 + slopes[1]))
        return out, Linearization(g, zeroth, tuple(backs), tuple(fwds), self.eps)

    def mass_weights(self, fields):
        n = self.grid.node_count
        return (np.ones(n), np.ones(n))


class _CellSystem(_Assembly):
    components = 2

    def __init__(self, spec: CellSystemSpec, eps: float, settings: SolverSettings):
        self.spec, self.eps, self.grid = spec, eps, spec.grid
        self.schemes = (
            LaxFriedrichs(self.grid, spec.H1, settings.p_range, spec.P),
            LaxFriedrichs(self.grid, spec.H2, settings.p_range, spec.P),
        )
        self.source_scale = eps

    def evaluate(self, fields):
        g, eps = self.grid, self.eps
        c1, c2 = self.spec.c1, self.spec.c2
        u1, u2 = fields
        v1, b1, f1 = self.schemes[0].evaluate(u1)
        v2, b2, f2 = self.schemes[1].evaluate(u2)
        visc = eps * eps
        r1 = (c1 + eps) * u1 - c1 * u2 + v1 - visc * (g.laplacian_matrix @ u1)
        r2 = (c2 + eps) * u2 - c2 * u1 + v2 - visc * (g.laplacian_matrix @ u2)
        zeroth = ((c1 + eps, -c1), (-c2, c2 + eps))
        return [r1, r2], Linearization(g, zeroth, (b1, b2), (f1, f2), visc)

    def mass_weights(self, fields):
        # Row sums are eps; the source carries the same factor, so unit weights remain.
        n = self.grid.node_count
        return (np.ones(n), np.ones(n))


# Shared driver ---------------------------------------------------------------


def _problem_scale(assembly: _Assembly) -> float:
    zero = [np.zeros(assembly.grid.node_count) for _ in range(assembly.components)]
    F = assembly.pack(assembly.evaluate(zero)[0])
    return max(1.0, float(np.max(np.abs(F))))


def _initial(assembly: _Assembly, warm_start) -> np.ndarray:
    g = assembly.grid
    if warm_start is None:
        return np.zeros(assembly.components * g.interior.size)
    if isinstance(warm_start, SolveResult):
        warm_start = warm_start.values()
    if assembly.components == 1 and not isinstance(warm_start, (tuple, list)):
        warm_start = (warm_start,)
    fields = [np.asarray(getattr(w, "values", w), dtype=float) for w in warm_start]
    if len(fields) != assembly.components or any(f.size != g.node_count for f in fields):
        raise InvalidSpec("warm start does not match the problem layout")
    return assembly.pack(fields)


def _solve_regularized(factory, eps: float, warm_start, settings: SolverSettings):
    """Newton at ``eps``; on failure, descend a geometric ladder of larger ``eps``."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    assembly = factory(eps)
    tol = settings.tol * _problem_scale(assembly)
    x0 = _initial(assembly, warm_start)
    try:
        return assembly, newton(assembly, x0, tol, settings), tol
    except NonConvergence as exc:
        log.info("direct Newton failed at eps=%g (%s); using continuation", eps, exc)
    ladder = []
    level = eps * settings.continuation_factor
    while True:
        ladder.append(level)
        if level >= settings.continuation_start:
            break
        level *= settings.continuation_factor
    x = _initial(assembly, None) if warm_start is None else x0
    for level in reversed(ladder):
        x = newton(factory(level), x, settings.tol * _problem_scale(factory(level)), settings).x
    return assembly, newton(assembly, x, tol, settings), tol


def _package(kind, spec, eps, assembly, outcome, tol, settings, diagnostics_fn, cls=SolveResult, **extra):
    fields = assembly.unpack(outcome.x)
    _, lin = assembly.evaluate(fields)
    jac, coupling = lin.split()
    grid = assembly.grid
    diagnostics = diagnostics_fn(assembly, fields)
    return cls(
        kind=kind,
        spec=spec,
        eps=float(eps),
        fields=tuple(ScalarField(grid, f) for f in fields),
        residual_linf=float(np.max(np.abs(outcome.residual), initial=0.0)),
        newton_iters=outcome.iterations,
        jacobian=jac,
        boundary_coupling=coupling,
        linearization=lin,
        mass_weights=tuple(np.asarray(w) for w in assembly.mass_weights(fields)),
        source_scale=float(assembly.source_scale),
        tolerance=max(tol, roundoff_floor(outcome.jacobian, outcome.x)),
        residual_history=outcome.history,
        diagnostics=diagnostics,
        settings=settings,
        **extra,
    )


def _shape_diagnostics(grid: Grid, fields, schemes) -> dict:
    lip = max(
        float(np.max(np.abs(d @ f)[grid.interior], initial=0.0))
        for f in fields
        for d in grid.forward_difference
    )
    nodes = grid.interior
    ratio = max(s.monotonicity_ratio(f, nodes) for s, f in zip(schemes, fields))
    return {
        "sup_norm": max(float(np.max(np.abs(f))) for f in fields),
        "lipschitz": lip,
        "monotonicity_ratio": ratio,
        "monotone": bool(ratio <= 1.0 + 1e-12),
    }


# Public solvers -------------------------------------------------------------


def solve_penalized_obstacle(
    spec: ObstacleProblemSpec, eps: float, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> SolveResult:
    """Solve ``u + Hhat(x, D^-u, D^+u) + gamma_eps(u - psi) - eps Lap u = 0`` with ``u = 0`` on the boundary."""

    def diagnostics(assembly, fields):
        (u,) = fields
        inner = assembly.grid.interior
        gap = (u - spec.psi)[inner]
        pen = penalty_eval(PENALTY, eps, u - spec.psi)[0][inner]
        out = _shape_diagnostics(assembly.grid, fields, [assembly.scheme])
        out.update(
            overshoot=float(np.max(gap, initial=-np.inf)) / eps,
            penalty_max=float(np.max(pen, initial=0.0)),
        )
        return out

    assembly, outcome, tol = _solve_regularized(
        lambda e: _PenalizedObstacle(spec, e, settings), eps, warm_start, settings
    )
    return _package(OBSTACLE, spec, eps, assembly, outcome, tol, settings, diagnostics)


def solve_coupled_system(
    spec: CoupledSystemSpec, eps: float, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> SolveResult:
    """Solve the monotone weakly coupled pair with viscosity ``eps``."""

    def diagnostics(assembly, fields):
        return _shape_diagnostics(assembly.grid, fields, assembly.schemes)

    assembly, outcome, tol = _solve_regularized(
        lambda e: _CoupledSystem(spec, e, settings), eps, warm_start, settings
    )
    return _package(SYSTEM, spec, eps, assembly, outcome, tol, settings, diagnostics)


def solve_obstacle_system(
    spec: ObstacleSystemSpec, eps: float, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> SolveResult:
    """Solve the penalized switching system with gaps ``u1 - u2 - psi1`` and ``u2 - u1 - psi2``."""

    def diagnostics(assembly, fields):
        inner = assembly.grid.interior
        out = _shape_diagnostics(assembly.grid, fields, assembly.schemes)
        thetas = assembly.gaps(fields)
        out["theta_over_eps"] = max(float(np.max(t[inner])) for t in thetas) / eps
        out["penalty_max"] = max(
            float(np.max(penalty_eval(PENALTY, eps, t)[0][inner])) for t in thetas
        )
        return out

    assembly, outcome, tol = _solve_regularized(
        lambda e: _PenalizedObstacleSystem(spec, e, settings), eps, warm_start, settings
    )
    return _package(OBSTACLE_SYSTEM, spec, eps, assembly, outcome, tol, settings, diagnostics)


def solve_system_cell(
    spec: CellSystemSpec, eps: float, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> CellSolveResult:
    """Solve the discounted coupled cell problem with viscosity ``eps**2``.

    The effective Hamiltonians are estimated as ``-mean(eps * u_j)``.
    """

    def diagnostics(assembly, fields):
        out = _shape_diagnostics(assembly.grid, fields, assembly.schemes)
        out["scaled_sup_norm"] = eps * out["sup_norm"]
        return out

    assembly, outcome, tol = _solve_regularized(
        lambda e: _CellSystem(spec, e, settings), eps, warm_start, settings
    )
    fields = assembly.unpack(outcome.x)
    hbar = tuple(-float(np.mean(eps * f)) for f in fields)
    spread = tuple(float(np.ptp(eps * f)) for f in fields)
    return _package(
        CELL_SYSTEM, spec, eps, assembly, outcome, tol, settings, diagnostics,
        cls=CellSolveResult, hbar=hbar, hbar_spread=spread, momentum=spec.P,
    )


# Scalar cell problem ---------------------------------------------------------


@dataclass(frozen=True)
class ScalarCellSpec:
    grid: Grid
    hamiltonian: HamiltonianModel
    P: np.ndarray


class _ScalarCell:
    def __init__(self, grid, hamiltonian, P, eta, anchor, settings):
        self.grid, self.eta, self.anchor = grid, eta, anchor
        self.scheme = LaxFriedrichs(grid, hamiltonian, settings.p_range, P)
        n = grid.node_count
        if anchor is None:
            self.constraint = np.full(n, grid.cell_volume)
        else:
            self.constraint = np.zeros(n)
            self.constraint[anchor] = 1.0

    def linearize(self, u):
        value, back, fwd = self.scheme.evaluate(u)
        visc = 0.5 * self.eta**2
        F = value - visc * (self.grid.laplacian_matrix @ u)
        lin = Linearization(self.grid, ((0.0,),), (back,), (fwd,), visc)
        return F, lin

    def __call__(self, x, jac):
        u, hbar = x[:-1], x[-1]
        F, lin = self.linearize(u)
        res = np.append(F - hbar, self.constraint @ u)
        if not jac:
            return res, None
        n = u.size
        J = sp.bmat(
            [
                [lin.full_matrix(), sp.csr_matrix(-np.ones((n, 1)))],
                [sp.csr_matrix(self.constraint[None, :]), None],
            ],
            format="csr",
        )
        return res, J


def solve_scalar_cell(
    H: HamiltonianModel,
    P,
    eta: float,
    grid: Grid,
    warm_start=None,
    anchor: int | None = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> CellSolveResult:
    """Solve ``-(eta^2/2) Lap u + Hhat(x, P + D^-u, P + D^+u) = Hbar`` on the torus.

    The additive constant is fixed by ``mean(u) = 0`` or, when ``anchor`` is
    given, by ``u[anchor] = 0``; the returned field is shifted to zero mean.
    """
    if not grid.is_torus:
        raise InvalidSpec("cell problems need a torus grid")
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    P = np.zeros(grid.dim) if P is None else np.atleast_1d(np.asarray(P, float))
    problem = _ScalarCell(grid, H, P, eta, anchor, settings)
    if warm_start is None:
        u0 = np.zeros(grid.node_count)
    else:
        u0 = np.asarray(getattr(warm_start, "u", warm_start), float)
        u0 = u0 - (problem.constraint @ u0) / problem.constraint.sum()
    hbar0 = float(np.mean(H.eval(grid.coords, np.broadcast_to(P, grid.coords.shape))))
    if isinstance(warm_start, CellSolveResult):
        hbar0 = warm_start.hbar[0]
    x0 = np.append(u0, hbar0)
    F0, _ = problem(np.append(np.zeros(grid.node_count), 0.0), False)
    tol = settings.tol * max(1.0, float(np.max(np.abs(F0))))
    outcome = newton(problem, x0, tol, settings)
    u = outcome.x[:-1] - np.mean(outcome.x[:-1])
    hbar = float(outcome.x[-1])
    F, lin = problem.linearize(u)
    spec = ScalarCellSpec(grid, H, P)
    ones = np.ones(grid.node_count)
    return CellSolveResult(
        kind=CELL_SCALAR,
        spec=spec,
        eps=float(eta),
        fields=(ScalarField(grid, u),),
        residual_linf=float(np.max(np.abs(F - hbar))),
        newton_iters=outcome.iterations,
        jacobian=lin.full_matrix(),
        boundary_coupling=sp.csr_matrix((grid.node_count, 0)),
        linearization=lin,
        mass_weights=(ones,),
        source_scale=0.0,
        tolerance=max(tol, roundoff_floor(outcome.jacobian, outcome.x)),
        residual_history=outcome.history,
        diagnostics=_shape_diagnostics(grid, [u], [problem.scheme]),
        settings=settings,
        hbar=(hbar,),
        hbar_spread=(0.0,),
        anchor=anchor,
        momentum=P,
    )


# Direct reference solvers ------------------------------------------------------


def _kappa_ladder(settings: SolverSettings) -> list:
    out, k = [], settings.kappa_start
    while k >= settings.kappa_min:
        out.append(k)
        k /= settings.kappa_factor
    return out + [0.0]


def _descend(regularized, grid: Grid, settings: SolverSettings):
    """Regularized solutions down a geometric ladder ending near the mesh width."""
    floor = max(2.0 * grid.h, settings.reference_eps_floor)
    eps, result = settings.continuation_start, None
    while True:
        result = regularized(eps, result)
        if eps <= floor:
            return result
        eps = max(eps / settings.continuation_factor, floor)


def _solve_limit(factory, regularized, warm_start, settings: SolverSettings):
    """Policy iteration on the limit problem.

    Without a warm start the regularized problem is first solved down to
    ``eps`` of the order of the mesh width; its solution starts the
    iteration. A vanishing-viscosity ladder is the last resort.
    """
    limit = factory(0.0)
    tol = settings.tol * _problem_scale(limit)
    if warm_start is None:
        warm_start = _descend(regularized, limit.grid, settings)
    x0 = _initial(limit, warm_start)
    for damped in dict.fromkeys((not limit.policy, True)):
        try:
            return limit, newton(limit, x0, tol, settings, damped)
        except NonConvergence as exc:
            log.info("limit solve (damped=%s) failed: %s", damped, exc)
    x = x0
    for kappa in _kappa_ladder(settings):
        assembly = factory(kappa)
        outcome = newton(assembly, x, tol, settings, True)
        x = outcome.x
    return assembly, outcome


class _ObstacleLimit(_Assembly):
    """``max(u - psi, u + Hhat - kappa Lap u)`` with ties resolved to the obstacle."""

    components = 1
    policy = True

    def __init__(self, spec, kappa, settings):
        self.spec, self.grid = spec, spec.grid
        self.pde = _PenalizedObstacle(spec, 1.0, settings)
        self.kappa = kappa

    def branches(self, u):
        value, back, fwd = self.pde.scheme.evaluate(u)
        pde = u + value - self.kappa * (self.grid.laplacian_matrix @ u)
        return pde, u - self.spec.psi, Linearization(self.grid, ((1.0,),), (back,), (fwd,), self.kappa)

    def evaluate(self, fields):
        pde, obst, lin = self.branches(fields[0])
        return [np.maximum(pde, obst)], lin

    def __call__(self, x, jac):
        u = self.grid.embed(x)
        pde, obst, lin = self.branches(u)
        inner = self.grid.interior
        active = (obst >= pde)[inner]
        F = np.where(active, obst[inner], pde[inner])
        if not jac:
            return F, None
        J_pde = lin.split()[0]
        pick = sp.diags(active.astype(float))
        J = pick @ sp.identity(inner.size) + sp.diags((~active).astype(float)) @ J_pde
        return F, J.tocsr()


class _ObstacleSystemLimit(_Assembly):
    components = 2
    policy = True

    def __init__(self, spec, kappa, settings):
        self.spec, self.grid, self.kappa = spec, spec.grid, kappa
        self.schemes = (
            LaxFriedrichs(self.grid, spec.H1, settings.p_range),
            LaxFriedrichs(self.grid, spec.H2, settings.p_range),
        )

    def branches(self, fields):
        g = self.grid
        u1, u2 = fields
        thetas = (u1 - u2 - self.spec.psi1, u2 - u1 - self.spec.psi2)
        pdes, backs, fwds = [], [], []
        for scheme, u in zip(self.schemes, fields):
            value, back, fwd = scheme.evaluate(u)
            pdes.append(u + value - self.kappa * (g.laplacian_matrix @ u))
            backs.append(back)
            fwds.append(fwd)
        lin = Linearization(g, ((1.0, 0.0), (0.0, 1.0)), tuple(backs), tuple(fwds), self.kappa)
        return pdes, thetas, lin

    def evaluate(self, fields):
        pdes, thetas, lin = self.branches(fields)
        return [np.maximum(p, t) for p, t in zip(pdes, thetas)], lin

    def __call__(self, x, jac):
        inner = self.grid.interior
        m = inner.size
        pdes, thetas, lin = self.branches(self.unpack(x))
        act = [(t >= p)[inner] for p, t in zip(pdes, thetas)]
        # Both gap rows at one node would make the Jacobian singular; keep the larger gap.
        both = act[0] & act[1]
        if np.any(both):
            first = thetas[0][inner] >= thetas[1][inner]
            act[0] = act[0] & ~(both & ~first)
            act[1] = act[1] & ~(both & first)
        F = np.concatenate(
            [np.where(a, t[inner], p[inner]) for a, p, t in zip(act, pdes, thetas)]
        )
        if not jac:
            return F, None
        J_pde = lin.split()[0]
        eye = sp.identity(m)
        gap = sp.bmat([[eye, -eye], [-eye, eye]])
        active = np.concatenate(act).astype(float)
        J = sp.diags(active) @ gap + sp.diags(1.0 - active) @ J_pde
        return F, J.tocsr()


def solve_obstacle_direct(
    spec: ObstacleProblemSpec, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> ScalarField:
    """Limit problem ``max(u - psi, u + Hhat(x, D^-u, D^+u)) = 0`` by semismooth Newton."""
    assembly, outcome = _solve_limit(
        lambda k: _ObstacleLimit(spec, k, settings),
        lambda e, w: solve_penalized_obstacle(spec, e, w, settings),
        warm_start,
        settings,
    )
    return ScalarField(spec.grid, spec.grid.embed(outcome.x))


def solve_system_direct(
    spec: CoupledSystemSpec, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> tuple:
    """Limit of the coupled system without viscosity, on the same scheme."""
    assembly, outcome = _solve_limit(
        lambda k: _CoupledSystem(spec, k, settings),
        lambda e, w: solve_coupled_system(spec, e, w, settings),
        warm_start,
        settings,
    )
    return tuple(ScalarField(spec.grid, f) for f in assembly.unpack(outcome.x))


def solve_obstacle_system_direct(
    spec: ObstacleSystemSpec, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS
) -> tuple:
    """Limit switching system ``max(u_j - u_k - psi_j, u_j + Hhat_j) = 0``."""
    assembly, outcome = _solve_limit(
        lambda k: _ObstacleSystemLimit(spec, k, settings),
        lambda e, w: solve_obstacle_system(spec, e, w, settings),
        warm_start,
        settings,
    )
    return tuple(ScalarField(spec.grid, f) for f in assembly.unpack(outcome.x))


def limit_residual(spec, fields, settings: SolverSettings = DEFAULT_SETTINGS) -> float:
    """Max-norm residual of a direct solution in its limit form."""
    if isinstance(spec, ObstacleProblemSpec):
        assembly = _ObstacleLimit(spec, 0.0, settings)
    elif isinstance(spec, CoupledSystemSpec):
        assembly = _CoupledSystem(spec, 0.0, settings)
    elif isinstance(spec, ObstacleSystemSpec):
        assembly = _ObstacleSystemLimit(spec, 0.0, settings)
    else:
        raise TypeError(f"no limit problem for {type(spec).__name__}")
    if isinstance(fields, ScalarField):
        fields = (fields,)
    F, _ = assembly(assembly.pack([np.asarray(f.values, float) for f in fields]), False)
    return float(np.max(np.abs(F), initial=0.0))


def solve(spec, eps: float, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS) -> SolveResult:
    """Dispatch to the regularized solver matching ``spec``."""
    if isinstance(spec, ObstacleProblemSpec):
        return solve_penalized_obstacle(spec, eps, warm_start, settings)
    if isinstance(spec, CoupledSystemSpec):
        return solve_coupled_system(spec, eps, warm_start, settings)
    if isinstance(spec, ObstacleSystemSpec):
        return solve_obstacle_system(spec, eps, warm_start, settings)
    if isinstance(spec, CellSystemSpec):
        return solve_system_cell(spec, eps, warm_start, settings)
    if isinstance(spec, ScalarCellSpec):
        return solve_scalar_cell(spec.hamiltonian, spec.P, eps, spec.grid, warm_start, settings=settings)
    raise TypeError(f"unsupported spec {type(spec).__name__}")


def direct_reference(spec, warm_start=None, settings: SolverSettings = DEFAULT_SETTINGS) -> tuple:
    """Limit solution fields on the same grid and scheme."""
    if isinstance(spec, ObstacleProblemSpec):
        return (solve_obstacle_direct(spec, warm_start, settings),)
    if isinstance(spec, CoupledSystemSpec):
        return solve_system_direct(spec, warm_start, settings)
    if isinstance(spec, ObstacleSystemSpec):
        return solve_obstacle_system_direct(spec, warm_start, settings)
    raise TypeError(f"no direct solver for {type(spec).__name__}")


__all__ = [
    "SolverSettings", "SolveResult", "CellSolveResult", "ScalarCellSpec", "newton",
    "solve_penalized_obstacle", "solve_coupled_system", "solve_obstacle_system",
    "solve_system_cell", "solve_scalar_cell", "solve_obstacle_direct",
    "solve_system_direct", "solve_obstacle_system_direct", "limit_residual",
    "solve", "direct_reference",
]
