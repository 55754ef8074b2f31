"""Monte Carlo checks of the stochastic representation of the penalized
obstacle problem.

Paths follow ``dx = -D_pH(x, Du(x)) dt + sqrt(2 eps) dW`` in the unit box
with Euler-Maruyama steps. Node fields are interpolated (bi)linearly. A
step that ends outside the box exits at the linearly interpolated crossing;
a step that stays inside may still exit with the Brownian-bridge crossing
probability ``exp(-d0 d1 / (eps dt))`` per face, at the mid-step.

Random numbers come from one Philox stream per block of paths, keyed by
``(seed, block index)``, so results do not depend on the thread count.
Paths are summarized, not stored; the Dynkin check replays the identical
simulation with the requested test function attached.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointSolution, TestFunction
from .errors import InvalidStart, MismatchedPair, StabilityViolation
from .grid import Grid, central_gradient, hessian
from .models import penalty_eval
from .solvers import OBSTACLE, PENALTY, SolveResult

log = logging.getLogger(__name__)

BLOCK_SIZE = 1 << 16


class _PathFields:
    """Interpolated solution data along paths.

    The base table holds ``Du``, ``u`` and ``psi``; ``D psi`` and ``D^2 u``
    are added only when a test function depends on the momentum.
    """

    def __init__(self, result: SolveResult, extended: bool):
        if result.kind != OBSTACLE:
            raise TypeError("path simulation needs a penalized obstacle solution")
        grid = result.grid
        n = grid.dim
        u = result.u
        psi = result.spec.psi
        columns = [central_gradient(grid, u), u, psi]
        if extended:
            d2u = hessian(grid, u).reshape(grid.node_count, n * n)
            d2u[grid.boundary_mask] = 0.0
            columns += [central_gradient(grid, psi), d2u]
        self.table = np.column_stack(columns)
        self.extended = extended
        self.grid = grid
        self.dim = n
        self.eps = result.eps
        self.hamiltonian = result.spec.hamiltonian

    def interpolate(self, x: np.ndarray) -> np.ndarray:
        g = self.grid
        N = g.cells
        s = x / g.h
        i0 = np.clip(np.floor(s).astype(int), 0, N - 1)
        t = s - i0
        T = self.table
        if self.dim == 1:
            i = i0[:, 0]
            w = t[:, 0:1]
            low = T[i]
            return low + (T[i + 1] - low) * w
        stride = N + 1
        base = i0[:, 0] * stride + i0[:, 1]
        wx, wy = t[:, 0:1], t[:, 1:2]
        return (
            T[base] * (1 - wx) * (1 - wy)
            + T[base + stride] * wx * (1 - wy)
            + T[base + 1] * (1 - wx) * wy
            + T[base + stride + 1] * wx * wy
        )

    def local(self, x: np.ndarray) -> dict:
        n = self.dim
        vals = self.interpolate(x)
        data = {"x": x, "p": vals[:, :n]}
        data["killing"] = 1.0 + penalty_eval(PENALTY, self.eps, vals[:, n] - vals[:, n + 1])[1]
        data["drift"] = -self.hamiltonian.grad_p(x, data["p"])
        if self.extended:
            data["dpsi"] = vals[:, n + 2 : 2 * n + 2]
            data["d2u"] = vals[:, 2 * n + 2 :].reshape(-1, n, n)
        return data


def generator(fields: _PathFields, phi: TestFunction, data: dict) -> tuple:
    """``phi`` and its generator along the position-momentum dynamics.

    The generator is ``{phi, H} + (1 + gamma_eps') D_p phi . (p - D psi)
    + D_p phi . D psi + eps (Lap_x phi + 2 phi_{x_i p_j} u_{x_i x_j}
    + phi_{p_j p_k} u_{x_i x_j} u_{x_i x_k})``.
    """
    x, p = data["x"], data["p"]
    if not phi.depends_on_p:
        val, gx, lapx = phi.spatial_parts(x)
        # {phi, H} reduces to -D_x phi . D_p H, i.e. the drift of the path
        return val, np.sum(gx * data["drift"], axis=1) + fields.eps * lapx
    val, gx, gp, lapx, hxp, hpp = phi.evaluate(x, p)
    H = fields.hamiltonian
    bracket = np.sum(gp * H.grad_x(x, p), axis=1) + np.sum(gx * data["drift"], axis=1)
    d2u = data["d2u"]
    dpsi = data["dpsi"]
    gen = (
        bracket
        + data["killing"] * np.sum(gp * (p - dpsi), axis=1)
        + np.sum(gp * dpsi, axis=1)
        + fields.eps
        * (
            lapx
            + 2.0 * np.einsum("mij,mij->m", hxp, d2u)
            + np.einsum("mij,mik,mjk->m", d2u, d2u, hpp)
        )
    )
    return val, gen


@dataclass(frozen=True)
class TrajectoryBatch:
    result: SolveResult
    start: np.ndarray
    eps: float
    dt: float
    horizon: float
    seed: int
    n_paths: int
    block_size: int
    exit_time: np.ndarray
    exited: np.ndarray
    final_state: np.ndarray
    occupation: np.ndarray
    paths: list | None = None
    observed: dict = field(default_factory=dict)

    @property
    def censored_fraction(self) -> float:
        return float(1.0 - np.mean(self.exited))

    @property
    def mean_exit_time(self) -> float:
        return float(np.mean(self.exit_time))

    @property
    def exit_time_variance(self) -> float:
        return float(np.var(self.exit_time, ddof=1))

    @property
    def exit_time_std_error(self) -> float:
        return float(np.sqrt(self.exit_time_variance / self.n_paths))

    def summary(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "eps": self.eps,
            "dt": self.dt,
            "horizon": self.horizon,
            "seed": self.seed,
            "mean_exit_time": self.mean_exit_time,
            "exit_time_variance": self.exit_time_variance,
            "exit_time_std_error": self.exit_time_std_error,
            "censored_fraction": self.censored_fraction,
        }


def stability_limit(grid: Grid, eps: float) -> float:
    return grid.h**2 / (2.0 * grid.dim * eps)


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _simulate_block(fields: _PathFields, start, count, dt, horizon, seed, block, phis, keep_paths):
    rng = _block_rng(seed, block)
    dim, eps = fields.dim, fields.eps
    grid = fields.grid

    exit_time = np.full(count, horizon)
    exited = np.zeros(count, dtype=bool)
    final = np.empty((count, dim))
    occupation = np.zeros(grid.node_count)
    residual = [np.zeros(count) for _ in phis]
    traces = [[start.copy()] for _ in range(count)] if keep_paths else None

    # compact state of the paths still inside
    ids = np.arange(count)
    x = np.tile(start, (count, 1))
    discount = np.ones(count)
    data = fields.local(x)
    initial, gen_prev, integral = [], [], []
    for phi in phis:
        val, gen = generator(fields, phi, data)
        initial.append(float(val[0]))
        gen_prev.append(gen)
        integral.append(np.zeros(count))

    t = 0.0
    while ids.size and t < horizon - 1e-15:
        step = min(dt, horizon - t)
        m = ids.size
        z = rng.standard_normal((m, dim))
        uniform = rng.random(m)
        sd = np.sqrt(2.0 * eps * step)
        x_new = x + data["drift"] * step + sd * z

        # Only paths within `reach` of a face before or after the step can
        # cross with non-negligible probability (bridge factor <= exp(-32)).
        reach = 8.0 * np.sqrt(eps * step)
        d_old = np.minimum(x, 1.0 - x).min(axis=1)
        d_new = np.minimum(x_new, 1.0 - x_new).min(axis=1)
        near = np.flatnonzero(np.minimum(d_old, d_new) < reach)

        theta = np.ones(m)
        leaving = np.zeros(m, dtype=bool)
        x_end = x_new
        if near.size:
            xo, xn = x[near], x_new[near]
            below, above = xn <= 0.0, xn >= 1.0
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(below, xo / (xo - xn), np.inf)
                frac = np.minimum(frac, np.where(above, (1.0 - xo) / (xn - xo), np.inf))
            th = frac.min(axis=1)
            explicit = np.isfinite(th)
            axis = frac.argmin(axis=1)
            hi_face = np.take_along_axis(above, axis[:, None], axis=1)[:, 0]

            lo = np.exp(-np.maximum(xo, 0) * np.maximum(xn, 0) / (eps * step))
            hi = np.exp(-np.maximum(1 - xo, 0) * np.maximum(1 - xn, 0) / (eps * step))
            stay = np.prod((1.0 - lo) * (1.0 - hi), axis=1)
            bridge = ~explicit & (uniform[near] < 1.0 - stay)
            pick = np.argmax(np.concatenate([lo, hi], axis=1), axis=1)
            th = np.where(bridge, 0.5, np.clip(th, 0.0, 1.0))
            axis = np.where(bridge, pick % dim, axis)
            hi_face = np.where(bridge, pick >= dim, hi_face)

            go = explicit | bridge
            if go.any():
                rows = near[go]
                leaving[rows] = True
                theta[rows] = th[go]
                x_end = x_new.copy()
                pts = xo[go] + th[go][:, None] * (xn[go] - xo[go])
                pts[np.arange(rows.size), axis[go]] = np.where(hi_face[go], 1.0, 0.0)
                x_end[rows] = np.clip(pts, 0.0, 1.0)

        span = theta * step
        kill = data["killing"]
        decay = np.exp(-kill * span)
        occupation += np.bincount(
            _nearest(grid, x), weights=discount * (1.0 - decay) / kill, minlength=grid.node_count
        )
        discount = discount * decay

        data_new = fields.local(x_end)
        values_new = []
        for j, phi in enumerate(phis):
            val_new, gen_new = generator(fields, phi, data_new)
            integral[j] += 0.5 * (gen_prev[j] + gen_new) * span
            gen_prev[j] = gen_new
            values_new.append(val_new)

        if keep_paths:
            for k, row in zip(ids, x_end):
                traces[k].append(row.copy())

        if leaving.any():
            done = ids[leaving]
            exit_time[done] = t + span[leaving]
            exited[done] = True
            final[done] = x_end[leaving]
            for j in range(len(phis)):
                residual[j][done] = values_new[j][leaving] - initial[j] - integral[j][leaving]
            keep = ~leaving
            ids = ids[keep]
            x = x_end[keep]
            discount = discount[keep]
            data = {k: v[keep] for k, v in data_new.items()}
            gen_prev = [g[keep] for g in gen_prev]
            integral = [g[keep] for g in integral]
        else:
            x, data = x_end, data_new
        t += step

    # censored paths stop at the horizon
    final[ids] = x
    if ids.size:
        for j, phi in enumerate(phis):
            val = generator(fields, phi, fields.local(x))[0]
            residual[j][ids] = val - initial[j] - integral[j]
    return {
        "exit_time": exit_time,
        "exited": exited,
        "final": final,
        "occupation": occupation,
        "residuals": residual,
        "paths": [np.array(p) for p in traces] if keep_paths else None,
    }


def _nearest(grid: Grid, x: np.ndarray) -> np.ndarray:
    idx = np.clip(np.rint(x / grid.h).astype(int), 0, grid.cells)
    return np.ravel_multi_index(tuple(idx.T), grid.shape)


def _run(result, start, n_paths, dt, horizon, seed, phis, threads, block_size, keep_paths):
    fields = _PathFields(result, extended=any(phi.depends_on_p for phi in phis))
    counts = [min(block_size, n_paths - b * block_size) for b in range((n_paths + block_size - 1) // block_size)]

    def work(block):
        return _simulate_block(fields, start, counts[block], dt, horizon, seed, block, phis, keep_paths)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(len(counts))))
    else:
        parts = [work(b) for b in range(len(counts))]
    return parts


def _check_inputs(result: SolveResult, start, dt, horizon, n_paths):
    grid = result.grid
    start = np.atleast_1d(np.asarray(start, dtype=float))
    if start.size != grid.dim or np.any(start <= 0.0) or np.any(start >= 1.0):
        raise InvalidStart(f"start point {start.tolist()} is not inside the unit box")
    limit = stability_limit(grid, result.eps)
    if dt > limit:
        raise StabilityViolation(f"dt={dt} exceeds the diffusion guard h^2/(2 n eps)={limit}")
    if not (dt > 0 and horizon > 0 and n_paths > 0):
        raise ValueError("dt, horizon and n_paths must be positive")
    return start


def simulate(
    result: SolveResult,
    start,
    n_paths: int,
    dt: float,
    horizon: float,
    seed: int = 0,
    threads: int = 1,
    block_size: int = BLOCK_SIZE,
    keep_paths: bool = False,
    observe: tuple = (),
) -> TrajectoryBatch:
    """Simulate ``n_paths`` paths from ``start`` until exit or ``horizon``.

    ``observe`` lists test functions whose Dynkin residuals are accumulated
    in the same pass (otherwise :func:`dynkin_residual` replays the batch).
    """
    start = _check_inputs(result, start, dt, horizon, n_paths)
    observe = tuple(observe)
    parts = _run(result, start, n_paths, dt, horizon, seed, observe, threads, block_size, keep_paths)
    vol_paths = result.grid.cell_volume * n_paths
    occupation = np.zeros(result.grid.node_count)
    for part in parts:
        occupation += part["occupation"]
    observed = {
        id(phi): np.concatenate([part["residuals"][j] for part in parts])
        for j, phi in enumerate(observe)
    }
    return TrajectoryBatch(
        result=result,
        start=start,
        eps=result.eps,
        dt=float(dt),
        horizon=float(horizon),
        seed=int(seed),
        n_paths=int(n_paths),
        block_size=int(block_size),
        exit_time=np.concatenate([p["exit_time"] for p in parts]),
        exited=np.concatenate([p["exited"] for p in parts]),
        final_state=np.concatenate([p["final"] for p in parts]),
        occupation=occupation / vol_paths,
        paths=sum((p["paths"] for p in parts), []) if keep_paths else None,
        observed=observed,
    )


@dataclass(frozen=True)
class DynkinEstimate:
    residual: float
    std_error: float

    def within(self, n_se: float = 3.0) -> bool:
        return abs(self.residual) <= n_se * self.std_error


def dynkin_residual(batch: TrajectoryBatch, result: SolveResult, phi: TestFunction) -> DynkinEstimate:
    """Mean and standard error of ``phi(z_tau) - phi(z_0) - int_0^tau G phi dt`` over paths,
    where ``G`` is the generator of the position-momentum dynamics."""
    if batch.result is not result:
        raise MismatchedPair("batch was generated from a different result")
    values = batch.observed.get(id(phi))
    if values is None:
        parts = _run(result, batch.start, batch.n_paths, batch.dt, batch.horizon, batch.seed,
                     (phi,), 1, batch.block_size, False)
        values = np.concatenate([p["residuals"][0] for p in parts])
    n = values.size
    return DynkinEstimate(float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(n)))


def occupation_vs_adjoint(batch: TrajectoryBatch, adj: AdjointSolution) -> float:
    """Normalized L1 distance between the discounted occupation density and ``sigma``.

    The occupation is discounted by ``exp(-int (1 + gamma_eps') dt)``, the
    killing rate of the linearized operator, so both densities represent the
    same Green's measure.
    """
    if adj.result is not batch.result:
        raise MismatchedPair("adjoint and batch come from different results")
    sigma = adj.values()[0]
    return float(np.sum(np.abs(batch.occupation - sigma)) / np.sum(np.abs(sigma)))


def bump_test_function(center: float = 0.5, radius: float = 0.3) -> TestFunction:
    """Smooth compactly supported ``exp(-1/(1 - r^2))`` with ``r = |x - c| / radius``."""

    def spatial(x):
        n = x.shape[1]
        dx = (x - center) / radius**2
        r2 = np.sum((x - center) ** 2, axis=1) / radius**2
        inside = r2 < 1.0
        q = np.where(inside, 1.0 / (1.0 - np.where(inside, r2, 0.0)), 0.0)
        val = np.where(inside, np.exp(-q), 0.0)
        # f(s) = exp(-1/(1-s)): f' = -f q^2, f'' = f (q^4 - 2 q^3), with s = r2
        f1 = -val * q * q
        f2 = val * (q**4 - 2.0 * q**3)
        grad = (2.0 * f1)[:, None] * dx
        lap = f2 * 4.0 * np.sum(dx * dx, axis=1) + f1 * 2.0 * n / radius**2
        return val, grad, np.where(inside, lap, 0.0)

    return TestFunction(
        value=lambda x, p: spatial(x)[0],
        grad_x=lambda x, p: spatial(x)[1],
        laplacian_x=lambda x, p: spatial(x)[2],
        spatial=spatial,
        name="bump",
    )


def brownian_exit_time(start, eps: float) -> float:
    """Mean exit time from (0, 1) of ``sqrt(2 eps) W`` started at ``start``."""
    return float(start * (1.0 - start) / (2.0 * eps))


def closed_form_exit_time(result: SolveResult, start) -> float:
    """Mean exit time when the paths are plain scaled Brownian motion, else NaN.

    This is the case in one dimension when ``u`` vanishes and ``D_pH(x, 0) = 0``,
    so the drift is zero.
    """
    grid = result.grid
    if grid.dim != 1 or np.any(result.u != 0.0):
        return float("nan")
    drift = result.spec.hamiltonian.grad_p(grid.coords, np.zeros((grid.node_count, 1)))
    if np.any(drift != 0.0):
        return float("nan")
    return brownian_exit_time(float(np.atleast_1d(start)[0]), result.eps)


@dataclass(frozen=True)
class MonteCarloCheck:
    batch: TrajectoryBatch
    expected_exit_time: float
    exit_time_z: float
    dynkin: dict
    dynkin_z: dict
    occupation_distance: float

    def passed(self, n_se: float = 3.0) -> bool:
        exit_ok = not np.isfinite(self.exit_time_z) or abs(self.exit_time_z) <= n_se
        return exit_ok and all(d.within(n_se) for d in self.dynkin.values())

    def summary_row(self) -> dict:
        row = dict(self.batch.summary())
        row["expected_exit_time"] = self.expected_exit_time
        row["exit_time_z"] = self.exit_time_z
        for name, d in self.dynkin.items():
            row[f"dynkin_{name}"] = d.residual
            row[f"dynkin_{name}_se"] = d.std_error
        row["occupation_l1"] = self.occupation_distance
        return row


def verify_monte_carlo(
    result: SolveResult, start, n_paths: int, dt: float, horizon: float,
    seed: int = 0, threads: int = 1,
) -> MonteCarloCheck:
    """Exit time, Dynkin residuals for ``phi = 1`` and a bump, and the occupation density in one pass."""
    from .adjoint import constant_test_function, solve_adjoint

    phis = (constant_test_function(1.0), bump_test_function())
    batch = simulate(result, start, n_paths, dt, horizon, seed, threads, observe=phis)
    expected = closed_form_exit_time(result, batch.start)
    z = (batch.mean_exit_time - expected) / batch.exit_time_std_error if np.isfinite(expected) else float("nan")
    dynkin = {phi.name: dynkin_residual(batch, result, phi) for phi in phis}
    dz = {
        name: (d.residual / d.std_error if d.std_error > 0 else (0.0 if d.residual == 0 else np.inf))
        for name, d in dynkin.items()
    }
    occupation = occupation_vs_adjoint(batch, solve_adjoint(result, batch.start))
    return MonteCarloCheck(batch, expected, float(z), dynkin, dz, occupation)
