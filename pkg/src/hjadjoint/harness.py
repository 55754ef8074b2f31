"""Epsilon sweeps, rate fits and report emission."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import (
    constant_test_function,
    epsilon_derivative,
    hessian_integral,
    mass_identity_check,
    measure_quadratures,
    sine_test_function,
    solve_adjoint,
    transpose_consistency,
)
from .errors import AllZeroErrors, ConfigError, NonConvergence, SingularJacobian
from .grid import write_csv
from .solvers import (
    CELL_SCALAR,
    CELL_SYSTEM,
    DEFAULT_SETTINGS,
    OBSTACLE,
    SolverSettings,
    direct_reference,
    solve,
)

log = logging.getLogger(__name__)

DIAGNOSTICS = ("adjoint", "hessian", "eps_derivative", "quadratures", "mc")

ROW_COLUMNS = (
    "eps", "error", "held_out", "residual", "newton_iters", "sigma_min",
    "mass_residual", "transpose_error", "hessian", "hessian_unweighted",
    "eps_derivative", "quadrature_mass_error", "reduced_residual",
    "identity_residual", "theta_over_eps", "overshoot", "hbar_1", "hbar_2", "mu",
    "mc_exit_z", "mc_dynkin_z",
)

# relative step of the finite-difference eps-derivative
EPS_BUMP = 1e-3


@dataclass(frozen=True)
class SweepConfig:
    spec: object
    eps: tuple
    settings: SolverSettings = DEFAULT_SETTINGS
    diagnostics: tuple = ("adjoint", "hessian")
    out_dir: Path | None = None
    source: tuple | None = None
    seed: int = 0
    mc: object = None
    name: str = "sweep"

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps)
        if len(eps) < 4:
            raise ConfigError(f"an eps ladder needs at least 4 values, got {len(eps)}")
        if any(not e > 0 for e in eps):
            raise ConfigError("eps values must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps ladder must be strictly decreasing")
        unknown = [d for d in self.diagnostics if d not in DIAGNOSTICS]
        if unknown:
            raise ConfigError(f"unknown diagnostic {unknown[0]!r}")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))

    @property
    def grid(self):
        return self.spec.grid

    @classmethod
    def from_run(cls, run, out_dir=None, seed=None) -> "SweepConfig":
        return cls(
            spec=run.spec,
            eps=run.eps,
            settings=run.settings,
            diagnostics=run.diagnostics,
            out_dir=out_dir if out_dir is not None else run.out_dir,
            source=run.source,
            seed=run.seed if seed is None else seed,
            mc=run.mc,
            name=run.problem,
        )


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n_used: int
    n_zero: int


def fit_rate(points) -> RateFit:
    """Least-squares line through ``(log eps, log err)``.

    Points with ``err <= 0`` are dropped and counted in ``n_zero``; fewer
    than two remaining points raise AllZeroErrors.
    """
    pts = [(float(e), float(r)) for e, r in points if not math.isnan(float(r))]
    if any(e <= 0 for e, _ in pts):
        raise ValueError("eps values must be positive")
    used = [(e, r) for e, r in pts if r > 0]
    if len(used) < 2:
        raise AllZeroErrors(f"need two positive errors, got {len(used)} of {len(pts)}")
    x = np.log([e for e, _ in used])
    y = np.log([r for _, r in used])
    if np.ptp(x) == 0:
        raise ValueError("eps values must not all coincide")
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), r2, len(used), len(pts) - len(used))


NAN_FIT = RateFit(math.nan, math.nan, math.nan, 0, 0)


@dataclass
class ConvergenceReport:
    problem: str
    h: float
    cells: int
    reference: str
    rows: list = field(default_factory=list)
    complete: bool = True
    failure: str | None = None
    rate: RateFit = NAN_FIT
    elapsed: float = 0.0
    identities: list = field(default_factory=list)
    results: list = field(default_factory=list, repr=False)
    adjoints: list = field(default_factory=list, repr=False)

    @property
    def slope(self) -> float:
        return self.rate.slope

    @property
    def intercept(self) -> float:
        return self.rate.intercept

    def column(self, name: str, fitted_only: bool = False) -> np.ndarray:
        rows = [r for r in self.rows if not (fitted_only and r["held_out"])]
        return np.array([r[name] for r in rows], dtype=float)

    def fit(self, name: str) -> RateFit:
        """Rate fit of any row column against eps, NaN when undefined."""
        rows = [r for r in self.rows if not r["held_out"]]
        try:
            return fit_rate([(r["eps"], r[name]) for r in rows])
        except AllZeroErrors:
            return NAN_FIT

    def invariant_failures(self, mass_tol=1e-8, sigma_tol=1e-12, transpose_tol=1e-12) -> list:
        out = []
        for r in self.rows:
            e = r["eps"]
            if r["sigma_min"] < -sigma_tol:
                out.append(f"sigma_min={r['sigma_min']:.3e} at eps={e:g}")
            if r["mass_residual"] > mass_tol:
                out.append(f"mass identity residual {r['mass_residual']:.3e} at eps={e:g}")
            if r["transpose_error"] > transpose_tol:
                out.append(f"transpose mismatch {r['transpose_error']:.3e} at eps={e:g}")
        return out

    def manifest(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, (np.floating, np.integer)):
                return clean(v.item())
            return v

        return {
            "version": __version__,
            "problem": self.problem,
            "h": self.h,
            "cells": self.cells,
            "reference": self.reference,
            "complete": self.complete,
            "failure": self.failure,
            "rate": {k: clean(v) for k, v in asdict(self.rate).items()},
            "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows],
        }

    def write(self, out_dir, fields: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "sweep.csv", ROW_COLUMNS, self.rows)
        write_rows(out / "diagnostics.csv", ("eps", "x0", "identity", "residual"), self.identities)
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2) + "\n")
        if fields:
            for k, result in enumerate(self.results):
                write_csv(out / f"u_{k:02d}.csv", result.grid, *result.values())
            for k, adj in enumerate(self.adjoints):
                if adj is not None:
                    write_csv(out / f"sigma_{k:02d}.csv", adj.grid, *adj.values())
        return out


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_cell(r.get(c, math.nan)) for c in columns])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _error(result, reference) -> float:
    if result.kind == CELL_SYSTEM:
        return max(abs(a - b) for a, b in zip(result.hbar, reference.hbar))
    if result.kind == CELL_SCALAR:
        return abs(result.hbar[0] - reference.hbar[0])
    return max(float(np.max(np.abs(u - r))) for u, r in zip(result.values(), reference))


def _diagnose(cfg: SweepConfig, result, row: dict, identities: list):
    """Fill the diagnostic columns of ``row``; returns the adjoint solution (or None)."""
    wanted = cfg.diagnostics
    eps = result.eps
    for key in ("theta_over_eps", "overshoot"):
        if key in result.diagnostics:
            row[key] = result.diagnostics[key]
    if result.kind in (CELL_SYSTEM, CELL_SCALAR):
        row["hbar_1"] = result.hbar[0]
        if result.kind == CELL_SYSTEM:
            row["hbar_2"], row["mu"] = result.hbar[1], result.mu
    if "eps_derivative" in wanted:
        bumped = solve(result.spec, eps * (1.0 + EPS_BUMP), result, cfg.settings)
        row["eps_derivative"] = epsilon_derivative(result, bumped)

    adj = None
    if {"adjoint", "hessian", "quadratures"} & set(wanted):
        adj = solve_adjoint(result, cfg.source)
        x0 = "" if adj.source_node is None else int(adj.source_node)
        row["sigma_min"] = adj.sigma_min
        row["mass_residual"] = mass_identity_check(adj, result)
        identities.append({"eps": eps, "x0": x0, "identity": "mass", "residual": row["mass_residual"]})
        if "adjoint" in wanted:
            row["transpose_error"] = transpose_consistency(result, seed=cfg.seed)
            identities.append(
                {"eps": eps, "x0": x0, "identity": "transpose", "residual": row["transpose_error"]}
            )
        if "hessian" in wanted:
            hi = hessian_integral(adj, result)
            row["hessian"], row["hessian_unweighted"] = hi.value, hi.unweighted
        if "quadratures" in wanted and result.kind == OBSTACLE:
            total = measure_quadratures(adj, result, constant_test_function(1.0))
            row["quadrature_mass_error"] = abs(total.gamma1_int + total.gamma2_int - 1.0)
            sine = measure_quadratures(adj, result, sine_test_function())
            row["reduced_residual"] = sine.reduced_residual
            row["identity_residual"] = sine.identity_residual
            for name in ("quadrature_mass_error", "reduced_residual", "identity_residual"):
                identities.append({"eps": eps, "x0": x0, "identity": name, "residual": row[name]})
    return adj


def _monte_carlo(cfg: SweepConfig, result, row: dict, identities: list) -> None:
    from .stochastic import verify_monte_carlo

    mc = cfg.mc
    check = verify_monte_carlo(result, mc.start, mc.n_paths, mc.dt, mc.horizon, cfg.seed, mc.threads)
    row["mc_exit_z"] = check.exit_time_z
    row["mc_dynkin_z"] = max(abs(z) for z in check.dynkin_z.values())
    identities.append({"eps": result.eps, "x0": "", "identity": "mc_exit_z", "residual": check.exit_time_z})


def run_sweep(cfg: SweepConfig, keep_results: bool = False) -> ConvergenceReport:
    """Descending warm-started sweep with errors against a reference.

    Problems with a limit solver are compared to it on the same grid; the
    cell problems use the smallest-eps run as reference and leave it out of
    the fit. The first NonConvergence ends the sweep and marks the report
    incomplete.
    """
    t0 = time.perf_counter()
    grid = cfg.grid
    results, adjoints, rows, identities = [], [], [], []
    failure = None
    warm = None
    for eps in cfg.eps:
        try:
            result = solve(cfg.spec, eps, warm, cfg.settings)
        except (NonConvergence, SingularJacobian) as exc:
            failure = f"eps={eps:g}: {exc}"
            log.warning("sweep stopped: %s", failure)
            break
        warm = result
        row = {c: math.nan for c in ROW_COLUMNS}
        row.update(
            eps=result.eps, held_out=False, residual=result.residual_linf,
            newton_iters=result.newton_iters,
        )
        adjoints.append(_diagnose(cfg, result, row, identities))
        if "mc" in cfg.diagnostics and not results:
            _monte_carlo(cfg, result, row, identities)
        results.append(result)
        rows.append(row)

    held_out = results and results[0].kind in (CELL_SYSTEM, CELL_SCALAR)
    if held_out:
        reference_id = "smallest-eps holdout"
        reference = results[-1] if failure is None else None
    else:
        reference_id = "direct limit solver"
        reference = None
        if failure is None:
            try:
                reference = tuple(f.values for f in direct_reference(cfg.spec, results[-1], cfg.settings))
            except (NonConvergence, SingularJacobian) as exc:
                failure = f"reference: {exc}"
    if reference is not None:
        for row, result in zip(rows, results):
            row["error"] = _error(result, reference)
        if held_out:
            rows[-1]["held_out"] = True
            rows[-1]["error"] = math.nan

    report = ConvergenceReport(
        problem=cfg.name,
        h=grid.h,
        cells=grid.cells,
        reference=reference_id,
        rows=rows,
        complete=failure is None,
        failure=failure,
        identities=identities,
        results=results if keep_results or cfg.out_dir else [],
        adjoints=adjoints if keep_results or cfg.out_dir else [],
    )
    if reference is not None:
        report.rate = report.fit("error")
    report.elapsed = time.perf_counter() - t0
    if cfg.out_dir is not None:
        report.write(cfg.out_dir)
    return report
