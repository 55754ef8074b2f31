"""Command-line entry point.

Exit codes: 0 success, 2 solver nonconvergence, 3 configuration error,
4 invariant-check failure under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adjoint import mass_identity_check, solve_adjoint, transpose_consistency
from .config import RunConfig, load_config
from .errors import ConfigError, InvalidSpec, InvalidStart, NonConvergence, SingularJacobian, StabilityViolation
from .grid import write_csv
from .harness import SweepConfig, run_sweep, write_rows
from .models import (
    ObstacleProblemSpec,
    check_compatibility,
    check_obstacle_system_compatibility,
    check_system_compatibility,
)
from .solvers import CELL_SCALAR, CELL_SYSTEM, OBSTACLE, OBSTACLE_SYSTEM, SYSTEM, solve

EXIT_OK, EXIT_NONCONVERGENCE, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3, 4

SOLVE_COMMANDS = {
    "solve-obstacle": OBSTACLE,
    "solve-system": SYSTEM,
    "solve-obstacle-system": OBSTACLE_SYSTEM,
    "cell-scalar": CELL_SCALAR,
    "cell-system": CELL_SYSTEM,
}
COMMANDS = (*SOLVE_COMMANDS, "adjoint", "mc-verify", "sweep", "check-config")
DEFAULT_OUT = "hjadjoint_out"


class InvariantFailure(Exception):
    pass


def _out_dir(args, run: RunConfig) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif run.out_dir is not None:
        out = run.out_dir
    else:
        out = Path(DEFAULT_OUT) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, payload: dict) -> None:
    def default(v):
        if isinstance(v, (np.floating, np.integer, np.bool_)):
            return v.item()
        raise TypeError(type(v).__name__)

    (out / "manifest.json").write_text(json.dumps(payload, indent=2, default=default) + "\n")


def _ladder(run: RunConfig):
    return sorted(run.eps, reverse=True)


def _cmd_solve(args, run: RunConfig) -> str:
    expected = SOLVE_COMMANDS[args.command]
    if run.problem != expected:
        raise ConfigError(f"{args.command} needs problem = {expected}, config has {run.problem}")
    out = _out_dir(args, run)
    rows, warm, failures = [], None, []
    for k, eps in enumerate(_ladder(run)):
        result = solve(run.spec, eps, warm, run.settings)
        warm = result
        write_csv(out / f"u_{k:02d}.csv", result.grid, *result.values())
        row = {"eps": eps, "newton_iters": result.newton_iters, "residual": result.residual_linf}
        if result.kind in (CELL_SYSTEM, CELL_SCALAR):
            row["hbar"] = list(result.hbar)
        row["diagnostics"] = result.diagnostics
        rows.append(row)
        if not result.diagnostics.get("monotone", True):
            failures.append(f"scheme not monotone at eps={eps:g}")
    _write_manifest(out, {"command": args.command, "problem": run.problem, "h": run.grid.h, "rows": rows})
    if args.strict and failures:
        raise InvariantFailure("; ".join(failures))
    last = rows[-1]
    extra = f", hbar={last['hbar']}" if "hbar" in last else ""
    return (
        f"{args.command}: {len(rows)} solve(s), N={run.grid.cells}, eps_min={last['eps']:g}, "
        f"max residual={max(r['residual'] for r in rows):.2e}{extra}"
    )


def _cmd_adjoint(args, run: RunConfig) -> str:
    out = _out_dir(args, run)
    identities, failures, warm = [], [], None
    for k, eps in enumerate(_ladder(run)):
        result = solve(run.spec, eps, warm, run.settings)
        warm = result
        adj = solve_adjoint(result, run.source)
        write_csv(out / f"sigma_{k:02d}.csv", adj.grid, *adj.values())
        x0 = "" if adj.source_node is None else adj.source_node
        mass = mass_identity_check(adj, result)
        transpose = transpose_consistency(result, seed=args.seed)
        for name, value in (("sigma_min", adj.sigma_min), ("mass", mass), ("transpose", transpose)):
            identities.append({"eps": eps, "x0": x0, "identity": name, "residual": value})
        if adj.sigma_min < -run.sigma_tol:
            failures.append(f"sigma_min={adj.sigma_min:.2e} at eps={eps:g}")
        if mass > run.mass_tol:
            failures.append(f"mass residual {mass:.2e} at eps={eps:g}")
        if transpose > run.transpose_tol:
            failures.append(f"transpose mismatch {transpose:.2e} at eps={eps:g}")
    write_rows(out / "diagnostics.csv", ("eps", "x0", "identity", "residual"), identities)
    _write_manifest(out, {"command": "adjoint", "problem": run.problem, "identities": identities})
    if args.strict and failures:
        raise InvariantFailure("; ".join(failures))
    worst = max(r["residual"] for r in identities if r["identity"] == "mass")
    return f"adjoint: {len(identities) // 3} measure(s), worst mass residual={worst:.2e}"


def _cmd_mc(args, run: RunConfig) -> str:
    from .stochastic import verify_monte_carlo

    if run.problem != OBSTACLE:
        raise ConfigError("mc-verify needs problem = obstacle")
    out = _out_dir(args, run)
    mc = run.mc
    threads = args.threads if args.threads is not None else mc.threads
    result = solve(run.spec, mc.eps, None, run.settings)
    check = verify_monte_carlo(result, mc.start, mc.n_paths, mc.dt, mc.horizon, args.seed, threads)
    row = check.summary_row()
    write_rows(out / "mc_summary.csv", tuple(row), [row])
    _write_manifest(out, {"command": "mc-verify", "summary": row})
    if args.strict and not check.passed():
        raise InvariantFailure(f"Monte Carlo check outside 3 standard errors: {row}")
    dyn = ", ".join(f"{k} z={v:+.2f}" for k, v in check.dynkin_z.items())
    return (
        f"mc-verify: {mc.n_paths} paths, mean exit time={row['mean_exit_time']:.5f} "
        f"(closed form {row['expected_exit_time']:.5f}, z={row['exit_time_z']:+.2f}); Dynkin {dyn}"
    )


def _cmd_sweep(args, run: RunConfig) -> tuple:
    cfg = SweepConfig.from_run(run, out_dir=_out_dir(args, run), seed=args.seed)
    if args.threads is not None and cfg.mc is not None:
        cfg = replace(cfg, mc=replace(cfg.mc, threads=args.threads))
    report = run_sweep(cfg)
    summary = (
        f"sweep: {len(report.rows)} point(s), reference={report.reference}, h={report.h:.3g}, "
        f"slope={report.slope:.4g}, r2={report.rate.r2:.4g}, complete={report.complete}"
    )
    if not report.complete:
        return EXIT_NONCONVERGENCE, summary + f" ({report.failure})"
    if args.strict:
        failures = report.invariant_failures(run.mass_tol, run.sigma_tol, run.transpose_tol)
        if failures:
            return EXIT_INVARIANT, summary + "; invariant failure: " + "; ".join(failures)
    return EXIT_OK, summary


def _cmd_check(args, run: RunConfig) -> str:
    spec, grid = run.spec, run.grid
    zero = np.zeros(grid.node_count)
    if isinstance(spec, ObstacleProblemSpec):
        report, label = check_compatibility(spec, zero), "H2.2"
    elif run.problem == SYSTEM:
        report, label = check_system_compatibility(spec, zero, zero), "H3.4"
    elif run.problem == OBSTACLE_SYSTEM:
        report, label = check_obstacle_system_compatibility(spec, zero, zero), "H5.4"
    else:
        return f"check-config: {run.problem} config is valid, N={grid.cells}, {len(run.eps)} eps value(s)"
    text = (
        f"check-config: {run.problem} config is valid, N={grid.cells}, {len(run.eps)} eps value(s); "
        f"zero subsolution slack={report.min_slack:.3g} ({label} {'holds' if report.ok else 'fails'})"
    )
    if args.strict and not report.ok:
        raise InvariantFailure(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hjadjoint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="INI problem file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--strict", action="store_true", help="exit 4 when an invariant check fails")
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads for Monte Carlo")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_config(args.config)
        if args.seed is None:
            args.seed = run.seed
        if args.command == "sweep":
            code, line = _cmd_sweep(args, run)
            print(line)
            return code
        handler = {
            "adjoint": _cmd_adjoint,
            "mc-verify": _cmd_mc,
            "check-config": _cmd_check,
        }.get(args.command, _cmd_solve)
        print(handler(args, run))
        return EXIT_OK
    except (ConfigError, InvalidSpec, InvalidStart, StabilityViolation) as exc:
        print(f"{args.command}: configuration error: {exc}")
        return EXIT_CONFIG
    except (NonConvergence, SingularJacobian) as exc:
        print(f"{args.command}: solver failed: {exc}")
        return EXIT_NONCONVERGENCE
    except InvariantFailure as exc:
        print(f"{args.command}: invariant check failed: {exc}")
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
