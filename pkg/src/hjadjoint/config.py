"""INI-style problem configuration.

A file looks like::

    [domain]
    problem = obstacle
    kind = box
    dim = 1
    n = 4096

    [hamiltonian]
    id = quadratic
    shift = 1

    [obstacle]
    psi = 10

    [sweep]
    eps = 0.0625, 0.03125, 0.015625, 0.0078125

Second components use the ``_2`` suffix (``id_2``, ``psi_2``, ...).
Relative paths (obstacle tables, output directories) resolve against the
directory holding the file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidSpec
from .grid import Grid, read_csv
from .models import (
    CellSystemSpec,
    CoupledSystemSpec,
    HamiltonianModel,
    ObstacleProblemSpec,
    ObstacleSystemSpec,
    hamiltonian_catalog,
)
from .solvers import (
    CELL_SCALAR,
    CELL_SYSTEM,
    DEFAULT_SETTINGS,
    OBSTACLE,
    OBSTACLE_SYSTEM,
    SYSTEM,
    ScalarCellSpec,
    SolverSettings,
)

PROBLEMS = (OBSTACLE, SYSTEM, OBSTACLE_SYSTEM, CELL_SYSTEM, CELL_SCALAR)
SECTIONS = ("domain", "hamiltonian", "obstacle", "coupling", "sweep", "solver", "mc")


@dataclass(frozen=True)
class MonteCarloSettings:
    eps: float = 0.5
    n_paths: int = 100_000
    dt: float = 2e-4
    horizon: float = 2.0
    start: tuple = (0.5,)
    threads: int = 1


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs: the spec, its ladder and the run options."""

    problem: str
    spec: object
    eps: tuple
    settings: SolverSettings = DEFAULT_SETTINGS
    diagnostics: tuple = ()
    source: tuple | None = None
    mass_tol: float = 1e-8
    sigma_tol: float = 1e-12
    transpose_tol: float = 1e-12
    mc: MonteCarloSettings = field(default_factory=MonteCarloSettings)
    out_dir: Path | None = None
    seed: int = 0
    origin: Path | None = None

    @property
    def grid(self) -> Grid:
        return self.spec.grid


def _floats(text: str, what: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from exc


def _number(section, key, default=None, cast=float):
    if key not in section:
        if default is None:
            raise ConfigError(f"[{section.name}] is missing {key!r}")
        return default
    try:
        return cast(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: cannot read {section[key]!r}") from exc


def _section(parser, name):
    if name not in parser:
        raise ConfigError(f"missing section [{name}]")
    return parser[name]


def _grid(parser, problem: str) -> Grid:
    s = _section(parser, "domain")
    default_kind = "torus" if problem in (CELL_SYSTEM, CELL_SCALAR) else "box"
    kind = s.get("kind", default_kind)
    dim = _number(s, "dim", 1, int)
    n = _number(s, "n", cast=int)
    try:
        if kind == "torus":
            return Grid.torus(n, dim)
        if kind == "box":
            return Grid.box(n, dim)
    except ValueError as exc:
        raise ConfigError(f"[domain] {exc}") from exc
    raise ConfigError(f"[domain] kind must be 'box' or 'torus', got {kind!r}")


def _hamiltonian(parser, suffix: str) -> HamiltonianModel:
    s = _section(parser, "hamiltonian")
    key = f"id{suffix}"
    if key not in s:
        raise ConfigError(f"[hamiltonian] is missing {key!r}")
    params = {}
    for name in ("potential", "amplitude", "shift", "drift", "table"):
        k = f"{name}{suffix}"
        if k not in s:
            continue
        if name == "potential":
            params[name] = s[k]
        elif name in ("drift", "table"):
            params[name] = list(_floats(s[k], f"[hamiltonian] {k}"))
        else:
            params[name] = _number(s, k)
    return hamiltonian_catalog(s[key], **params)


def _obstacle(parser, grid: Grid, suffix: str, origin: Path | None) -> np.ndarray:
    s = _section(parser, "obstacle")
    key = f"psi{suffix}"
    if key not in s:
        raise ConfigError(f"[obstacle] is missing {key!r}")
    formula = s[key].strip()
    try:
        return np.full(grid.node_count, float(formula))
    except ValueError:
        pass
    offset = _number(s, f"offset{suffix}", 0.0)
    amplitude = _number(s, f"amplitude{suffix}", 1.0)
    x = grid.coords
    if formula == "cosine":
        return offset + amplitude * np.mean(np.cos(2.0 * np.pi * x), axis=1)
    if formula == "tent":
        return offset + amplitude * np.min(np.minimum(x, 1.0 - x), axis=1)
    if formula == "table":
        path = Path(s.get(f"table{suffix}", ""))
        if origin is not None and not path.is_absolute():
            path = origin / path
        if not path.is_file():
            raise ConfigError(f"[obstacle] table file {str(path)!r} not found")
        return read_csv(path, grid)[:, 0]
    raise ConfigError(f"[obstacle] {key} must be a number, 'cosine', 'tent' or 'table'")


def _settings(parser) -> SolverSettings:
    if "solver" not in parser:
        return DEFAULT_SETTINGS
    s = parser["solver"]
    known = {f.name: f.type for f in fields(SolverSettings)}
    values = {}
    for key in s:
        if key not in known:
            raise ConfigError(f"[solver] unknown key {key!r}")
        values[key] = _number(s, key, cast=int if key == "max_iter" else float)
    return SolverSettings(**values)


def _mc(parser) -> MonteCarloSettings:
    if "mc" not in parser:
        return MonteCarloSettings()
    s = parser["mc"]
    base = MonteCarloSettings()
    return MonteCarloSettings(
        eps=_number(s, "eps", base.eps),
        n_paths=_number(s, "n_paths", base.n_paths, int),
        dt=_number(s, "dt", base.dt),
        horizon=_number(s, "horizon", base.horizon),
        start=_floats(s["start"], "[mc] start") if "start" in s else base.start,
        threads=_number(s, "threads", base.threads, int),
    )


def _spec(parser, problem: str, grid: Grid, origin: Path | None):
    if problem == OBSTACLE:
        return ObstacleProblemSpec(grid, _hamiltonian(parser, ""), _obstacle(parser, grid, "", origin))
    if problem == OBSTACLE_SYSTEM:
        return ObstacleSystemSpec(
            grid,
            _hamiltonian(parser, ""),
            _hamiltonian(parser, "_2"),
            _obstacle(parser, grid, "", origin),
            _obstacle(parser, grid, "_2", origin),
        )
    coupling = _section(parser, "coupling") if problem in (SYSTEM, CELL_SYSTEM) else None
    if problem == SYSTEM:
        c = [_number(coupling, k) for k in ("c11", "c12", "c21", "c22")]
        return CoupledSystemSpec(grid, *c, _hamiltonian(parser, ""), _hamiltonian(parser, "_2"))
    momentum = parser["hamiltonian"].get("momentum") if "hamiltonian" in parser else None
    P = np.asarray(_floats(momentum, "[hamiltonian] momentum")) if momentum else np.zeros(grid.dim)
    if problem == CELL_SYSTEM:
        return CellSystemSpec(
            grid, _number(coupling, "c1"), _number(coupling, "c2"),
            _hamiltonian(parser, ""), _hamiltonian(parser, "_2"), P,
        )
    if not grid.is_torus:
        raise InvalidSpec("cell problems need a torus grid")
    if P.size != grid.dim:
        raise InvalidSpec("momentum shift P must have one entry per dimension")
    return ScalarCellSpec(grid, _hamiltonian(parser, ""), P)


def parse_config(text: str, origin: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from INI text.

    Raises ConfigError for malformed files and InvalidSpec when the data
    violates a structural hypothesis.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}]")

    problem = _section(parser, "domain").get("problem", OBSTACLE)
    if problem not in PROBLEMS:
        raise ConfigError(f"[domain] problem must be one of {', '.join(PROBLEMS)}, got {problem!r}")
    grid = _grid(parser, problem)
    spec = _spec(parser, problem, grid, origin)

    sweep = _section(parser, "sweep")
    if "eps" not in sweep:
        raise ConfigError("[sweep] is missing 'eps'")
    eps = _floats(sweep["eps"], "[sweep] eps")
    if not eps:
        raise ConfigError("[sweep] eps is empty")
    diagnostics = tuple(d.strip() for d in sweep.get("diagnostics", "adjoint, hessian").split(",") if d.strip())
    source = _floats(sweep["source"], "[sweep] source") if "source" in sweep else None
    out_dir = None
    if "out" in sweep:
        out_dir = Path(sweep["out"])
        if origin is not None and not out_dir.is_absolute():
            out_dir = origin / out_dir

    return RunConfig(
        problem=problem,
        spec=spec,
        eps=eps,
        settings=_settings(parser),
        diagnostics=diagnostics,
        source=source,
        mass_tol=_number(sweep, "mass_tol", 1e-8),
        sigma_tol=_number(sweep, "sigma_tol", 1e-12),
        transpose_tol=_number(sweep, "transpose_tol", 1e-12),
        mc=_mc(parser),
        out_dir=out_dir,
        seed=_number(sweep, "seed", 0, int),
        origin=origin,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from exc
    return parse_config(text, path.parent)
