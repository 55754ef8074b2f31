"""Uniform grids on the unit torus and the unit box, and the finite-difference
operators shared by every solver.

Node fields are stored as flat arrays in C order over the node index grid.
A torus with ``N`` cells per dimension has ``N`` nodes per dimension at
``x = i/N``; a Dirichlet box has ``N + 1`` nodes per dimension, the first
and last of which lie on the boundary.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class Domain(str, enum.Enum):
    TORUS = "torus"
    BOX = "box"


@dataclass(frozen=True)
class Grid:
    """Structured grid with ``cells`` cells per dimension in ``dim`` dimensions."""

    kind: Domain
    dim: int
    cells: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Domain(self.kind))
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.cells < 2:
            raise ValueError(f"need at least 2 cells per dimension, got {self.cells}")

    @classmethod
    def torus(cls, cells: int, dim: int = 1) -> "Grid":
        return cls(Domain.TORUS, dim, cells)

    @classmethod
    def box(cls, cells: int, dim: int = 1) -> "Grid":
        return cls(Domain.BOX, dim, cells)

    @property
    def is_torus(self) -> bool:
        return self.kind is Domain.TORUS

    @property
    def spacing(self) -> Fraction:
        """Exact mesh width as a rational number."""
        return Fraction(1, self.cells)

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def nodes_per_dim(self) -> int:
        return self.cells if self.is_torus else self.cells + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes_per_dim,) * self.dim

    @property
    def node_count(self) -> int:
        return self.nodes_per_dim**self.dim

    @cached_property
    def multi_index(self) -> np.ndarray:
        """Integer node indices, shape ``(node_count, dim)``."""
        axes = np.meshgrid(*(np.arange(self.nodes_per_dim),) * self.dim, indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(node_count, dim)``."""
        return self.multi_index * self.h

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        if self.is_torus:
            return np.zeros(self.node_count, dtype=bool)
        idx = self.multi_index
        return np.any((idx == 0) | (idx == self.cells), axis=1)

    @cached_property
    def interior(self) -> np.ndarray:
        """Indices of the nodes that carry unknowns."""
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def boundary(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    def node(self, *index: int) -> int:
        """Flat index of the node with the given integer coordinates."""
        if len(index) != self.dim:
            raise ValueError(f"expected {self.dim} indices")
        return int(np.ravel_multi_index(index, self.shape))

    def nearest_node(self, point) -> int:
        point = np.atleast_1d(np.asarray(point, dtype=float))
        index = np.rint(point / self.h).astype(int)
        if self.is_torus:
            index %= self.cells
        else:
            index = np.clip(index, 0, self.cells)
        return self.node(*index)

    def embed(self, interior_values: np.ndarray) -> np.ndarray:
        """Full node array with ``interior_values`` inside and zero on the boundary."""
        full = np.zeros(self.node_count)
        full[self.interior] = interior_values
        return full

    # Sparse one-sided difference matrices acting on full node arrays.
    # On the box, a neighbour outside the node set is a ghost with value 0.

    def _shift(self, axis: int, step: int) -> sp.csr_matrix:
        """Matrix S with (S f)_i = f at the neighbour i + step*e_axis (0 if absent)."""
        idx = self.multi_index.copy()
        idx[:, axis] += step
        rows = np.arange(self.node_count)
        if self.is_torus:
            idx[:, axis] %= self.cells
            keep = np.ones(self.node_count, dtype=bool)
        else:
            keep = (idx[:, axis] >= 0) & (idx[:, axis] <= self.cells)
        cols = np.ravel_multi_index(tuple(idx[keep].T), self.shape)
        data = np.ones(int(keep.sum()))
        return sp.csr_matrix((data, (rows[keep], cols)), shape=(self.node_count,) * 2)

    @cached_property
    def backward_difference(self) -> tuple[sp.csr_matrix, ...]:
        eye = sp.identity(self.node_count, format="csr")
        return tuple(((eye - self._shift(k, -1)) / self.h).tocsr() for k in range(self.dim))

    @cached_property
    def forward_difference(self) -> tuple[sp.csr_matrix, ...]:
        eye = sp.identity(self.node_count, format="csr")
        return tuple(((self._shift(k, 1) - eye) / self.h).tocsr() for k in range(self.dim))

    @cached_property
    def central_difference(self) -> tuple[sp.csr_matrix, ...]:
        return tuple(
            (0.5 * (b + f)).tocsr()
            for b, f in zip(self.backward_difference, self.forward_difference)
        )

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        """Five-point (three-point in 1D) Laplacian; boundary rows are zero."""
        lap = sum(
            (f - b) / self.h for b, f in zip(self.backward_difference, self.forward_difference)
        )
        lap = sp.csr_matrix(lap)
        if not self.is_torus:
            keep = sp.diags((~self.boundary_mask).astype(float))
            lap = (keep @ lap).tocsr()
            lap.eliminate_zeros()
        return lap

    def restrict(self, matrix: sp.spmatrix) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Split a full-node operator into (interior, interior) and (interior, boundary) blocks."""
        rows = sp.csr_matrix(matrix)[self.interior]
        return rows[:, self.interior].tocsr(), rows[:, self.boundary].tocsr()


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.node_count:
            raise ValueError(
                f"field has {values.size} values, grid has {self.grid.node_count} nodes"
            )
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def to_csv(self, path) -> None:
        write_csv(path, self.grid, self.values)


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(self.grid.node_count, -1)
        if values.shape[1] != self.grid.dim:
            raise ValueError("vector field width must equal the grid dimension")
        object.__setattr__(self, "values", values)


def _values(f) -> np.ndarray:
    return f.values if isinstance(f, (ScalarField, VectorField)) else np.asarray(f, float)


def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, f.grid.laplacian_matrix @ f.values)


def upwind_gradient(f: ScalarField) -> tuple[VectorField, VectorField]:
    """Backward and forward one-sided differences along every axis."""
    g = f.grid
    back = np.column_stack([d @ f.values for d in g.backward_difference])
    fwd = np.column_stack([d @ f.values for d in g.forward_difference])
    return VectorField(g, back), VectorField(g, fwd)


def central_gradient(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Centered gradient at interior (or torus) nodes, shape ``(node_count, dim)``.

    Box boundary nodes use the one-sided difference pointing into the domain.
    """
    grad = np.column_stack([d @ values for d in grid.central_difference])
    if not grid.is_torus:
        idx = grid.multi_index
        for k in range(grid.dim):
            low = idx[:, k] == 0
            high = idx[:, k] == grid.cells
            grad[low, k] = (grid.forward_difference[k] @ values)[low]
            grad[high, k] = (grid.backward_difference[k] @ values)[high]
    return grad


def hessian(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Second differences, shape ``(node_count, dim, dim)``.

    Diagonal entries are the centered three-point differences; mixed entries
    apply the centered first difference twice.
    """
    out = np.empty((grid.node_count, grid.dim, grid.dim))
    for k in range(grid.dim):
        fk = grid.forward_difference[k] @ values
        out[:, k, k] = (fk - grid._shift(k, -1) @ fk) / grid.h
        for m in range(k):
            mixed = grid.central_difference[k] @ (grid.central_difference[m] @ values)
            out[:, k, m] = out[:, m, k] = mixed
    return out


def integrate(f) -> float:
    """Rectangle-rule quadrature over all nodes."""
    if isinstance(f, ScalarField):
        return float(f.grid.cell_volume * np.sum(f.values))
    raise TypeError("integrate expects a ScalarField; use quadrature(grid, values) for arrays")


def quadrature(grid: Grid, values: np.ndarray) -> float:
    return float(grid.cell_volume * np.sum(values))


def write_csv(path, grid: Grid, *columns: np.ndarray, names=None) -> None:
    """One row per node: integer indices then one column per field."""
    names = list(names or (["value"] if len(columns) == 1 else [f"value{j + 1}" for j in range(len(columns))]))
    header = [f"i{k}" for k in range(grid.dim)] + names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        data = np.column_stack([np.asarray(c, float).reshape(-1) for c in columns])
        for index, row in zip(grid.multi_index, data):
            writer.writerow([*map(int, index), *(repr(float(v)) for v in row)])


def read_csv(path, grid: Grid) -> np.ndarray:
    """Inverse of :func:`write_csv`; returns ``(node_count, n_fields)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [list(map(float, r)) for r in reader]
    table = np.asarray(rows)
    idx = table[:, : grid.dim].astype(int)
    flat = np.ravel_multi_index(tuple(idx.T), grid.shape)
    out = np.empty((grid.node_count, len(header) - grid.dim))
    out[flat] = table[:, grid.dim :]
    return out
