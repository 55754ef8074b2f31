"""Lax-Friedrichs numerical Hamiltonian and linearized operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Grid
from .models import HamiltonianModel


def _momentum_samples(center: np.ndarray, radius: float, dim: int) -> np.ndarray:
    per_axis = 201 if dim == 1 else 41
    axis = np.linspace(-radius, radius, per_axis)
    mesh = np.meshgrid(*(axis,) * dim, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1) + center


class LaxFriedrichs:
    """Monotone numerical Hamiltonian

        Hhat(x, a, b) = H(x, P + (a + b)/2) - sum_k lam_k(x) (b_k - a_k)/2

    where ``a``, ``b`` are the backward and forward differences and ``lam_k``
    bounds ``|dH/dp_k|`` over momenta within ``p_range`` of ``P``.
    """

    def __init__(self, grid: Grid, hamiltonian: HamiltonianModel, p_range: float, shift=None):
        self.grid = grid
        self.hamiltonian = hamiltonian
        self.p_range = float(p_range)
        self.shift = np.zeros(grid.dim) if shift is None else np.asarray(shift, float)
        x = grid.coords
        lam = np.zeros((grid.node_count, grid.dim))
        for q in _momentum_samples(self.shift, self.p_range, grid.dim):
            dp = hamiltonian.grad_p(x, np.broadcast_to(q, x.shape))
            np.maximum(lam, np.abs(dp), out=lam)
        self.lam = lam

    def momenta(self, u: np.ndarray):
        g = self.grid
        back = np.column_stack([d @ u for d in g.backward_difference])
        fwd = np.column_stack([d @ u for d in g.forward_difference])
        return back, fwd

    def evaluate(self, u: np.ndarray):
        """Value and partial derivatives with respect to the two difference slots."""
        back, fwd = self.momenta(u)
        q = self.shift + 0.5 * (back + fwd)
        x = self.grid.coords
        value = self.hamiltonian.eval(x, q) - 0.5 * np.sum(self.lam * (fwd - back), axis=1)
        dp = self.hamiltonian.grad_p(x, q)
        d_back = 0.5 * (dp + self.lam)
        d_fwd = 0.5 * (dp - self.lam)
        return value, d_back, d_fwd

    def monotonicity_ratio(self, u: np.ndarray, nodes=None) -> float:
        """Largest ``|dH/dp_k| / lam_k`` at the averaged momenta; at most 1 if monotone."""
        back, fwd = self.momenta(u)
        q = self.shift + 0.5 * (back + fwd)
        dp = np.abs(self.hamiltonian.grad_p(self.grid.coords, q))
        if nodes is not None:
            dp, lam = dp[nodes], self.lam[nodes]
        else:
            lam = self.lam
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(lam > 0, dp / lam, np.where(dp > 0, np.inf, 0.0))
        return float(ratio.max()) if ratio.size else 0.0


@dataclass(frozen=True)
class Linearization:
    """Linear operator on ``m`` stacked node fields

        (L z)_j = sum_k zeroth[j][k] z_k
                  + sum_axis (back[j] D^- z_j + fwd[j] D^+ z_j)
                  - viscosity * Lap z_j

    ``zeroth[j][k]`` are node arrays (or scalars), ``back[j]`` and ``fwd[j]``
    are ``(node_count, dim)`` arrays of transport coefficients.
    """

    grid: Grid
    zeroth: tuple
    back: tuple
    fwd: tuple
    viscosity: float

    @property
    def components(self) -> int:
        return len(self.zeroth)

    def full_matrix(self) -> sp.csr_matrix:
        g = self.grid
        n = g.node_count
        blocks = []
        for j in range(self.components):
            row = []
            for k in range(self.components):
                coeff = np.broadcast_to(np.asarray(self.zeroth[j][k], float), (n,))
                block = sp.diags(coeff)
                if j == k:
                    for axis in range(g.dim):
                        block = block + sp.diags(self.back[j][:, axis]) @ g.backward_difference[axis]
                        block = block + sp.diags(self.fwd[j][:, axis]) @ g.forward_difference[axis]
                    block = block - self.viscosity * g.laplacian_matrix
                row.append(block)
            blocks.append(row)
        return sp.bmat(blocks, format="csr")

    def unknown_nodes(self) -> np.ndarray:
        n = self.grid.node_count
        return np.concatenate([self.grid.interior + j * n for j in range(self.components)])

    def boundary_nodes(self) -> np.ndarray:
        n = self.grid.node_count
        return np.concatenate([self.grid.boundary + j * n for j in range(self.components)])

    def split(self):
        """Restricted operator on the unknowns and its coupling to boundary values."""
        full = self.full_matrix()
        rows = full[self.unknown_nodes()]
        return rows[:, self.unknown_nodes()].tocsr(), rows[:, self.boundary_nodes()].tocsr()
