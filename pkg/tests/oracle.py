"""Brute-force dense reference implementations for tiny 1D grids.

Everything here is written with explicit node loops and dense linear
algebra, independently of the package's sparse assembly. Jacobians come
from complex-step differentiation of the residual, so they do not share
any hand-coded derivative with the package.
"""

import numpy as np

STEP = 1e-30
LAM = 3.0  # |dH/dp| bound of the quadratic family over |p| <= 3


def gamma(s):
    return np.where(s.real > 0, s + np.expm1(-s), 0.0)


def ham(x, p, shift=1.0, amp=0.0):
    return 0.5 * p * p + amp * np.cos(2 * np.pi * x) - shift


def lf(u, i, left, right, h, x, **kw):
    a = (u[i] - left) / h
    b = (right - u[i]) / h
    return ham(x, 0.5 * (a + b), **kw) - LAM * (b - a) / 2


def box_nodes(u_inner):
    return np.concatenate([[0.0], u_inner, [0.0]])


def complex_jacobian(residual, x):
    n = x.size
    J = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n, complex)
        e[k] = 1j * STEP
        J[:, k] = residual(x.astype(complex) + e).imag / STEP
    return J


def dense_newton(residual, n, tol=1e-14, max_iter=100, x0=None):
    x = np.zeros(n) if x0 is None else np.array(x0, float)
    for _ in range(max_iter):
        F = residual(x.astype(complex)).real
        if np.max(np.abs(F)) < tol:
            return x, complex_jacobian(residual, x)
        J = complex_jacobian(residual, x)
        step = np.linalg.solve(J, -F)
        t = 1.0
        while t > 1e-8:
            trial = x + t * step
            if np.linalg.norm(residual(trial.astype(complex)).real) < np.linalg.norm(F):
                break
            t /= 2
        x = trial
    raise RuntimeError("dense oracle did not converge")


def obstacle_residual(N, psi, eps, **kw):
    h = 1.0 / N
    xs = np.arange(N + 1) * h

    def F(v):
        u = box_nodes(v)
        out = []
        for i in range(1, N):
            lap = (u[i + 1] - 2 * u[i] + u[i - 1]) / h**2
            out.append(u[i] + lf(u, i, u[i - 1], u[i + 1], h, xs[i], **kw)
                       + gamma((u[i] - psi) / eps) - eps * lap)
        return np.array(out)

    return F


def system_residual(N, c, eps, kw1, kw2):
    h = 1.0 / N
    xs = np.arange(N + 1) * h
    m = N - 1

    def F(v):
        u = [box_nodes(v[:m]), box_nodes(v[m:])]
        out = []
        for j, kw in enumerate((kw1, kw2)):
            uj = u[j]
            for i in range(1, N):
                lap = (uj[i + 1] - 2 * uj[i] + uj[i - 1]) / h**2
                out.append(c[j][0] * u[0][i] + c[j][1] * u[1][i]
                           + lf(uj, i, uj[i - 1], uj[i + 1], h, xs[i], **kw) - eps * lap)
        return np.array(out)

    return F


def obstacle_system_residual(N, psi1, psi2, eps, kw1, kw2):
    h = 1.0 / N
    xs = np.arange(N + 1) * h
    m = N - 1

    def F(v):
        u = [box_nodes(v[:m]), box_nodes(v[m:])]
        psi = (psi1, psi2)
        out = []
        for j, kw in enumerate((kw1, kw2)):
            uj, uk = u[j], u[1 - j]
            for i in range(1, N):
                lap = (uj[i + 1] - 2 * uj[i] + uj[i - 1]) / h**2
                out.append(uj[i] + lf(uj, i, uj[i - 1], uj[i + 1], h, xs[i], **kw)
                           + gamma((uj[i] - uk[i] - psi[j]) / eps) - eps * lap)
        return np.array(out)

    return F


def cell_system_residual(N, c1, c2, eps, kw1, kw2):
    h = 1.0 / N
    xs = np.arange(N) * h

    def F(v):
        u = [v[:N], v[N:]]
        coef = ((c1 + eps, -c1), (-c2, c2 + eps))
        out = []
        for j, kw in enumerate((kw1, kw2)):
            uj = u[j]
            for i in range(N):
                left, right = uj[(i - 1) % N], uj[(i + 1) % N]
                lap = (right - 2 * uj[i] + left) / h**2
                out.append(coef[j][0] * u[0][i] + coef[j][1] * u[1][i]
                           + lf(uj, i, left, right, h, xs[i], **kw) - eps**2 * lap)
        return np.array(out)

    return F


def scalar_cell_residual(N, eta, **kw):
    """Unknowns (u_0..u_{N-1}, Hbar) with the zero-mean constraint appended."""
    h = 1.0 / N
    xs = np.arange(N) * h

    def F(v):
        u, hbar = v[:N], v[N]
        out = []
        for i in range(N):
            left, right = u[(i - 1) % N], u[(i + 1) % N]
            lap = (right - 2 * u[i] + left) / h**2
            out.append(lf(u, i, left, right, h, xs[i], **kw) - 0.5 * eta**2 * lap - hbar)
        out.append(h * np.sum(u))
        return np.array(out)

    return F


def dirac(size, position, h, scale=1.0):
    d = np.zeros(size)
    d[position] = scale / h
    return d


def invariant_density(J, h):
    """Null vector of ``J^T`` normalized to unit discrete mass, via the SVD."""
    _, s, vt = np.linalg.svd(J.T)
    v = vt[-1]
    return v / (h * v.sum()), s
