"""Semi-analytic LQ reference: V(t, x) = 1/2 x'Gamma(t)x + x'gamma(t) + kappa(t).

The Riccati system for (Gamma, gamma, kappa) is integrated backwards from
``(G, 0, 0)`` with classic RK4 on an equidistant grid.  Queries at a time
``t`` snap to the nearest grid node.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, SingularControlError
from .lq_problem import LqCoefficients, diffusion_bar

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: np.ndarray
    Gamma: np.ndarray
    gamma: np.ndarray
    kappa: np.ndarray

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def n_steps(self) -> int:
        return len(self.grid) - 1

    def node(self, t: float) -> int:
        if not (-1e-12 <= t <= self.T * (1 + 1e-12)):
            raise DomainError(f"t={t} outside [0, {self.T}]")
        return int(np.clip(np.rint(t / self.T * self.n_steps), 0, self.n_steps))


@dataclass(frozen=True)
class ValueDerivatives:
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _r_hat(c: LqCoefficients, Gamma):
    return c.R_u + (np.swapaxes(c.D, 1, 2) @ Gamma @ c.D).sum(axis=0)


def _s_hat(c: LqCoefficients, Gamma):
    return c.B.T @ Gamma + c.R_xu + (np.swapaxes(c.D, 1, 2) @ Gamma @ c.C).sum(axis=0)


def _checked_cholesky(R, t):
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise SingularControlError("R_u + sum_j D_j' Gamma D_j is not positive definite", t=t) from None


def riccati_rhs(c: LqCoefficients, Gamma, gamma, kappa, t=None):
    """Time derivatives ``(dGamma/dt, dgamma/dt, dkappa/dt)``."""
    R_hat = _r_hat(c, Gamma)
    _checked_cholesky(R_hat, t)
    S_hat = _s_hat(c, Gamma)
    Ct = np.swapaxes(c.C, 1, 2)
    GS = Gamma @ c.Sigma  # column j is Gamma Sigma_j
    Psi = np.linalg.solve(R_hat, S_hat)
    psi = np.linalg.solve(R_hat, c.B.T @ gamma + np.einsum("jba,bj->a", c.D, GS))

    dGamma = -(Gamma @ c.A + c.A.T @ Gamma + (Ct @ Gamma @ c.C).sum(axis=0) + c.R_x - S_hat.T @ Psi)
    dgamma = -(c.A.T @ gamma + np.einsum("jba,bj->a", c.C, GS) - Psi.T @ R_hat @ psi + Gamma @ c.beta)
    dkappa = 0.5 * psi @ R_hat @ psi - c.beta @ gamma - 0.5 * np.einsum("aj,aj->", c.Sigma, GS)
    return dGamma, dgamma, float(dkappa)


def integrate_riccati(c: LqCoefficients, n_ode: int) -> RiccatiSolution:
    """Classic RK4 backwards from t=T on ``n_ode`` equidistant steps."""
    if int(n_ode) != n_ode or n_ode < 1:
        raise ConfigError(f"N_ode must be a positive integer, got {n_ode}")
    n_ode = int(n_ode)
    h = c.T / n_ode
    grid = np.linspace(0.0, c.T, n_ode + 1)
    d = c.d
    Gam = np.empty((n_ode + 1, d, d))
    gam = np.empty((n_ode + 1, d))
    kap = np.empty(n_ode + 1)
    Gam[-1], gam[-1], kap[-1] = c.G, 0.0, 0.0

    def f(G, g, k, t):
        return riccati_rhs(c, _sym(G), g, k, t)

    G, g, k = c.G.copy(), np.zeros(d), 0.0
    for i in range(n_ode, 0, -1):
        t = grid[i]
        k1 = f(G, g, k, t)
        k2 = f(G - 0.5 * h * k1[0], g - 0.5 * h * k1[1], k - 0.5 * h * k1[2], t - 0.5 * h)
        k3 = f(G - 0.5 * h * k2[0], g - 0.5 * h * k2[1], k - 0.5 * h * k2[2], t - 0.5 * h)
        k4 = f(G - h * k3[0], g - h * k3[1], k - h * k3[2], t - h)
        G = _sym(G - h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        g = g - h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        k = k - h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        Gam[i - 1], gam[i - 1], kap[i - 1] = G, g, k
    _checked_cholesky(_r_hat(c, G), 0.0)
    for a in (grid, Gam, gam, kap):
        a.setflags(write=False)
    return RiccatiSolution(grid, Gam, gam, kap)


def value_at(sol: RiccatiSolution, t: float, x) -> ValueDerivatives:
    n = sol.node(t)
    x = np.asarray(x, dtype=np.float64)
    Gamma, gamma = sol.Gamma[n], sol.gamma[n]
    Gx = x @ Gamma
    value = 0.5 * np.einsum("...a,...a->...", x, Gx) + x @ gamma + sol.kappa[n]
    return ValueDerivatives(value, Gx + gamma, Gamma)


def feedback_gains(c: LqCoefficients, sol: RiccatiSolution, nodes=None):
    """Affine DP feedback ``u* = -Psi x - psi`` per node; returns ``(Psi, psi)``.

    Shapes are ``(n, l, d)`` and ``(n, l)`` over the requested node indices.
    """
    idx = np.arange(sol.n_steps + 1) if nodes is None else np.asarray(nodes)
    Gam = sol.Gamma[idx]
    Dt = np.swapaxes(c.D, 1, 2)
    R_hat = c.R_u + np.einsum("jab,nbc,jcd->nad", Dt, Gam, c.D)
    for i in range(len(idx)):
        _checked_cholesky(R_hat[i], float(sol.grid[idx[i]]))
    S_hat = c.B.T @ Gam + c.R_xu + np.einsum("jab,nbc,jcd->nad", Dt, Gam, c.C)
    rhs = sol.gamma[idx] @ c.B + np.einsum("jba,nbc,cj->na", c.D, Gam, c.Sigma)
    Psi = np.linalg.solve(R_hat, S_hat)
    psi = np.linalg.solve(R_hat, rhs[..., None])[..., 0]
    return Psi, psi


def dp_optimal_control(c: LqCoefficients, sol: RiccatiSolution, t: float, x):
    """Minimiser of the HJB generalized Hamiltonian for the quadratic value function."""
    n = sol.node(t)
    Psi, psi = feedback_gains(c, sol, [n])
    return -np.asarray(x, dtype=np.float64) @ Psi[0].T - psi[0]


def reference_pq(c: LqCoefficients, sol: RiccatiSolution, t: float, x, u):
    """``P = -V_x`` and ``Q = -V_xx sigma(t, x, u)``."""
    v = value_at(sol, t, x)
    return -v.grad, -v.hess @ diffusion_bar(c, t, np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64))


def save_solution(sol: RiccatiSolution, path) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, version=FORMAT_VERSION, grid=sol.grid, Gamma=sol.Gamma, gamma=sol.gamma, kappa=sol.kappa)
    return path


def load_solution(path) -> RiccatiSolution:
    with np.load(Path(path)) as data:
        if int(data["version"]) != FORMAT_VERSION:
            raise ConfigError(f"unsupported Riccati cache version {int(data['version'])}")
        return RiccatiSolution(data["grid"], data["Gamma"], data["gamma"], data["kappa"])
