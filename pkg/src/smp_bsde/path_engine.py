"""Brownian increments, Euler rollouts and backward value summation.

Fine Brownian increments are produced in fixed time chunks, each drawn from
its own ``default_rng([seed, chunk])`` stream, so the content of a batch is
independent of how it is consumed and never has to be held in memory in
full.  Coarse increments are exact partial sums of the fine ones, which
couples every coarse scheme to the fine reference path.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractViolation, DivergenceError, GridIncompatibilityError, ShapeError
from .lq_problem import FbsdeCoefficients, LqCoefficients, running_cost, terminal_cost, diffusion_bar
from .nn_core import MlpParameters, forward
from .riccati import RiccatiSolution, feedback_gains

CHUNK_STEPS = 100


@dataclass(frozen=True)
class BrownianBatch:
    seed: int
    M: int
    N_fine: int
    m: int
    T: float
    chunk_steps: int = CHUNK_STEPS

    @property
    def h(self) -> float:
        return self.T / self.N_fine

    def chunks(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(first_step, increments)`` with increments of shape ``(M, k, m)``."""
        scale = np.sqrt(self.h)
        for c, start in enumerate(range(0, self.N_fine, self.chunk_steps)):
            k = min(self.chunk_steps, self.N_fine - start)
            rng = np.random.default_rng([self.seed, c])
            yield start, rng.standard_normal((self.M, k, self.m)) * scale

    def steps(self) -> Iterator[np.ndarray]:
        for _, block in self.chunks():
            for i in range(block.shape[1]):
                yield block[:, i, :]

    @property
    def increments(self) -> np.ndarray:
        return np.concatenate([block for _, block in self.chunks()], axis=1)


def sample_brownian(seed: int, M: int, N_fine: int, m: int, T: float) -> BrownianBatch:
    if min(M, N_fine, m) < 1:
        raise ValueError(f"M, N_fine, m must be >= 1, got {(M, N_fine, m)}")
    return BrownianBatch(int(seed), int(M), int(N_fine), int(m), float(T))


def coarsen(bb: BrownianBatch, N: int) -> np.ndarray:
    """Sum fine increments over each coarse step; returns ``(M, N, m)`` in float64."""
    if N < 1 or bb.N_fine % N:
        raise GridIncompatibilityError(f"N={N} does not divide N_fine={bb.N_fine}")
    r = bb.N_fine // N
    out = np.zeros((bb.M, N, bb.m))
    for i, dw in enumerate(bb.steps()):
        out[:, i // r, :] += dw
    return out


@dataclass
class TrajectoryBatch:
    grid: np.ndarray
    X: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    u: np.ndarray
    seed: int | None = None  # Brownian seed the batch was driven by, if known

    @property
    def N(self) -> int:
        return len(self.grid) - 1

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def h(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def restrict(self, N: int) -> "TrajectoryBatch":
        """Sub-sample onto a coarser grid whose nodes are a subset of this one."""
        if N < 1 or self.N % N:
            raise GridIncompatibilityError(f"N={N} does not divide {self.N}")
        r = self.N // N
        return TrajectoryBatch(
            self.grid[::r], self.X[:, ::r], self.P[:, ::r], self.Q[:, ::r], self.u[:, ::r], self.seed
        )


@dataclass
class ValueEstimate:
    samples: np.ndarray
    mean: float = field(init=False)
    variance: float = field(init=False)

    def __post_init__(self):
        self.mean = float(np.mean(self.samples))
        self.variance = float(np.var(self.samples, ddof=1)) if len(self.samples) > 1 else 0.0


class AffineStep:
    """The Euler step of the SMP-BSDE for an LQ problem, in a fixed dtype.

    Flattened ``q`` has index ``a*m + j`` for entry ``q[a, j]``.
    """

    def __init__(self, c: LqCoefficients, dtype=np.float64):
        d, l, m = c.d, c.l, c.m
        self.problem = c
        self.dtype = np.dtype(dtype)
        Ru_inv = np.linalg.inv(c.R_u)
        cast = lambda a: np.ascontiguousarray(a, dtype=self.dtype)  # noqa: E731
        self.A = cast(c.A)
        self.B = cast(c.B)
        self.beta = cast(c.beta)
        self.Sigma = cast(c.Sigma)
        self.R_x = cast(c.R_x)
        self.R_xu = cast(c.R_xu)
        self.Kx = cast(-Ru_inv @ c.R_xu)
        self.Kp = cast(Ru_inv @ c.B.T)
        # u_q[b] = sum_{a,j} (R_u^{-1} D_j')[b, a] q[a, j]
        self.Kq = cast(np.einsum("bc,jac->baj", Ru_inv, c.D).reshape(l, d * m))
        # sum_j C_j x dW_j = (x outer dW) @ Cx.T with Cx[a, b*m+j] = C[j, a, b]
        self.Cx = cast(np.transpose(c.C, (1, 2, 0)).reshape(d, d * m))
        self.Du = cast(np.transpose(c.D, (1, 2, 0)).reshape(d, l * m))
        # sum_j C_j' q_j = q_flat @ Cq.T with Cq[a, b*m+j] = C[j, b, a]
        self.Cq = cast(np.transpose(c.C, (2, 1, 0)).reshape(d, d * m))
        self.has_C = bool(np.any(c.C))
        self.has_D = bool(np.any(c.D))
        self.d, self.l, self.m = d, l, m

    def control(self, X, P, Qf):
        return X @ self.Kx.T + P @ self.Kp.T + Qf @ self.Kq.T

    def step(self, X, P, Qf, u, dW, h):
        """One Euler step for (X, P) given Q (flattened) and u."""
        M = X.shape[0]
        Xn = X + h * (X @ self.A.T + u @ self.B.T + self.beta) + dW @ self.Sigma.T
        if self.has_C:
            Xn = Xn + (X[:, :, None] * dW[:, None, :]).reshape(M, -1) @ self.Cx.T
        if self.has_D:
            Xn = Xn + (u[:, :, None] * dW[:, None, :]).reshape(M, -1) @ self.Du.T
        F = P @ self.A - X @ self.R_x - u @ self.R_xu
        if self.has_C:
            F = F + Qf @ self.Cq.T
        Pn = P - h * F + (Qf.reshape(M, self.d, self.m) * dW[:, None, :]).sum(axis=-1)
        return Xn, Pn

    def step_backward(self, X, P, Qf, u, dW, h, gXn, gPn):
        """Pull ``(gXn, gPn)`` back through ``step`` and ``control``.

        Returns cotangents ``(gX, gP, gQf)`` with respect to the step inputs.
        """
        M = X.shape[0]
        gX = gXn + h * gXn @ self.A
        gu = h * gXn @ self.B
        if self.has_C:
            gX = gX + ((gXn @ self.Cx).reshape(M, self.d, self.m) * dW[:, None, :]).sum(axis=-1)
        if self.has_D:
            gu = gu + ((gXn @ self.Du).reshape(M, self.l, self.m) * dW[:, None, :]).sum(axis=-1)
        gF = -h * gPn
        gP = gPn + gF @ self.A.T
        gX = gX - gF @ self.R_x.T
        gu = gu - gF @ self.R_xu.T
        gQf = (gPn[:, :, None] * dW[:, None, :]).reshape(M, -1)
        if self.has_C:
            gQf = gQf + gF @ self.Cq
        gX = gX + gu @ self.Kx
        gP = gP + gu @ self.Kp
        gQf = gQf + gu @ self.Kq
        return gX, gP, gQf


@dataclass
class RolloutTape:
    """Everything the reverse pass of ``smp_rollout`` needs."""

    step: AffineStep
    h: float
    dW: np.ndarray
    mu0_cache: object
    phi_caches: list
    traj: TrajectoryBatch


def _check_finite(step_index, *arrays):
    for a in arrays:
        bad = ~np.isfinite(a)
        if bad.any():
            sample = int(np.argwhere(bad.reshape(a.shape[0], -1).any(axis=1))[0, 0])
            raise DivergenceError("non-finite state in rollout", step=step_index, sample=sample)


def smp_rollout(
    fb: FbsdeCoefficients,
    mu0: MlpParameters,
    phis: list[MlpParameters],
    dW: np.ndarray,
    *,
    with_tape: bool = False,
    seed: int | None = None,
):
    """Explicit Euler rollout of the deep SMP-BSDE scheme.

    ``dW`` has shape ``(M, N, m)``; arithmetic runs in the networks' dtype.
    ``seed`` tags the result with the Brownian seed for coupling checks.
    Returns a ``TrajectoryBatch``, or ``(traj, tape)`` when ``with_tape``.
    """
    c = fb.problem
    M, N, m = dW.shape
    if len(phis) != N:
        raise ShapeError(f"need {N} Q-networks, got {len(phis)}")
    if m != c.m or mu0.layer_sizes[0] != c.d or mu0.layer_sizes[-1] != c.d:
        raise ShapeError("network or increment dimensions do not match the problem")
    dtype = mu0.dtype
    st = AffineStep(c, dtype)
    h = c.T / N
    dW = np.asarray(dW, dtype=dtype)
    d = c.d
    X = np.empty((M, N + 1, d), dtype=dtype)
    P = np.empty((M, N + 1, d), dtype=dtype)
    Q = np.empty((M, N, d, m), dtype=dtype)
    u = np.empty((M, N, c.l), dtype=dtype)
    p0, mu0_cache = forward(mu0, c.x0[None, :].astype(dtype))
    X[:, 0] = c.x0
    P[:, 0] = p0[0]
    phi_caches = []
    for i in range(N):
        q, cache = forward(phis[i], X[:, i])
        phi_caches.append(cache)
        u[:, i] = st.control(X[:, i], P[:, i], q)
        Q[:, i] = q.reshape(M, d, m)
        X[:, i + 1], P[:, i + 1] = st.step(X[:, i], P[:, i], q, u[:, i], dW[:, i], h)
        _check_finite(i, X[:, i + 1], P[:, i + 1], q)
    traj = TrajectoryBatch(np.linspace(0.0, c.T, N + 1), X, P, Q, u, seed=seed)
    if with_tape:
        return traj, RolloutTape(st, h, dW, mu0_cache, phi_caches, traj)
    return traj


def reference_rollout(c: LqCoefficients, sol: RiccatiSolution, bb: BrownianBatch, record_every: int = 1):
    """Euler-Maruyama under the Riccati feedback on the fine grid of ``bb``.

    P and Q are read off the value function along the path.  Only every
    ``record_every``-th fine node is stored to bound memory.
    """
    if sol.n_steps % bb.N_fine:
        raise GridIncompatibilityError(f"Riccati grid ({sol.n_steps}) is not a refinement of N_fine={bb.N_fine}")
    if abs(sol.T - c.T) > 1e-12 or abs(bb.T - c.T) > 1e-12:
        raise ContractViolation("horizon mismatch between problem, Riccati solution and Brownian batch")
    if bb.N_fine % record_every:
        raise GridIncompatibilityError(f"record_every={record_every} does not divide N_fine={bb.N_fine}")
    ratio = sol.n_steps // bb.N_fine
    N_rec = bb.N_fine // record_every
    nodes = np.arange(bb.N_fine + 1) * ratio
    Psi, psi = feedback_gains(c, sol, nodes)
    h = bb.h
    M, d = bb.M, c.d
    X = np.empty((M, N_rec + 1, d))
    P = np.empty((M, N_rec + 1, d))
    Q = np.empty((M, N_rec, d, c.m))
    u = np.empty((M, N_rec, c.l))
    x = np.broadcast_to(c.x0, (M, d)).copy()
    for i, dw in enumerate(bb.steps()):
        ui = -x @ Psi[i].T - psi[i]
        if i % record_every == 0:
            k = i // record_every
            Gam = sol.Gamma[nodes[i]]
            X[:, k] = x
            P[:, k] = -(x @ Gam + sol.gamma[nodes[i]])
            Q[:, k] = -Gam @ diffusion_bar(c, 0.0, x, ui)
            u[:, k] = ui
        sig = diffusion_bar(c, 0.0, x, ui)
        x = x + h * (x @ c.A.T + ui @ c.B.T + c.beta) + np.einsum("maj,mj->ma", sig, dw)
    _check_finite(bb.N_fine, x)
    X[:, -1] = x
    P[:, -1] = -(x @ sol.Gamma[nodes[-1]] + sol.gamma[nodes[-1]])
    return TrajectoryBatch(np.linspace(0.0, c.T, N_rec + 1), X, P, Q, u, seed=bb.seed)


def backward_value_sum(c: LqCoefficients, traj: TrajectoryBatch, dW: np.ndarray) -> ValueEstimate:
    """Per-sample ``Y_0`` from ``Y_N = g(X_N)``, ``Y_i = Y_{i+1} + f h - Z_i'dW_i``.

    ``Z_i = -sigma(t_i, X_i, u_i)' P_i`` since ``P = -V_x``.
    """
    if dW.shape[:2] != (traj.M, traj.N):
        raise ContractViolation(f"increments {dW.shape} do not match trajectory grid ({traj.M}, {traj.N})")
    h = c.T / traj.N
    X = traj.X.astype(np.float64)
    P = traj.P.astype(np.float64)
    u = traj.u.astype(np.float64)
    y = terminal_cost(c, X[:, -1])
    for i in range(traj.N - 1, -1, -1):
        Z = -np.einsum("maj,ma->mj", diffusion_bar(c, 0.0, X[:, i], u[:, i]), P[:, i])
        y = y + running_cost(c, 0.0, X[:, i], u[:, i]) * h - np.einsum("mj,mj->m", Z, dW[:, i])
    return ValueEstimate(y)


def export_trajectories(traj: TrajectoryBatch, stem) -> list[Path]:
    """Write one long-format CSV per process: ``sample,step,component,value``."""
    stem = Path(stem)
    paths = []
    for name in ("X", "P", "Q", "u"):
        arr = getattr(traj, name)
        flat = arr.reshape(arr.shape[0], arr.shape[1], -1)
        path = stem.with_name(f"{stem.name}_{name}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "step", "component", "value"])
            for k in range(flat.shape[0]):
                for n in range(flat.shape[1]):
                    for j in range(flat.shape[2]):
                        w.writerow([k, n, j, f"{flat[k, n, j]:.9e}"])
        paths.append(path)
    return paths
