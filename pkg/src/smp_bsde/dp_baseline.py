"""Dynamic-programming deep BSDE baseline for drift control.

One network per time step approximates ``Z_i = sigma' V_x`` as an m-vector.
The control follows from ``V_x = sigma^{-T} Z`` and the DP feedback, and the
networks minimise ``E(Y_0) + lambda Var(Y_0)`` where ``Y_0`` comes from a
backward summation along each simulated path.  Requires a constant, square,
invertible diffusion (C_j = 0, D_j = 0, d = m).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, SingularDiffusionError, UnsupportedProblemError
from .lq_problem import LqCoefficients, running_cost, terminal_cost
from .metrics import ValidationSet
from .nn_core import AdamState, MlpParameters, adam_step, backward, forward, init_mlp, schedule_rate
from .path_engine import ValueEstimate
from .smp_trainer import TrainingConfig, network_seeds, training_increments

log = logging.getLogger(__name__)

ROBUST_WEIGHT = 1.0


def check_drift_control(c: LqCoefficients) -> np.ndarray:
    """Validate the problem class; returns ``inv(Sigma)``."""
    if np.any(c.D):
        raise UnsupportedProblemError("DP baseline needs drift control: the diffusion depends on the control (D_j != 0)")
    if np.any(c.C):
        raise UnsupportedProblemError("DP baseline needs a state-independent diffusion (C_j = 0)")
    if c.d != c.m:
        raise UnsupportedProblemError(f"DP baseline needs a square diffusion, got d={c.d}, m={c.m}")
    if np.linalg.cond(c.Sigma) > 1e12:
        raise SingularDiffusionError("diffusion matrix Sigma is singular")
    return np.linalg.inv(c.Sigma)


@dataclass
class DpTrainingState:
    zs: list[MlpParameters]
    adams: list[AdamState]
    lam: float = ROBUST_WEIGHT
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def networks(self) -> list[MlpParameters]:
        return list(self.zs)


@dataclass
class DpRollout:
    X: np.ndarray
    Z: np.ndarray
    u: np.ndarray
    caches: list = field(default_factory=list, repr=False)


@dataclass
class DpReport:
    step: int
    max_x_err: float
    max_p_err: float
    avg_u_err: float
    y0_mean: float
    y0_var: float
    y0_err: float
    robust_loss: float
    iteration_time_s: float = float("nan")


def init_dp_state(cfg: TrainingConfig, c: LqCoefficients, lam: float = ROBUST_WEIGHT) -> DpTrainingState:
    check_drift_control(c)
    dtype = np.dtype(cfg.dtype)
    zs = [init_mlp([c.d, *cfg.hidden, c.m], s, dtype) for s in network_seeds(cfg.seed, cfg.N)]
    return DpTrainingState(zs, [AdamState.zeros_like(z) for z in zs], lam)


class _DpMaps:
    def __init__(self, c: LqCoefficients, dtype):
        Sinv = check_drift_control(c)
        Ru_inv = np.linalg.inv(c.R_u)
        cast = lambda a: np.ascontiguousarray(a, dtype=dtype)  # noqa: E731
        self.Sinv = cast(Sinv)
        self.Kx = cast(-Ru_inv @ c.R_xu)
        self.Kv = cast(-Ru_inv @ c.B.T)
        self.A, self.B, self.beta, self.Sigma = cast(c.A), cast(c.B), cast(c.beta), cast(c.Sigma)


def dp_rollout(c: LqCoefficients, state: DpTrainingState, dW: np.ndarray) -> DpRollout:
    """Forward simulation under ``u = -R_u^{-1}(R_xu x + B' sigma^{-T} Z)``."""
    M, N, _ = dW.shape
    dtype = state.zs[0].dtype
    mp = _DpMaps(c, dtype)
    dW = np.asarray(dW, dtype=dtype)
    h = c.T / N
    X = np.empty((M, N + 1, c.d), dtype=dtype)
    Z = np.empty((M, N, c.m), dtype=dtype)
    u = np.empty((M, N, c.l), dtype=dtype)
    X[:, 0] = c.x0
    caches = []
    for i in range(N):
        z, cache = forward(state.zs[i], X[:, i])
        caches.append(cache)
        Z[:, i] = z
        u[:, i] = X[:, i] @ mp.Kx.T + (z @ mp.Sinv) @ mp.Kv.T
        X[:, i + 1] = X[:, i] + h * (X[:, i] @ mp.A.T + u[:, i] @ mp.B.T + mp.beta) + dW[:, i] @ mp.Sigma.T
        if not np.all(np.isfinite(X[:, i + 1])):
            raise DivergenceError("non-finite state in DP rollout", step=i)
    return DpRollout(X, Z, u, caches)


def robust_loss(c: LqCoefficients, X, Z, u, dW, lam: float = ROBUST_WEIGHT):
    """``mean(Y_0) + lam * var(Y_0)``; returns ``(loss, ValueEstimate)``."""
    N = Z.shape[1]
    h = c.T / N
    X = np.asarray(X, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    y = terminal_cost(c, X[:, -1])
    for i in range(N - 1, -1, -1):
        y = y + running_cost(c, 0.0, X[:, i], u[:, i]) * h - np.einsum("mj,mj->m", Z[:, i], dW[:, i])
    est = ValueEstimate(y)
    loss = est.mean + lam * est.variance
    if not np.isfinite(loss):
        raise DivergenceError("non-finite robust loss")
    return loss, est


def dp_loss_and_gradients(c: LqCoefficients, state: DpTrainingState, dW: np.ndarray):
    roll = dp_rollout(c, state, dW)
    loss, est = robust_loss(c, roll.X, roll.Z, roll.u, dW, state.lam)
    M, N, _ = dW.shape
    dtype = roll.X.dtype
    mp = _DpMaps(c, dtype)
    h = c.T / N
    w = np.full(M, 1.0 / M)
    if M > 1:
        w = w + state.lam * 2.0 * (est.samples - est.mean) / (M - 1)
    w = w.astype(dtype)[:, None]
    G, R_x, R_xu, R_u = (np.asarray(a, dtype=dtype) for a in (c.G, c.R_x, c.R_xu, c.R_u))
    dW = np.asarray(dW, dtype=dtype)
    gX = w * (roll.X[:, -1] @ G)
    grads = [None] * N
    for i in range(N - 1, -1, -1):
        X, u = roll.X[:, i], roll.u[:, i]
        gu = h * gX @ mp.B + w * h * (X @ R_xu.T + u @ R_u)
        gX = gX + h * gX @ mp.A + w * h * (X @ R_x + u @ R_xu)
        gZ = -w * dW[:, i] + (gu @ mp.Kv) @ mp.Sinv.T
        gX = gX + gu @ mp.Kx
        grads[i], gX_in = backward(state.zs[i], roll.caches[i], gZ)
        gX = gX + gX_in
    return loss, est, grads


def dp_train_step(state: DpTrainingState, cfg: TrainingConfig, c: LqCoefficients, rate: float):
    dW = training_increments(cfg, c, state.step)
    try:
        loss, _, grads = dp_loss_and_gradients(c, state, dW)
        zs, adams = [], []
        for z, g, a in zip(state.zs, grads, state.adams):
            z, a = adam_step(z, g, a, rate)
            zs.append(z)
            adams.append(a)
    except DivergenceError as exc:
        exc.snapshot = state
        exc.step = state.step
        raise
    return replace(state, zs=zs, adams=adams, step=state.step + 1, loss_history=state.loss_history + [loss]), loss


def dp_validate(state: DpTrainingState, c: LqCoefficients, validation: ValidationSet, iteration_time_s=float("nan")):
    N = len(state.zs)
    dW = validation.increments(N)
    roll = dp_rollout(c, state, dW.astype(state.zs[0].dtype))
    loss, est = robust_loss(c, roll.X, roll.Z, roll.u, dW, state.lam)
    ref = validation.reference.restrict(N)
    Vx = roll.Z.astype(np.float64) @ np.linalg.inv(c.Sigma)
    sq = lambda a: np.mean(np.sum(a**2, axis=-1), axis=0)  # noqa: E731
    return DpReport(
        step=state.step,
        max_x_err=float(np.max(sq(roll.X - ref.X))),
        max_p_err=float(np.max(sq(-Vx - ref.P[:, :-1]))),
        avg_u_err=float(np.mean(sq(roll.u - ref.u))),
        y0_mean=est.mean,
        y0_var=est.variance,
        y0_err=abs(est.mean - validation.value0),
        robust_loss=loss,
        iteration_time_s=iteration_time_s,
    )


def train_dp(cfg: TrainingConfig, c: LqCoefficients, validation: ValidationSet | None = None, lam=ROBUST_WEIGHT):
    """Same loop shape as the SMP trainer; returns ``(state, reports)``."""
    state = init_dp_state(cfg, c, lam)
    schedule = cfg.schedule()
    reports = []
    if validation is not None:
        reports.append(dp_validate(state, c, validation))
    elapsed = 0.0
    while state.step < cfg.iterations:
        t0 = time.perf_counter()
        state, loss = dp_train_step(state, cfg, c, schedule_rate(schedule, state.step))
        elapsed += time.perf_counter() - t0
        if state.step % cfg.validation_every == 0 or state.step == cfg.iterations:
            log.info("dp N=%d step %d loss %.4e", cfg.N, state.step, loss)
            if validation is not None:
                reports.append(dp_validate(state, c, validation, elapsed / state.step))
    return state, reports
