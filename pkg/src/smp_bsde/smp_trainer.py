"""Training loop of the deep SMP-BSDE method.

One network maps x0 to P_0 and one network per time step maps X_{t_i} to
Q_{t_i}.  The terminal mismatch ``E|-grad g(X_N) - P_N|^2`` is minimised
with Adam, differentiating through every Euler step of the rollout.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DivergenceError
from .lq_problem import LqCoefficients, composed_coefficients
from .metrics import ErrorReport, ValidationSet, pathwise_errors
from .nn_core import (
    TERMINAL_RATE,
    AdamState,
    GradientSet,
    LrSchedule,
    MlpParameters,
    adam_step,
    backward,
    init_mlp,
    schedule_rate,
)
from .path_engine import RolloutTape, TrajectoryBatch, smp_rollout

log = logging.getLogger(__name__)

# (initial learning rate, iterations) per number of time steps
SCHEDULE_TABLE = {
    2: (5e-4, 2**12),
    5: (5e-4, 2**12),
    10: (1e-3, 2**13),
    20: (2e-3, 2**14),
    50: (4e-3, 2**15),
    100: (8e-3, 2**16),
}
DEFAULT_BATCH = 2**12
DEFAULT_VALIDATION = 2**14


@dataclass
class TrainingConfig:
    N: int
    batch_size: int = DEFAULT_BATCH
    iterations: int = 2**12
    eta0: float = 1e-3
    seed: int = 0
    validation_size: int = DEFAULT_VALIDATION
    validation_every: int = 1000
    validation_seed: int = 10_000
    hidden: tuple = (100, 100)
    dtype: str = "float32"
    decay_target: float = TERMINAL_RATE

    def __post_init__(self):
        for name in ("N", "batch_size", "validation_size", "validation_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0 or self.eta0 <= 0 or self.decay_target <= 0:
            raise ConfigError("iterations must be >= 0, eta0 and decay_target > 0")
        if self.validation_seed == self.seed:
            raise ConfigError("validation and training seeds must differ")
        self.hidden = tuple(int(w) for w in self.hidden)

    @classmethod
    def for_grid(cls, N: int, desk_scale: int = 1, **overrides) -> "TrainingConfig":
        """Schedule-table defaults for ``N``; ``desk_scale`` divides iterations and batch sizes."""
        if N not in SCHEDULE_TABLE:
            raise ConfigError(f"no schedule entry for N={N}; known: {sorted(SCHEDULE_TABLE)}")
        if desk_scale not in (1, 2, 4, 8):
            raise ConfigError(f"desk_scale must be one of 1, 2, 4, 8, got {desk_scale}")
        eta0, K = SCHEDULE_TABLE[N]
        base = dict(
            N=N,
            eta0=eta0,
            iterations=K // desk_scale,
            batch_size=DEFAULT_BATCH // desk_scale,
            validation_size=DEFAULT_VALIDATION // desk_scale,
            validation_every=max(1, (K // desk_scale) // 8),
        )
        base.update(overrides)
        return cls(**base)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.eta0, max(1, self.iterations), self.decay_target)


@dataclass
class TrainingState:
    mu0: MlpParameters
    mu0_adam: AdamState
    phis: list[MlpParameters]
    phi_adams: list[AdamState]
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def networks(self) -> list[MlpParameters]:
        return [self.mu0] + list(self.phis)


def network_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def init_state(cfg: TrainingConfig, c: LqCoefficients) -> TrainingState:
    seeds = network_seeds(cfg.seed, cfg.N + 1)
    dtype = np.dtype(cfg.dtype)
    mu0 = init_mlp([c.d, *cfg.hidden, c.d], seeds[0], dtype)
    phis = [init_mlp([c.d, *cfg.hidden, c.d * c.m], s, dtype) for s in seeds[1:]]
    return TrainingState(mu0, AdamState.zeros_like(mu0), phis, [AdamState.zeros_like(p) for p in phis])


def training_increments(cfg: TrainingConfig, c: LqCoefficients, step: int) -> np.ndarray:
    """The minibatch of Brownian increments used at training ``step``."""
    rng = np.random.default_rng([cfg.seed, 1, step])
    h = c.T / cfg.N
    return (rng.standard_normal((cfg.batch_size, cfg.N, c.m)) * np.sqrt(h)).astype(cfg.dtype)


def terminal_loss(traj: TrajectoryBatch, c: LqCoefficients) -> float:
    """``(1/M) sum_k |-grad g(X_N^k) - P_N^k|^2``."""
    X = traj.X[:, -1]
    r = X @ c.G.astype(X.dtype) + traj.P[:, -1]
    loss = float(np.mean(np.sum(r.astype(np.float64) ** 2, axis=-1)))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite terminal loss")
    return loss


def rollout_gradients(tape: RolloutTape, gX_N: np.ndarray, gP_N: np.ndarray):
    """Reverse pass of ``smp_rollout`` given cotangents at the terminal node.

    Returns ``(grad_mu0, [grad_phi_i])``.
    """
    traj = tape.traj
    st = tape.step
    M = traj.M
    gX, gP = gX_N, gP_N
    phi_grads = [None] * traj.N
    for i in range(traj.N - 1, -1, -1):
        cache = tape.phi_caches[i]
        Qf = traj.Q[:, i].reshape(M, -1)
        gX, gP, gQf = st.step_backward(traj.X[:, i], traj.P[:, i], Qf, traj.u[:, i], tape.dW[:, i], tape.h, gX, gP)
        phi_grads[i], gX_in = backward(cache.params, cache, gQf)
        gX = gX + gX_in
    mu0_grad, _ = backward(tape.mu0_cache.params, tape.mu0_cache, gP.sum(axis=0, keepdims=True))
    return mu0_grad, phi_grads


def loss_and_gradients(state: TrainingState, c: LqCoefficients, dW: np.ndarray):
    traj, tape = smp_rollout(composed_coefficients(c), state.mu0, state.phis, dW, with_tape=True)
    loss = terminal_loss(traj, c)
    M = traj.M
    X = traj.X[:, -1]
    G = c.G.astype(X.dtype)
    r = X @ G + traj.P[:, -1]
    gP = (2.0 / M) * r
    gX = gP @ G
    mu0_grad, phi_grads = rollout_gradients(tape, gX.astype(X.dtype), gP.astype(X.dtype))
    return loss, mu0_grad, phi_grads


def apply_gradients(state: TrainingState, mu0_grad: GradientSet, phi_grads: list[GradientSet], rate: float):
    mu0, mu0_adam = adam_step(state.mu0, mu0_grad, state.mu0_adam, rate)
    phis, adams = [], []
    for p, g, a in zip(state.phis, phi_grads, state.phi_adams):
        p, a = adam_step(p, g, a, rate)
        phis.append(p)
        adams.append(a)
    return replace(state, mu0=mu0, mu0_adam=mu0_adam, phis=phis, phi_adams=adams)


def train_step(state: TrainingState, cfg: TrainingConfig, c: LqCoefficients, rate: float | None = None):
    """One SGD iteration on a fresh minibatch; returns ``(new_state, loss)``."""
    if rate is None:
        rate = schedule_rate(cfg.schedule(), min(state.step, cfg.schedule().total_steps))
    dW = training_increments(cfg, c, state.step)
    try:
        loss, mu0_grad, phi_grads = loss_and_gradients(state, c, dW)
        new = apply_gradients(state, mu0_grad, phi_grads, rate)
    except DivergenceError as exc:
        exc.snapshot = state
        exc.step = state.step
        raise
    new.step = state.step + 1
    new.loss_history = state.loss_history + [loss]
    return new, loss


def validate(state: TrainingState, c: LqCoefficients, validation: ValidationSet, iteration_time_s=float("nan")) -> ErrorReport:
    N = len(state.phis)
    dW = validation.increments(N)
    traj = smp_rollout(
        composed_coefficients(c), state.mu0, state.phis, dW.astype(state.mu0.dtype), seed=validation.brownian.seed
    )
    report = pathwise_errors(traj, validation.reference, c, validation.solution, dW, iteration_time_s)
    report.step = state.step
    return report


def validation_rollout(state: TrainingState, c: LqCoefficients, validation: ValidationSet) -> TrajectoryBatch:
    dW = validation.increments(len(state.phis))
    return smp_rollout(
        composed_coefficients(c), state.mu0, state.phis, dW.astype(state.mu0.dtype), seed=validation.brownian.seed
    )


def train(cfg: TrainingConfig, c: LqCoefficients, validation: ValidationSet | None = None, state=None):
    """Run ``cfg.iterations`` steps; returns ``(state, reports)``.

    Reports are taken at step 0, every ``validation_every`` steps and at the end
    when a validation set is supplied.
    """
    state = init_state(cfg, c) if state is None else state
    schedule = cfg.schedule()
    reports = []
    elapsed, start = 0.0, state.step
    if validation is not None:
        reports.append(validate(state, c, validation))
    while state.step < cfg.iterations:
        t0 = time.perf_counter()
        state, loss = train_step(state, cfg, c, schedule_rate(schedule, state.step))
        elapsed += time.perf_counter() - t0
        if state.step % cfg.validation_every == 0 or state.step == cfg.iterations:
            mean_time = elapsed / (state.step - start)
            log.info("N=%d step %d loss %.4e time/it %.3fs", cfg.N, state.step, loss, mean_time)
            if validation is not None:
                reports.append(validate(state, c, validation, mean_time))
    return state, reports
