"""Error measures against the Riccati reference, rate fitting and bound constants."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DomainError, GridIncompatibilityError, StepTooLargeError
from .lq_problem import LqCoefficients
from .path_engine import (
    BrownianBatch,
    TrajectoryBatch,
    backward_value_sum,
    coarsen,
    reference_rollout,
    sample_brownian,
)
from .riccati import RiccatiSolution, value_at

TABLE_COLUMNS = [
    "N",
    "max_x_err",
    "max_p_err",
    "avg_q_err",
    "avg_u_err",
    "terminal_loss",
    "y0_err",
    "iter_time_s",
]
AVG_CONVENTION = "avg_q_err and avg_u_err are unweighted means over nodes n=0..N-1"


@dataclass
class ErrorReport:
    N: int
    max_x_err: float
    max_p_err: float
    avg_q_err: float
    avg_u_err: float
    terminal_loss: float
    y0_err: float
    a_posteriori: float
    iteration_time_s: float = float("nan")
    step: int | None = None  # training iteration at which the report was taken

    def row(self) -> dict:
        out = {k: getattr(self, k) for k in TABLE_COLUMNS if k != "iter_time_s"}
        out["iter_time_s"] = self.iteration_time_s
        return out


@dataclass
class RelativeErrors:
    """Per-node relative L2 errors; entries where the reference vanishes are absolute."""

    X: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    u: np.ndarray
    absolute: dict = field(default_factory=dict)


@dataclass
class BoundConstants:
    k_b: float
    k_F: float
    L_b_x: float
    L_b_p: float
    L_sigma_x: float
    L_sigma_p: float
    L_F_x: float
    L_F_p: float
    L_F_q: float
    L_gx_x: float
    lambda1: float
    lambda2: float
    T: float

    def __post_init__(self):
        lipschitz = (self.L_b_x, self.L_b_p, self.L_sigma_x, self.L_sigma_p, self.L_F_x, self.L_F_p, self.L_F_q, self.L_gx_x)
        if min(lipschitz) < 0:
            raise DomainError("Lipschitz constants must be nonnegative")
        if self.lambda1 <= 0:
            raise DomainError("lambda1 must be positive")
        if self.lambda2 < self.L_F_q:
            raise DomainError(f"lambda2={self.lambda2} must be >= L_F_q={self.L_F_q}")
        if self.T <= 0:
            raise DomainError("T must be positive")


def _mean_sq(a, axes):
    return np.mean(np.sum(a.astype(np.float64) ** 2, axis=axes), axis=0)


def _check_coupled(coarse: TrajectoryBatch, reference: TrajectoryBatch) -> TrajectoryBatch:
    if coarse.seed is not None and reference.seed is not None and coarse.seed != reference.seed:
        raise ContractViolation(f"batches driven by different Brownian seeds ({coarse.seed} vs {reference.seed})")
    if coarse.M != reference.M:
        raise ContractViolation(f"sample counts differ ({coarse.M} vs {reference.M})")
    if reference.N % coarse.N:
        raise GridIncompatibilityError(f"coarse grid N={coarse.N} is not a subset of reference N={reference.N}")
    return reference.restrict(coarse.N)


def terminal_loss_value(c: LqCoefficients, traj: TrajectoryBatch) -> float:
    X = traj.X[:, -1].astype(np.float64)
    return float(np.mean(np.sum((X @ c.G + traj.P[:, -1]) ** 2, axis=-1)))


def pathwise_errors(
    coarse: TrajectoryBatch,
    reference: TrajectoryBatch,
    c: LqCoefficients,
    sol: RiccatiSolution,
    dW: np.ndarray,
    iteration_time_s: float = float("nan"),
) -> ErrorReport:
    """Strong errors of a coarse approximation against the coupled fine reference.

    ``dW`` are the coarse increments that drove ``coarse``; they feed the
    backward value summation behind ``y0_err``.
    """
    ref = _check_coupled(coarse, reference)
    max_x = float(np.max(_mean_sq(coarse.X - ref.X, -1)))
    max_p = float(np.max(_mean_sq(coarse.P - ref.P, -1)))
    avg_q = float(np.mean(_mean_sq(coarse.Q - ref.Q, (-2, -1))))
    avg_u = float(np.mean(_mean_sq(coarse.u - ref.u, -1)))
    loss = terminal_loss_value(c, coarse)
    v0 = float(value_at(sol, 0.0, c.x0).value)
    y0 = backward_value_sum(c, coarse, dW)
    h = c.T / coarse.N
    return ErrorReport(
        N=coarse.N,
        max_x_err=max_x,
        max_p_err=max_p,
        avg_q_err=avg_q,
        avg_u_err=avg_u,
        terminal_loss=loss,
        y0_err=abs(y0.mean - v0),
        a_posteriori=h + loss,
        iteration_time_s=iteration_time_s,
    )


def relative_l2_in_time(coarse: TrajectoryBatch, reference: TrajectoryBatch) -> RelativeErrors:
    ref = _check_coupled(coarse, reference)
    out, absolute = {}, {}
    for name, axes in (("X", -1), ("P", -1), ("Q", (-2, -1)), ("u", -1)):
        num = _mean_sq(getattr(coarse, name) - getattr(ref, name), axes)
        den = _mean_sq(getattr(ref, name), axes)
        zero = den == 0
        out[name] = np.sqrt(num / np.where(zero, 1.0, den))
        absolute[name] = zero
    return RelativeErrors(out["X"], out["P"], out["Q"], out["u"], absolute)


def fit_rate(pairs) -> tuple[float, float]:
    """Least-squares line through ``(log h, log value)``; returns ``(slope, intercept)``."""
    h = np.array([p[0] for p in pairs], dtype=np.float64)
    v = np.array([p[1] for p in pairs], dtype=np.float64)
    if len(h) < 2 or np.any(h <= 0) or np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("need at least two points with positive step sizes and values")
    if len(np.unique(h)) < 2:
        raise DomainError("need at least two distinct step sizes")
    slope, intercept = np.polyfit(np.log(h), np.log(v), 1)
    return float(slope), float(intercept)


def _phi(s, T):
    # (1 - exp(-sT))/s, continuous at s = 0
    return T if s == 0 else -math.expm1(-s * T) / s


def _psi(s, T):
    # (exp(sT) - 1)/s, continuous at s = 0
    return T if s == 0 else math.expm1(s * T) / s


def a0_bar(bc: BoundConstants) -> tuple[float, float, float, float, float]:
    """``(A0, A1, A2, A3, A4)``; the coupling condition of the a-posteriori bound is ``A0 < 1``."""
    A1 = 2 * bc.k_b + bc.lambda1 + bc.L_sigma_x
    A2 = bc.L_b_p / bc.lambda1 + bc.L_sigma_p
    A3 = 2 * bc.k_F + bc.lambda2
    A4 = bc.L_F_x / bc.lambda2 if bc.lambda2 > 0 else (0.0 if bc.L_F_x == 0 else math.inf)
    s = A1 + A3
    A0 = A2 * _phi(s, bc.T) * (bc.L_gx_x * math.exp(s * bc.T) + A4 * _psi(s, bc.T))
    return A0, A1, A2, A3, A4


def lemma_constants(bc: BoundConstants, h: float) -> tuple[float, float, float, float]:
    """The step-size dependent constants ``A1(h)..A4(h)``."""
    r = (2 * bc.k_F + bc.lambda2) * h
    if h <= 0:
        raise DomainError("h must be positive")
    if r >= 1:
        raise StepTooLargeError(f"(2 k_F + lambda2) h = {r} must be < 1")
    A1 = 2 * bc.k_b + bc.lambda1 + bc.L_sigma_x + bc.L_b_x * h
    A2 = (1 / bc.lambda1 + h) * bc.L_b_p + bc.L_sigma_p
    A3 = -math.log1p(-r) / h
    A4 = bc.L_F_x / ((1 - r) * bc.lambda2) if bc.lambda2 > 0 else (0.0 if bc.L_F_x == 0 else math.inf)
    return A1, A2, A3, A4


@dataclass
class ValidationSet:
    """A held-out coupled Brownian batch with its fine reference solution.

    The reference is recorded on a grid of ``n_record`` steps; every coarse
    N evaluated against it must divide ``n_record``.
    """

    problem: LqCoefficients
    solution: RiccatiSolution
    brownian: BrownianBatch
    reference: TrajectoryBatch
    value0: float
    _coarse: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, c: LqCoefficients, sol: RiccatiSolution, M: int, N_fine: int, seed: int, n_record: int = 100):
        if N_fine % n_record:
            raise GridIncompatibilityError(f"n_record={n_record} does not divide N_fine={N_fine}")
        bb = sample_brownian(seed, M, N_fine, c.m, c.T)
        ref = reference_rollout(c, sol, bb, record_every=N_fine // n_record)
        return cls(c, sol, bb, ref, float(value_at(sol, 0.0, c.x0).value))

    def increments(self, N: int) -> np.ndarray:
        if N not in self._coarse:
            if self.reference.N % N:
                raise GridIncompatibilityError(f"N={N} does not divide the recorded reference grid {self.reference.N}")
            self._coarse[N] = coarsen(self.brownian, N)
        return self._coarse[N]


def write_table_csv(path, rows: list[dict], extra_columns=("kind", "repetition", "status")) -> Path:
    """Write Table-shaped rows; the first line records the averaging convention."""
    path = Path(path)
    columns = list(extra_columns) + TABLE_COLUMNS + ["a_posteriori"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {AVG_CONVENTION}\n")
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return path


def read_table_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: _parse(v) for k, v in r.items()})
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation over successful repetitions, per N."""
    out = []
    ok = [r for r in rows if r.get("kind") == "run" and r.get("status") == "ok"]
    for N in sorted({int(r["N"]) for r in ok}):
        group = [r for r in ok if int(r["N"]) == N]
        for kind, fn in (("mean", np.mean), ("std", lambda a: np.std(a, ddof=1) if len(a) > 1 else 0.0)):
            row = {"kind": kind, "repetition": len(group), "status": "ok", "N": N}
            for col in TABLE_COLUMNS[1:] + ["a_posteriori"]:
                row[col] = float(fn(np.array([float(r[col]) for r in group])))
            out.append(row)
    return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{v:.9e}"
    return v


def _parse(v):
    if v is None:
        return v
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def report_dict(report: ErrorReport) -> dict:
    return asdict(report)
