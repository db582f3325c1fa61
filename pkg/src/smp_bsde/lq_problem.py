"""Linear-quadratic control problems and their SMP feedback/FBSDE maps.

State ``x`` has dimension d, control ``u`` dimension l, Brownian motion
dimension m.  All maps accept a single point or a batch with arbitrary
leading axes: ``x`` is ``(..., d)``, ``u`` is ``(..., l)``, ``p`` is
``(..., d)`` and ``q`` is ``(..., d, m)`` (column j is q_j).

Running cost convention: ``f = 1/2 x'R_x x + u'R_xu x + 1/2 u'R_u u``.  With
this cross term the feedback map below is the exact maximiser of the
Hamiltonian and agrees with the Riccati feedback.  Both presets have
``R_xu = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError, SingularControlError

SYMMETRY_TOL = 1e-12


def _as_matrix(a, shape, name):
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise ShapeError(f"{name} has shape {a.shape}, expected {shape}")
    return a


@dataclass(frozen=True, eq=False)
class LqCoefficients:
    """Coefficients of ``dX = (AX + Bu + beta)dt + sum_j (C_j X + D_j u + Sigma_j) dW_j``.

    ``C`` is stored as an ``(m, d, d)`` stack, ``D`` as ``(m, d, l)`` and
    ``Sigma`` as a ``(d, m)`` matrix whose column j is Sigma_j.
    """

    A: np.ndarray
    B: np.ndarray
    beta: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Sigma: np.ndarray
    R_x: np.ndarray
    R_xu: np.ndarray
    R_u: np.ndarray
    G: np.ndarray
    x0: np.ndarray
    T: float
    name: str = "custom"

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ShapeError(f"A must be square, got {A.shape}")
        d = A.shape[0]
        B = np.array(self.B, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] != d:
            raise ShapeError(f"B must be {d} x l, got {B.shape}")
        l = B.shape[1]
        Sigma = np.array(self.Sigma, dtype=np.float64)
        if Sigma.ndim != 2 or Sigma.shape[0] != d:
            raise ShapeError(f"Sigma must be {d} x m, got {Sigma.shape}")
        m = Sigma.shape[1]
        fields = {
            "A": A,
            "B": B,
            "beta": _as_matrix(self.beta, (d,), "beta"),
            "C": _as_matrix(self.C, (m, d, d), "C"),
            "D": _as_matrix(self.D, (m, d, l), "D"),
            "Sigma": Sigma,
            "R_x": _as_matrix(self.R_x, (d, d), "R_x"),
            "R_xu": _as_matrix(self.R_xu, (l, d), "R_xu"),
            "R_u": _as_matrix(self.R_u, (l, l), "R_u"),
            "G": _as_matrix(self.G, (d, d), "G"),
            "x0": _as_matrix(self.x0, (d,), "x0"),
        }
        for key, value in fields.items():
            if not np.all(np.isfinite(value)):
                raise ConfigError(f"{key} has non-finite entries")
            value.setflags(write=False)
            object.__setattr__(self, key, value)
        for key in ("R_x", "R_u", "G"):
            M = fields[key]
            if np.max(np.abs(M - M.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(M))):
                raise ConfigError(f"{key} must be symmetric")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        object.__setattr__(self, "T", float(self.T))
        try:
            np.linalg.cholesky(fields["R_u"])
        except np.linalg.LinAlgError:
            raise SingularControlError("R_u must be positive definite") from None

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.Sigma.shape[1]

    @property
    def is_drift_control(self) -> bool:
        return not np.any(self.D)

    def to_mapping(self) -> dict:
        return {
            "name": self.name,
            "T": self.T,
            "x0": self.x0.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "beta": self.beta.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "Sigma": self.Sigma.tolist(),
            "R_x": self.R_x.tolist(),
            "R_xu": self.R_xu.tolist(),
            "R_u": self.R_u.tolist(),
            "G": self.G.tolist(),
        }

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "LqCoefficients":
        """Build from a nested mapping of row-major lists.

        ``C``, ``D``, ``beta``, ``R_x`` and ``R_xu`` default to zero.
        """
        required = ("A", "B", "Sigma", "R_u", "G", "x0", "T")
        missing = [k for k in required if k not in raw]
        if missing:
            raise ConfigError(f"problem definition lacks {missing}")
        try:
            A = np.array(raw["A"], dtype=np.float64)
            B = np.array(raw["B"], dtype=np.float64)
            Sigma = np.array(raw["Sigma"], dtype=np.float64)
            d, l, m = A.shape[0], B.shape[1], Sigma.shape[1]
            return cls(
                A=A,
                B=B,
                beta=raw.get("beta", np.zeros(d)),
                C=raw.get("C", np.zeros((m, d, d))),
                D=raw.get("D", np.zeros((m, d, l))),
                Sigma=Sigma,
                R_x=raw.get("R_x", np.zeros((d, d))),
                R_xu=raw.get("R_xu", np.zeros((l, d))),
                R_u=raw["R_u"],
                G=raw["G"],
                x0=raw["x0"],
                T=float(raw["T"]),
                name=str(raw.get("name", "custom")),
            )
        except (IndexError, TypeError) as exc:
            raise ConfigError(f"malformed problem definition: {exc}") from exc


def _check(c: LqCoefficients, x=None, u=None, p=None, q=None):
    for arr, shape, name in ((x, (c.d,), "x"), (u, (c.l,), "u"), (p, (c.d,), "p"), (q, (c.d, c.m), "q")):
        if arr is not None and np.shape(arr)[np.ndim(arr) - len(shape):] != shape:
            raise ShapeError(f"{name} has shape {np.shape(arr)}, trailing dims must be {shape}")


def drift_bar(c: LqCoefficients, t, x, u):
    _check(c, x=x, u=u)
    return x @ c.A.T + u @ c.B.T + c.beta


def diffusion_bar(c: LqCoefficients, t, x, u):
    """``(..., d, m)`` matrix with column j equal to C_j x + D_j u + Sigma_j."""
    _check(c, x=x, u=u)
    return np.einsum("jab,...b->...aj", c.C, x) + np.einsum("jab,...b->...aj", c.D, u) + c.Sigma


def running_cost(c: LqCoefficients, t, x, u):
    _check(c, x=x, u=u)
    return (
        0.5 * np.einsum("...a,ab,...b->...", x, c.R_x, x)
        + np.einsum("...a,ab,...b->...", u, c.R_xu, x)
        + 0.5 * np.einsum("...a,ab,...b->...", u, c.R_u, u)
    )


def terminal_cost(c: LqCoefficients, x):
    _check(c, x=x)
    return 0.5 * np.einsum("...a,ab,...b->...", x, c.G, x)


def terminal_gradient(c: LqCoefficients, x):
    _check(c, x=x)
    return x @ c.G  # G symmetric


def hamiltonian(c: LqCoefficients, t, x, u, p, q):
    """``p'b(t,x,u) + Tr(q'sigma(t,x,u)) - f(t,x,u)``."""
    _check(c, x=x, u=u, p=p, q=q)
    b = drift_bar(c, t, x, u)
    s = diffusion_bar(c, t, x, u)
    return np.einsum("...a,...a->...", p, b) + np.einsum("...aj,...aj->...", q, s) - running_cost(c, t, x, u)


def adjoint_driver_bar(c: LqCoefficients, t, x, u, p, q):
    """Gradient of the Hamiltonian in x."""
    _check(c, x=x, u=u, p=p, q=q)
    return p @ c.A + np.einsum("jba,...bj->...a", c.C, q) - x @ c.R_x - u @ c.R_xu


def feedback_map(c: LqCoefficients, t, x, p, q):
    """Maximiser of the Hamiltonian over u: ``-R_u^{-1}(R_xu x - B'p - sum_j D_j'q_j)``."""
    _check(c, x=x, p=p, q=q)
    rhs = x @ c.R_xu.T - p @ c.B - np.einsum("jab,...aj->...b", c.D, q)
    return -np.linalg.solve(c.R_u, rhs[..., None])[..., 0]


@dataclass(frozen=True, eq=False)
class FbsdeCoefficients:
    """The FBSDE coefficients obtained by substituting the feedback map."""

    problem: LqCoefficients

    def control(self, t, x, p, q):
        return feedback_map(self.problem, t, x, p, q)

    def b(self, t, x, p, q):
        return drift_bar(self.problem, t, x, self.control(t, x, p, q))

    def sigma(self, t, x, p, q):
        return diffusion_bar(self.problem, t, x, self.control(t, x, p, q))

    def F(self, t, x, p, q):
        return adjoint_driver_bar(self.problem, t, x, self.control(t, x, p, q), p, q)

    def terminal_gradient(self, x):
        return terminal_gradient(self.problem, x)


def composed_coefficients(c: LqCoefficients) -> FbsdeCoefficients:
    return FbsdeCoefficients(c)


_DIAG123 = np.array([1.0, 2.0, 3.0, 1.0, 2.0, 3.0])


def _example1(**overrides) -> dict:
    d = m = 6
    A = -np.diag(_DIAG123)
    B = np.array([[1, 1, 0.5, 1, 0, 0], [-1, 1, 1, -1, -1, 1]], dtype=np.float64).T
    raw = dict(
        name="example1",
        A=A,
        B=B,
        beta=-A @ np.array([-0.2, -0.1, 0.0, 0.0, 0.1, 0.2]),
        C=np.zeros((m, d, d)),
        D=np.zeros((m, d, 2)),
        Sigma=np.diag([0.05, 0.25, 0.05, 0.25, 0.05, 0.25]),
        R_x=2.0 * np.diag([25.0, 1, 25, 1, 25, 1]),
        R_xu=np.zeros((2, d)),
        R_u=2.0 * np.eye(2),
        G=2.0 * np.diag([1.0, 25, 1, 25, 1, 25]),
        x0=np.full(d, 0.1),
        T=0.5,
    )
    raw.update(overrides)
    return raw


def _example2() -> dict:
    m = 6
    C_j = np.diag(_DIAG123) / 60.0
    D_j = np.array([[1, 0, 1, 0, 1, 0], [0, -1, 0, -1, 0, -1]], dtype=np.float64).T / 60.0
    return _example1(name="example2", C=np.stack([C_j] * m), D=np.stack([D_j] * m))


PRESETS = {"example1": _example1, "example2": _example2}


def preset(name: str) -> LqCoefficients:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return LqCoefficients(**factory())
