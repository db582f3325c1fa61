"""Exception hierarchy.

Every error carries a short machine-readable ``category`` that the CLI
prints and maps to an exit code.
"""


class SolverError(Exception):
    category = "solver"
    exit_code = 1


class ConfigError(SolverError, ValueError):
    category = "config"
    exit_code = 2


class ShapeError(SolverError, ValueError):
    category = "shape"
    exit_code = 3


class InvalidArchitectureError(ShapeError):
    category = "invalid-architecture"


class ContractViolation(SolverError):
    category = "contract"
    exit_code = 4


class GridIncompatibilityError(ContractViolation, ValueError):
    category = "grid-incompatible"


class DomainError(SolverError, ValueError):
    category = "domain"
    exit_code = 5


class SingularControlError(SolverError, ArithmeticError):
    category = "singular-control"
    exit_code = 6

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


class SingularDiffusionError(SolverError, ArithmeticError):
    category = "singular-diffusion"
    exit_code = 6


class UnsupportedProblemError(SolverError, ValueError):
    category = "unsupported-problem"
    exit_code = 7


class DivergenceError(SolverError, FloatingPointError):
    category = "diverged"
    exit_code = 8

    def __init__(self, message, step=None, sample=None, snapshot=None):
        where = []
        if step is not None:
            where.append(f"step={step}")
        if sample is not None:
            where.append(f"sample={sample}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.step = step
        self.sample = sample
        self.snapshot = snapshot


class StepTooLargeError(DomainError):
    category = "step-too-large"


class InsufficientDataError(SolverError, ValueError):
    category = "insufficient-data"
    exit_code = 9
