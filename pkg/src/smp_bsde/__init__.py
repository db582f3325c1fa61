"""Deep SMP-BSDE solver for linear-quadratic stochastic control.

Plain-numpy networks and Adam, a Riccati reference solution, coupled
Brownian path simulation, error measures and a batch experiment runner.
"""
from .errors import SolverError
from .lq_problem import LqCoefficients, preset
from .riccati import integrate_riccati, value_at
from .smp_trainer import TrainingConfig, train

__all__ = ["LqCoefficients", "SolverError", "TrainingConfig", "integrate_riccati", "preset", "train", "value_at"]
__version__ = "0.1.0"
