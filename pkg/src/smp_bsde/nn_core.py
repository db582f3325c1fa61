"""Dense tanh networks with hand-written reverse mode, plus Adam.

Batches are row-major: an input batch has shape ``(M, n_in)`` and a weight
matrix of shape ``(n_out, n_in)`` acts as ``x @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DivergenceError, InvalidArchitectureError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7
TERMINAL_RATE = 1e-6


@dataclass
class MlpParameters:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        n = len(self.layer_sizes) - 1
        if n < 1 or len(self.weights) != n or len(self.biases) != n:
            raise InvalidArchitectureError(
                f"expected {n} weight/bias pairs for layer sizes {self.layer_sizes}"
            )
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if W.shape != shape or b.shape != (shape[0],):
                raise ShapeError(f"layer {k}: got W{W.shape}, b{b.shape}, expected W{shape}")

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, layer_sizes, arrays) -> "MlpParameters":
        return cls(list(layer_sizes), list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "MlpParameters":
        return MlpParameters.from_arrays(self.layer_sizes, [a.copy() for a in self.arrays()])

    def astype(self, dtype) -> "MlpParameters":
        return MlpParameters.from_arrays(self.layer_sizes, [a.astype(dtype) for a in self.arrays()])


@dataclass
class GradientSet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def zeros_like(cls, params: MlpParameters) -> "GradientSet":
        return cls([np.zeros_like(W) for W in params.weights], [np.zeros_like(b) for b in params.biases])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, params: MlpParameters, **kw) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


@dataclass(frozen=True)
class LrSchedule:
    initial_rate: float
    total_steps: int
    decay_target: float = TERMINAL_RATE

    def __post_init__(self):
        if self.initial_rate <= 0 or self.decay_target <= 0 or self.total_steps < 1:
            raise ValueError(f"invalid schedule {self}")


@dataclass
class ForwardCache:
    params: MlpParameters
    inputs: np.ndarray
    # tanh outputs of every hidden layer; pre-activations are not needed
    # since d tanh(z)/dz = 1 - tanh(z)**2
    hidden: list[np.ndarray] = field(default_factory=list)


def init_mlp(layer_sizes, seed: int, dtype=np.float32) -> MlpParameters:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise InvalidArchitectureError(f"need at least input and output sizes, got {sizes}")
    if any(int(s) < 1 for s in sizes):
        raise InvalidArchitectureError(f"all layer sizes must be >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParameters(sizes, weights, biases)


def forward(params: MlpParameters, inputs: np.ndarray):
    """Evaluate the network on a batch; returns ``(outputs, cache)``."""
    x = np.asarray(inputs)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input shape {x.shape} incompatible with input size {params.layer_sizes[0]}")
    cache = ForwardCache(params, x)
    a = x
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        if k < last:
            a = np.tanh(z)
            cache.hidden.append(a)
        else:
            a = z
    return a, cache


def backward(params: MlpParameters, cache: ForwardCache, output_cotangent: np.ndarray):
    """Pull ``output_cotangent`` back through the network.

    Returns the parameter gradient of ``sum(cotangent * outputs)`` over the
    batch and the cotangent with respect to the inputs.
    """
    if cache.params is not params:
        raise ContractViolation("cache was produced by a different parameter set")
    g = np.asarray(output_cotangent)
    M = cache.inputs.shape[0]
    if g.shape != (M, params.layer_sizes[-1]):
        raise ShapeError(f"cotangent shape {g.shape}, expected {(M, params.layer_sizes[-1])}")
    n = len(params.weights)
    gW = [None] * n
    gb = [None] * n
    for k in range(n - 1, -1, -1):
        a_in = cache.hidden[k - 1] if k > 0 else cache.inputs
        gW[k] = g.T @ a_in
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * (1.0 - cache.hidden[k - 1] ** 2)
    return GradientSet(gW, gb), g


def adam_step(params: MlpParameters, grads: GradientSet, state: AdamState, rate: float):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    if not grads.all_finite():
        raise DivergenceError("non-finite gradient entry", step=state.step_count)
    if rate < 0:
        raise ValueError(f"learning rate must be nonnegative, got {rate}")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append((p - rate * step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    new_state = AdamState(new_m, new_v, t, b1, b2, eps)
    return MlpParameters.from_arrays(params.layer_sizes, new_params), new_state


def schedule_rate(schedule: LrSchedule, step: int) -> float:
    """Exponential interpolation from the initial rate to ``decay_target`` at step K."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    eta0 = schedule.initial_rate
    return float(eta0 * (schedule.decay_target / eta0) ** (step / schedule.total_steps))
