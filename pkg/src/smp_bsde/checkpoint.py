"""Versioned ``.npz`` checkpoints of network parameters and Adam states.

Arrays are stored in their training dtype so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dp_baseline import DpTrainingState
from .errors import ConfigError
from .nn_core import AdamState, MlpParameters
from .smp_trainer import TrainingState

CHECKPOINT_VERSION = 1


def _pack(prefix, params: MlpParameters, adam: AdamState, out: dict, meta: list):
    for k, a in enumerate(params.arrays()):
        out[f"{prefix}/p{k}"] = a
    for k, (m, v) in enumerate(zip(adam.first_moment, adam.second_moment)):
        out[f"{prefix}/m{k}"] = m
        out[f"{prefix}/v{k}"] = v
    meta.append(
        {
            "prefix": prefix,
            "layer_sizes": params.layer_sizes,
            "n_arrays": len(params.arrays()),
            "step_count": adam.step_count,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
        }
    )


def _unpack(entry, data):
    p = entry["prefix"]
    n = entry["n_arrays"]
    params = MlpParameters.from_arrays(entry["layer_sizes"], [data[f"{p}/p{k}"] for k in range(n)])
    adam = AdamState(
        [data[f"{p}/m{k}"] for k in range(n)],
        [data[f"{p}/v{k}"] for k in range(n)],
        entry["step_count"],
        entry["beta1"],
        entry["beta2"],
        entry["epsilon"],
    )
    return params, adam


def save_checkpoint(path, state, extra: dict | None = None) -> Path:
    """Write an SMP ``TrainingState`` or a ``DpTrainingState``."""
    arrays: dict = {}
    nets: list = []
    if isinstance(state, TrainingState):
        method = "smp"
        _pack("mu0", state.mu0, state.mu0_adam, arrays, nets)
        for i, (p, a) in enumerate(zip(state.phis, state.phi_adams)):
            _pack(f"phi{i}", p, a, arrays, nets)
    elif isinstance(state, DpTrainingState):
        method = "dp"
        for i, (p, a) in enumerate(zip(state.zs, state.adams)):
            _pack(f"z{i}", p, a, arrays, nets)
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    header = {
        "version": CHECKPOINT_VERSION,
        "method": method,
        "step": state.step,
        "networks": nets,
        "lam": getattr(state, "lam", None),
        "extra": extra or {},
    }
    arrays["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    with np.load(Path(path)) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
        nets = [_unpack(e, data) for e in header["networks"]]
        history = data["loss_history"].tolist()
    if header["method"] == "smp":
        (mu0, mu0_adam), rest = nets[0], nets[1:]
        return TrainingState(mu0, mu0_adam, [p for p, _ in rest], [a for _, a in rest], header["step"], history)
    return DpTrainingState([p for p, _ in nets], [a for _, a in nets], header["lam"], header["step"], history)
