"""SGD with momentum, and value-exact parameter (de)serialization.

Parameter sets are ordered name -> Tensor mappings.  Snapshots are JSON
lists of (name, shape, values) records; Python's repr-based float
round-trip keeps float64 values exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

ParamDict = dict[str, Tensor]


@dataclass
class SGDState:
    """Momentum buffers plus hyperparameters, one buffer per parameter."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def scheduled_lr(base: float, iteration: int, total_iters: int,
                 schedule: str = "constant", final_scale: float = 0.1) -> float:
    """Learning rate for one step.  "cosine" decays smoothly from ``base``
    to ``final_scale * base`` over ``total_iters``; "constant" returns
    ``base``.  Depends only on the step index, so resumed runs recompute
    the identical value."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        import math
        t = min(max(iteration, 0), max(total_iters, 1)) / max(total_iters, 1)
        return base * (final_scale + (1.0 - final_scale)
                       * 0.5 * (1.0 + math.cos(math.pi * t)))
    raise ValueError(f"unknown learning-rate schedule {schedule!r}")


def sgd_step(params: ParamDict, state: SGDState) -> None:
    """v <- m*v + g;  theta <- theta - lr*v;  grads reset to zero."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + p.grad
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
        p.grad = None


def zero_grads(params: ParamDict) -> None:
    for p in params.values():
        p.grad = None


def clone_params(params: ParamDict, requires_grad: bool = False) -> ParamDict:
    out: ParamDict = {}
    for name, p in params.items():
        t = Tensor(p.data.copy())
        t.requires_grad = requires_grad
        out[name] = t
    return out


def copy_values(dst: ParamDict, src: ParamDict) -> None:
    """Overwrite dst parameter values with src values (shapes must match)."""
    if dst.keys() != src.keys():
        raise ValueError("parameter name sets differ")
    for name in dst:
        if dst[name].shape != src[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
        dst[name].data = src[name].data.copy()


def params_to_records(params: ParamDict) -> list:
    return [[name, list(p.shape), p.data.reshape(-1).tolist()]
            for name, p in params.items()]


def params_from_records(records: list, requires_grad: bool = False) -> ParamDict:
    out: ParamDict = {}
    for name, shape, values in records:
        arr = np.array(values, dtype=np.float64).reshape(shape)
        t = Tensor(arr)
        t.requires_grad = requires_grad
        out[name] = t
    return out


def save_params(params: ParamDict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params_to_records(params), f)


def load_params(path, requires_grad: bool = False) -> ParamDict:
    with open(path, encoding="utf-8") as f:
        return params_from_records(json.load(f), requires_grad=requires_grad)
