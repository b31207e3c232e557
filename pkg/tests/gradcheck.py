"""Central finite-difference gradient checking utilities for the test suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from semidet.autodiff import Tensor, backward

STEP = 1e-5
REL_TOL = 1e-4


def numeric_gradient(
    loss_fn: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    index: int,
    step: float = STEP,
) -> np.ndarray:
    """Central-difference gradient of loss_fn with respect to arrays[index]."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index], dtype=np.float64)
    flat = grad.reshape(-1)
    target = base[index].reshape(-1)
    for i in range(target.size):
        saved = target[i]
        target[i] = saved + step
        up = loss_fn(base)
        target[i] = saved - step
        down = loss_fn(base)
        target[i] = saved
        flat[i] = (up - down) / (2.0 * step)
    return grad


def analytic_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
) -> list[np.ndarray]:
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    backward(loss)
    grads = []
    for t in tensors:
        grads.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    return float(np.max(diff / denom)) if diff.size else 0.0


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    rel_tol: float = REL_TOL,
    step: float = STEP,
) -> float:
    """Assert analytic gradients match central differences; return worst error."""

    def loss_fn(values: Sequence[np.ndarray]) -> float:
        tensors = [Tensor(v.copy(), requires_grad=False) for v in values]
        out = build(tensors)
        # Drop any recorded nodes so repeated evaluations stay independent.
        from semidet.autodiff import _TAPE

        _TAPE.clear()
        return float(out.data)

    analytic = analytic_gradients(build, arrays)
    worst = 0.0
    for i in range(len(arrays)):
        numeric = numeric_gradient(loss_fn, arrays, i, step=step)
        err = max_relative_error(analytic[i], numeric)
        worst = max(worst, err)
        assert err < rel_tol, f"gradient mismatch for input {i}: rel err {err:.3e}"
    return worst
