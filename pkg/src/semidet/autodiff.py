"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every primitive executed while gradients are enabled is
appended to a global tape; ``backward`` replays the tape once in reverse
and then clears it.  All arithmetic is float64.  Non-finite values in any
forward output or accumulated gradient are a hard error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "backward",
    "forward_primitive",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "reduce_sum",
    "reduce_mean",
    "broadcast_to",
    "tslice",
    "concat",
    "absolute",
    "minimum",
    "maximum",
    "reciprocal",
]


class NonFiniteError(FloatingPointError):
    """A forward output or gradient contained NaN or Inf."""


_TAPE: list["Tensor"] = []
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (teacher inference, evaluation, decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def tape_size() -> int:
    return len(_TAPE)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense float64 array with an accumulated-gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor constructor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __getitem__(self, key):
        return tslice(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    _check_finite(g, "gradient")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes introduced or expanded by numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None], what: str) -> Tensor:
    _check_finite(out_data, what)
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward_fn = backward_fn
        _TAPE.append(out)
    return out


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(tensor) into ``grad`` of every reachable tensor.

    ``root`` must be a scalar.  Gradients accumulate additively across
    fan-out; callers zero grads between optimization steps.  The tape is
    cleared afterwards.
    """
    global _TAPE
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    try:
        root.grad = np.ones_like(root.data)
        for node in reversed(_TAPE):
            if node.grad is not None and node._backward_fn is not None:
                node._backward_fn(node.grad)
    finally:
        for node in _TAPE:
            node._backward_fn = None
        _TAPE = []


# ---------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd, "matmul")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0.0))

    return _make(out_data, (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out_data = expit(x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bwd, "sigmoid")


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * out_data)

    return _make(out_data, (x,), bwd, "exp")


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g / x.data)

    return _make(out_data, (x,), bwd, "log")


def softplus(x: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * expit(x.data))

    return _make(out_data, (x,), bwd, "softplus")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.shape))

    return _make(out_data, (x,), bwd, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate(x, np.broadcast_to(g / count, x.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg / count, x.shape))

    return _make(out_data, (x,), bwd, "reduce_mean")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = np.broadcast_to(x.data, shape).copy()

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, _unbroadcast(g, x.shape))

    return _make(out_data, (x,), bwd, "broadcast")


def tslice(x: Tensor, key) -> Tensor:
    out_data = x.data[key]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            _accumulate(x, gx)

    return _make(np.array(out_data, copy=True), (x,), bwd, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(out_data, tensors, bwd, "concat")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OIHW kernel, zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW kernel")
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ValueError("conv2d kernel larger than padded input")
    s = int(stride)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // s + 1
    wo = (wd + 2 * padding - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    ymat = cols @ wmat.T
    out_data = ymat.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0).reshape(bias.shape))
        if w.requires_grad:
            _accumulate(w, (gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            gcols = gmat @ wmat
            gwin = gcols.reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, bwd, "conv2d")


# ---------------------------------------------------------------------
# composed helpers (built from primitives, differentiable throughout)
# ---------------------------------------------------------------------

def absolute(x: Tensor) -> Tensor:
    """|x| as relu(x) + relu(-x); subgradient 0 at the kink."""
    return add(relu(x), relu(mul(x, _as_tensor(-1.0))))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """min(a, b) = a - relu(a - b)."""
    return sub(a, relu(sub(a, b)))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """max(a, b) = a + relu(b - a)."""
    return add(a, relu(sub(b, a)))


def reciprocal(x: Tensor) -> Tensor:
    """1/x for strictly positive x, as exp(-log(x))."""
    return exp(mul(log(x), _as_tensor(-1.0)))


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "broadcast": broadcast_to,
    "slice": tslice,
    "concat": concat,
}


def forward_primitive(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by name; records on the tape as usual."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    fn = _PRIMITIVES[op]
    if op in ("concat",):
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)
