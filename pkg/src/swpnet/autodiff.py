"""Dense tensors with reverse-mode automatic differentiation on a gradient tape.

Storage is a row-major flat numpy array per tensor.  float32 is the working
precision for training and inference; float64 is used for gradient
verification, where finite differences need the extra headroom.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(Exception):
    """Base class for tensor and tape usage errors."""


class ShapeMismatch(AutodiffError):
    """Operands have incompatible shapes or extents."""


class NumericsError(AutodiffError):
    """An operation produced NaN or Inf while numeric checks were enabled."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape():
    """The innermost open GradTape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def numerics_enabled() -> bool:
    return getattr(_state, "numerics", True)


@contextmanager
def numerics_checks(enabled: bool):
    """Toggle NaN/Inf detection; disabled inside benchmark timing loops."""
    prev = numerics_enabled()
    _state.numerics = enabled
    try:
        yield
    finally:
        _state.numerics = prev


def _check_finite(data: np.ndarray, op_name: str) -> None:
    if numerics_enabled() and not np.all(np.isfinite(data)):
        raise NumericsError(f"{op_name} produced a non-finite value")


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeMismatch(f"zero extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class RandomFill:
    """Deterministic random fill spec for tensor_create.

    kind 'normal' draws mean/std, kind 'uniform' draws [low, high).
    """

    kind: str = "normal"
    seed: int = 0
    mean: float = 0.0
    std: float = 1.0
    low: float = 0.0
    high: float = 1.0


def tensor_create(shape: Sequence[int], fill, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Create a tensor of the given extents from a scalar, sequence, or RandomFill."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"extents must all be >= 1, got {list(shape)}")
    n = math.prod(shape)
    if isinstance(fill, RandomFill):
        rng = np.random.default_rng(fill.seed)
        if fill.kind == "normal":
            data = rng.normal(fill.mean, fill.std, size=shape)
        elif fill.kind == "uniform":
            data = rng.uniform(fill.low, fill.high, size=shape)
        else:
            raise ValueError(f"unknown RandomFill kind {fill.kind!r}")
    elif np.isscalar(fill):
        data = np.full(shape, fill)
    else:
        seq = np.asarray(fill)
        if seq.size != n:
            raise ShapeMismatch(f"fill of length {seq.size} cannot populate shape {list(shape)} ({n} values)")
        data = seq.reshape(shape)
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


class _OpNode:
    __slots__ = ("out", "inputs", "backward_fn", "name")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable, name: str):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class GradTape:
    """Ordered record of differentiable ops; appended in forward order, so
    the node list is topologically sorted by construction."""

    def __init__(self):
        self._nodes: list[_OpNode] = []

    @property
    def nodes(self) -> tuple:
        return tuple(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise AutodiffError("GradTape exited out of order")
        return False


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable, name: str = "op") -> Tensor:
    """Wrap an op result and, when a tape is open and gradients are needed,
    push a node whose backward_fn(out_grad) returns one grad (or None) per input."""
    _check_finite(out_data, name)
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    tape = active_tape()
    if tape is not None and needs_grad:
        node = _OpNode(out, inputs, backward_fn, name)
        tape._nodes.append(node)
        out._node = node
        out._tape = tape
    return out


def grad_needed(t: Tensor) -> bool:
    """True when a backward pass will want a gradient for this tensor."""
    return t.requires_grad or t._node is not None


def is_recording(*inputs: Tensor) -> bool:
    return active_tape() is not None and any(t.requires_grad for t in inputs)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T if grad_needed(a) else None
        gb = a.data.T @ g if grad_needed(b) else None
        return ga, gb

    return record((a, b), out, bwd, "matmul")


def _trailing_broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    reduced = tuple(range(g.ndim - len(shape)))
    return g.sum(axis=reduced)


def _binary(a: Tensor, b: Tensor, fwd, da, db, name: str) -> Tensor:
    if not _trailing_broadcast_ok(a.shape, b.shape):
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} are not equal "
                            "and neither is a trailing-axis suffix of the other")
    out = fwd(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(da(g), a.shape) if grad_needed(a) else None
        gb = _unbroadcast(db(g), b.shape) if grad_needed(b) else None
        return ga, gb

    return record((a, b), out, bwd, name)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g: g * b.data, lambda g: g * a.data, "mul")


# optional sink used by tests to verify probe points sit away from relu kinks
relu_input_sink: list | None = None


def relu(x: Tensor) -> Tensor:
    if relu_input_sink is not None:
        relu_input_sink.append(x.data.copy())
    out = np.maximum(x.data, 0)

    def bwd(g):
        return ((g * (x.data > 0)).astype(x.data.dtype),)

    return record((x,), out, bwd, "relu")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = x.data * factor

    def bwd(g):
        return (g * factor,)

    return record((x,), out, bwd, "scale")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, *operands) -> Tensor:
    """Dispatch {add, sub, mul, relu, scale} by name."""
    if op_kind in _ELEMENTWISE:
        return _ELEMENTWISE[op_kind](*operands)
    if op_kind == "relu":
        return relu(*operands)
    if op_kind == "scale":
        return scale(*operands)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return record((x,), out, bwd, "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {list(shape)}")
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return record((x,), out, bwd, "reshape")


# ---------------------------------------------------------------------------
# backward pass and gradient verification
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    Repeated calls without zeroing accumulate one unit of gradient per call;
    intermediate gradients live in transient buffers and are discarded.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be a scalar, got shape {list(loss.shape)}")
    tape = loss._tape
    if tape is None:
        raise AutodiffError("loss is detached: it was not recorded on any tape")
    transient: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = transient.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None:
                continue
            if t._node is None:
                if not t.requires_grad:
                    continue
                t.grad = gt.copy() if t.grad is None else t.grad + gt
            else:
                prev = transient.get(id(t))
                transient[id(t)] = gt if prev is None else prev + gt


def grad_check(function: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central finite differences.

    `function` takes no arguments, closes over `params`, and must return a
    scalar deterministically; params must be float64 leaves.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise AutodiffError("grad_check requires float64 parameters")
        if not p.requires_grad:
            raise AutodiffError("grad_check parameters must have requires_grad set")

    probe_a = function()
    probe_b = function()
    if probe_a.data.size != 1:
        raise AutodiffError("grad_check function must return a scalar")
    if probe_a.data.tobytes() != probe_b.data.tobytes():
        raise AutodiffError("grad_check function is non-deterministic across probe evaluations")

    for p in params:
        p.grad = None
    with GradTape():
        backward(function())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = function().item()
            flat[i] = saved - eps
            f_minus = function().item()
            flat[i] = saved
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana_flat[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
