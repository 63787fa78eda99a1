"""
Minimal dense-tensor core with reverse-mode automatic differentiation.

Tensors wrap numpy buffers. An operation is recorded on the active Tape only while a
tape is open and at least one operand requires grad; outside a tape every op is a plain
inference op. Gradients accumulate into leaf ``grad`` buffers until zeroed explicitly.
"""

import contextlib
import logging
import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype: ContextVar = ContextVar("vocseg_default_dtype", default=np.float32)
_active_tape: ContextVar = ContextVar("vocseg_active_tape", default=None)

GELU_COEFF = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes, axes or indices are incompatible with the op."""


class NumericalError(ArithmeticError):
    """An op produced NaN/Inf or was evaluated outside its domain."""


class TapeError(RuntimeError):
    """backward() was called with a loss the tape cannot differentiate."""


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Select the dtype new tensors default to ("float32" or "float64")."""
    if name not in _DTYPES:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    token = _default_dtype.set(_DTYPES[name])
    try:
        yield
    finally:
        _default_dtype.reset(token)


def default_dtype():
    return _default_dtype.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.array(data, dtype=dtype or default_dtype())
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"Tensor extents must be positive, got {array.shape}")
        _check_finite("tensor", array)
        self.data = array
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(array) if requires_grad else None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.is_leaf = False
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def set_requires_grad(self, flag: bool) -> None:
        self.requires_grad = flag
        if flag and self.is_leaf and self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _raise_not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


TensorLike = Union[Tensor, np.ndarray, float, int]
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    rule: BackwardRule


class Tape:
    """Ordered record of primitive ops; use as a context manager around the forward pass."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._outputs: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: tuple, output: Tensor, rule: BackwardRule) -> None:
        self.entries.append(TapeEntry(op, inputs, output, rule))
        self._outputs.add(id(output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")


def _as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, data, inputs: tuple, rule: BackwardRule) -> Tensor:
    data = np.asarray(data)
    _check_finite(op, data)
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        tape.record(op, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, *shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast shapes {shapes}") from exc


def _normalize_axes(axis, ndim: int) -> tuple:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        normalized.append(a % ndim)
    return tuple(sorted(normalized))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise NumericalError("div: division by zero")
    out = a.data / b.data
    return _emit("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(x: TensorLike, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit("scale", x.data * x.data.dtype.type(factor), (x,), lambda g: (g * factor,))


def gelu(x: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    inner = GELU_COEFF * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def rule(g):
        d_inner = GELU_COEFF * (1.0 + 3.0 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)

    return _emit("gelu", out, (x,), rule)


def relu(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    positive = x.data > 0
    return _emit("relu", np.where(positive, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * positive,))


def sigmoid(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    out = expit(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("log of non-positive value")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: TensorLike) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("sqrt of non-positive value")
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = None if axis is None else _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), rule)


def mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.ndim)) if axis is None else _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes if axis is not None else None, keepdims=keepdims), 1.0 / count)


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _normalize_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _normalize_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _emit("log_softmax", out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layernorm(x: TensorLike, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({width},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        dxhat = g * gain.data
        dx = inv / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        return dx, (flat_g * xhat.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layernorm", out, (x, gain, bias), rule)


def l2_normalize(x: TensorLike, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    norm = sqrt(add(sum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def rule(g):
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _emit("matmul", np.matmul(a.data, b.data), (a, b), rule)


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if _broadcast_shape("broadcast_to", x.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    return _emit("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (g,))


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = _normalize_axes(axis, ndim)[0]
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_along(x: TensorLike, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    axis = _normalize_axes(axis, x.ndim)[0]
    extent = x.shape[axis]
    if not 0 <= start < stop <= extent:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {extent}")
    key = (slice(None),) * axis + (slice(start, stop),)

    def rule(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _emit("slice", x.data[key], (x,), rule)


def take(x: TensorLike, indices, axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    axis = _normalize_axes(axis, x.ndim)[0]
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.shape[axis]:
        raise ShapeError(f"take: indices out of range for extent {x.shape[axis]}")

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit("take", np.take(x.data, idx, axis=axis), (x,), rule)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    flat = take(table, idx.reshape(-1), axis=0)
    return reshape(flat, idx.shape + (table.shape[1],))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic half-pixel interpolation matrix of shape (out_size, in_size)."""
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        src = min(max((i + 0.5) * in_size / out_size - 0.5, 0.0), in_size - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix


def nearest_index(in_size: int, out_size: int) -> np.ndarray:
    return np.minimum(np.floor(np.arange(out_size) * in_size / out_size), in_size - 1).astype(np.int64)


def bilinear_resize(x: TensorLike, out_h: int, out_w: int) -> Tensor:
    """Resize the two trailing axes; constants stay constant because rows sum to one."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize needs at least 2 axes")
    rows = bilinear_matrix(x.shape[-2], out_h).astype(x.dtype)
    cols = bilinear_matrix(x.shape[-1], out_w).astype(x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _emit("bilinear_resize", out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def nearest_resize(x: TensorLike, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("nearest_resize needs at least 2 axes")
    rows = nearest_index(x.shape[-2], out_h)
    cols = nearest_index(x.shape[-1], out_w)
    out = x.data[..., rows[:, None], cols[None, :]]

    def rule(g):
        full = np.zeros((int(np.prod(x.shape[:-2])),) + x.shape[-2:], dtype=x.dtype)
        np.add.at(full, (slice(None), rows[:, None], cols[None, :]), g.reshape(-1, out_h, out_w))
        return (full.reshape(x.shape),)

    return _emit("nearest_resize", out, (x,), rule)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not recorded on this tape")
    pending = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = pending.pop(id(entry.output), None)
        if g is None:
            continue
        for operand, grad in zip(entry.inputs, entry.rule(g)):
            if grad is None or not operand.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad, dtype=operand.dtype), operand.shape)
            if operand.is_leaf:
                operand.grad += grad
            elif id(operand) in pending:
                pending[id(operand)] = pending[id(operand)] + grad
            else:
                pending[id(operand)] = grad


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    floor: float = 1e-3,
    entries: Optional[Sequence[tuple]] = None,
) -> float:
    """
    Max relative error between tape gradients and central finite differences.

    ``entries`` restricts the comparison to (tensor, flat index) pairs; by default every
    entry of every input is checked. Run under ``precision("float64")``.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    backward(tape, out)
    analytic = {id(t): t.grad.copy() for t in inputs}
    if entries is None:
        entries = [(t, i) for t in inputs for i in range(t.size)]
    worst = 0.0
    for tensor, index in entries:
        flat = tensor.data.reshape(-1)
        original = flat[index]
        flat[index] = original + h
        plus = fn(*inputs).item()
        flat[index] = original - h
        minus = fn(*inputs).item()
        flat[index] = original
        numeric = (plus - minus) / (2.0 * h)
        exact = float(analytic[id(tensor)].reshape(-1)[index])
        worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), floor))
    return worst
