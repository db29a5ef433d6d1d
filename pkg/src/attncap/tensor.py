"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation in the package is built from the functions in
this module. Operations executed while a :class:`Tape` is active are recorded
on it; ``tape.backward(loss)`` then replays the records in reverse and
accumulates gradients into every ``requires_grad`` leaf tensor (one no
recorded operation produced).

Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense row-major array of 64-bit floats plus an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        out.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @classmethod
    def from_flat(cls, values: Sequence[float], shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        values = np.asarray(values, dtype=np.float64).ravel()
        if int(np.prod(shape, dtype=np.int64)) != values.size:
            raise DimensionError(f"{values.size} values cannot fill shape {tuple(shape)}")
        return cls(values.reshape(tuple(shape)), requires_grad=requires_grad)

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.zeros(shape), requires_grad)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.ones(shape), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major copy of the entries."""
        return self.data.ravel().copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-entry tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return reduce(self, "sum", axis)

    def mean(self, axis=None):
        return reduce(self, "mean", axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


@dataclass(frozen=True)
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside are appended in
    execution order, which is already a topological order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple, output: Tensor, backward) -> None:
        self.nodes.append(Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(node.output) for node in self.nodes}
        if id(loss) not in produced:
            raise ContractError("loss was not produced by an operation on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi

        # only leaves (tensors no recorded op produced) receive .grad
        seen: set[int] = set()
        for node in self.nodes:
            for t in node.inputs:
                key = id(t)
                if not t.requires_grad or key in produced or key in seen:
                    continue
                seen.add(key)
                g = grads.get(key)
                _accumulate(t, np.zeros_like(t.data) if g is None else g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


class no_grad:
    """Suspend recording, even inside an enclosing tape."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def custom_op(data: np.ndarray, inputs: Iterable[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``inputs``.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    inputs = tuple(inputs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.record(inputs, out, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return custom_op(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return custom_op(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return custom_op(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., k]`` with ``b[k, n]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    k, n = b.shape

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
        return ga, gb

    return custom_op(a.data @ b.data, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] @ weight[out, in].T + bias[out]`` as one recorded op."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out_dim, in_dim = weight.shape
    if bias is not None and bias.shape != (out_dim,):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, out_dim)
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, in_dim) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, inputs, back)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def back(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g  # basic indexing never selects an entry twice
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return custom_op(x.data[index], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: mismatched shapes {[t.shape for t in tensors]}") from None
    return custom_op(
        data, tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter back additively."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    rows = table.shape[0]
    bad = ids[(ids < 0) | (ids >= rows)]
    if bad.size:
        raise IndexError(f"row id {int(bad[0])} out of range for table with {rows} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return custom_op(table.data[ids], (table,), back)


# ---------------------------------------------------------------- elementwise


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    live = x.data > 0
    return custom_op(np.where(live, x.data, 0.0), (x,), lambda g: (g * live,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return custom_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    bad = np.flatnonzero(x.data.ravel() <= 0)
    if bad.size:
        index = np.unravel_index(bad[0], x.shape)
        raise DomainError(f"log of nonpositive entry {x.data[index]!r} at index {tuple(int(i) for i in index)}")
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def add_const(x: Tensor, c: float) -> Tensor:
    return custom_op(x.data + c, (x,), lambda g: (g,))


def scale(x: Tensor, c: float) -> Tensor:
    return custom_op(x.data * c, (x,), lambda g: (g * c,))


_ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(x: Tensor, kind: str, const: float | None = None) -> Tensor:
    if kind in _ELEMENTWISE:
        return _ELEMENTWISE[kind](x)
    if kind == "add-const":
        return add_const(x, const)
    if kind == "scale":
        return scale(x, const)
    raise ContractError(f"unknown elementwise function {kind!r}")


# ---------------------------------------------------------------- softmax / reductions


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return custom_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return custom_op(y, (x,), back)


def reduce(x: Tensor, kind: str = "sum", axis: int | None = None) -> Tensor:
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {kind!r}")
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"reduce: axis {axis} out of range for shape {x.shape}")
    if axis is None:
        count = x.size
        out = x.data.sum() if kind == "sum" else x.data.mean()
    else:
        count = x.shape[axis]
        out = x.data.sum(axis=axis) if kind == "sum" else x.data.mean(axis=axis)
    factor = 1.0 if kind == "sum" else 1.0 / count

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * factor, x.shape),)

    return custom_op(np.asarray(out), (x,), back)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, "sum", axis)


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, "mean", axis)


# ---------------------------------------------------------------- convolution / pooling


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Valid cross-correlation of ``x[B, C, H, W]`` with ``w[O, C, kH, kW]`` plus bias.

    Implemented as one matrix product over patch columns laid out
    ``[C * kH * kW, B * Ho * Wo]`` so every copy runs along image rows.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {w.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw or (Hp - kh) % stride or (Wp - kw) % stride:
        raise DimensionError(
            f"conv2d: input {H}x{W} (padding {padding}) does not tile with kernel {kh}x{kw} at stride {stride}"
        )
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    xp = np.zeros((C, B, Hp, Wp))
    xp[:, :, padding:padding + H, padding:padding + W] = x.data.transpose(1, 0, 2, 3)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.empty((C, kh * kw, B, Ho, Wo))
    for k, (i, j) in enumerate(offsets):
        cols[:, k] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    wmat = w.data.reshape(O, C * kh * kw)
    out = (wmat @ cols + b.data[:, None]).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, kh * kw, B, Ho, Wo)
            gxp = np.zeros_like(xp)
            for k, (i, j) in enumerate(offsets):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, k]
            gx = gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return custom_op(out, (x, w, b), back)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes.

    The gradient goes to the first maximal entry of each window in row-major order.
    """
    *lead, H, W = x.shape
    if H % window or W % window:
        raise DimensionError(f"maxpool2d: extents {H}x{W} are not divisible by window {window}")
    h, w = H // window, W // window
    blocks = x.data.reshape(*lead, h, window, w, window)
    nl = len(lead)
    order = (*range(nl), nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(order).reshape(*lead, h, w, window * window)
    arg = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, arg, axis=-1)[..., 0]

    def back(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg, g[..., None], axis=-1)
        gblocks = gflat.reshape(*lead, h, w, window, window).transpose(order)
        return (gblocks.reshape(x.shape),)

    return custom_op(out, (x,), back)


# ---------------------------------------------------------------- gradient oracle


def numerical_gradient(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (x is restored afterwards)."""
    flat = x.data.reshape(-1)
    fd = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f(x).item()
            flat[i] = orig - epsilon
            fm = f(x).item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * epsilon)
    return fd.reshape(x.shape)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative disagreement between tape gradients and central differences."""
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        tape.backward(y)
        auto = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        fd = numerical_gradient(f, x, epsilon)
    finally:
        x.requires_grad = was
        x.grad = None
    err = np.abs(auto - fd) / np.maximum(1e-8, np.abs(auto) + np.abs(fd))
    return float(err.max()) if err.size else 0.0
