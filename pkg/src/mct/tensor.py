"""Dense tensors with a straight-line reverse-mode tape.

Every differentiable op records a node on the innermost active :class:`Tape`.
``backward`` walks the recorded nodes in exact reverse order and accumulates
into :class:`Parameter` (and other leaf) gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class TapeError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Select float64 (verification) or float32 (training) for new tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """An immutable n-d array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the actual ops live below as module functions
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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named trainable leaf carrying its gradient and Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter {self.name!r} of shape {self.shape}")
        self.data = np.ascontiguousarray(value.copy())

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


class _Node:
    __slots__ = ("out", "inputs", "vjp", "name", "tape")

    def __init__(self, out, inputs, vjp, name, tape):
        self.tape = tape
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops run inside it are recorded, ops outside it
    are plain numpy evaluations.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                if t._node is None:
                    t.grad += gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("loss was not produced under an active tape")
    loss._node.tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out_data: np.ndarray, inputs: Sequence, vjp: Callable, name: str) -> Tensor:
    """Wrap an op result, recording it when a tape is active and any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out.requires_grad = False
    if needs and _TAPES:
        out.requires_grad = True
        tape = _TAPES[-1]
        node = _Node(out, tuple(inputs), vjp, name, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = b
        return _record(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with leading-axis broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), vjp, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[idx]), (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "stack")


def replace_row(x: Tensor, index: int, row: Tensor) -> Tensor:
    """Return ``x`` with ``x[..., index, :]`` overwritten by ``row`` (broadcast over leading axes)."""
    if row.shape[-1] != x.shape[-1]:
        raise ShapeError(f"row of width {row.shape[-1]} cannot replace rows of width {x.shape[-1]}")
    out = x.data.copy()
    out[..., index, :] = row.data
    row_shape = row.shape

    def vjp(g):
        gx = g.copy()
        gx[..., index, :] = 0
        return gx, _unbroadcast(g[..., index, :], row_shape)

    return _record(out, (x, row), vjp, "replace_row")


# ---------------------------------------------------------------- reductions

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _record(out, (a,), lambda g: (np.array(_expand(g, shape, axis, keepdims)),), "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return _record(out, (a,), lambda g: (np.array(_expand(g, shape, axis, keepdims)) / n,), "mean")
