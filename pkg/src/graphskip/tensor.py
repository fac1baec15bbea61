"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap a flat numpy buffer (float32 or float64) plus an optional
gradient of identical shape.  Ops build a computation graph of closures;
``Tensor.backward`` replays it in reverse topological order.  Every forward
op validates that finite inputs produced finite outputs and raises
``NumericError`` otherwise.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_grad_enabled = True
_finite_checks = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used when tensors are created without an explicit one."""
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


def get_default_dtype():
    return _default_dtype


def _resolve_dtype(dtype):
    if dtype is None:
        return _default_dtype
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"unsupported dtype {dtype!r}; use float32 or float64")
        return DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = _resolve_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op finiteness validation (on by default)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    # make numpy defer to the reflected operators instead of broadcasting
    # object-wise over this class
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            self.data = np.asarray(data, dtype=_resolve_dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype.type in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        _check_finite(self.data, "tensor creation")
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # -- gradient machinery -------------------------------------------------

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this node; seeds with ones for scalars."""
        if not self.requires_grad:
            raise ShapeError("backward() called on a tensor that does not require grad")
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and not isinstance(axes[0], int):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class Parameter:
    """A named trainable tensor registered exactly once in a model."""

    __slots__ = ("value", "name")

    def __init__(self, value: Tensor, name: str):
        value.requires_grad = True
        self.value = value
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    """Wrap a forward result as a graph node linked to grad-requiring parents."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    if _grad_enabled:
        live = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(live)
        out._parents = live
    else:
        out.requires_grad = False
        out._parents = ()
    return out


def _as_array(x, dtype) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=dtype)


def _binary(a, b, op: str, fwd, bwd_a, bwd_b) -> Tensor:
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    dtype = (a.data.dtype if ta else b.data.dtype)
    da, db = _as_array(a, dtype), _as_array(b, dtype)
    out = _node(fwd(da, db), [x for x in (a, b) if isinstance(x, Tensor)], op)
    if out.requires_grad:
        def _bw(g):
            if ta and a.requires_grad:
                a._accum(_unbroadcast(bwd_a(g, da, db), da.shape))
            if tb and b.requires_grad:
                b._accum(_unbroadcast(bwd_b(g, da, db), db.shape))
        out._backward = _bw
    return out


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    da, db = a.data, b.data
    out = _node(np.matmul(da, db), (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(db, -1, -2))
                a._accum(_unbroadcast(ga, da.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(da, -1, -2), g)
                b._accum(_unbroadcast(gb, db.shape))
        out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = _node(e, (x,), "exp")
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * e)
    return out


def log(x: Tensor) -> Tensor:
    out = _node(np.log(x.data), (x,), "log")
    if out.requires_grad:
        out._backward = lambda g: x._accum(g / x.data)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero where the clip is active."""
    data = np.clip(x.data, lo, hi)
    out = _node(data, (x,), "clamp")
    if out.requires_grad:
        mask = (x.data >= lo) & (x.data <= hi)
        out._backward = lambda g: x._accum(g * mask)
    return out


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,), "relu")
    if out.requires_grad:
        mask = x.data > 0
        out._backward = lambda g: x._accum(g * mask)
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # two-sided form avoids overflow in exp for large |x|
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype, copy=False)
    # keep the open-interval guarantee even for saturating inputs
    info = np.finfo(d.dtype)
    s = np.clip(s, info.tiny, 1.0 - info.epsneg)
    out = _node(s, (x,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * s * (1.0 - s))
    return out


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.data.shape))
        out._backward = _bw
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; ties route the gradient to the first max in scan order."""
    data = x.data.max(axis=axis, keepdims=keepdims)
    out = _node(data, (x,), "max")
    if out.requires_grad:
        idx = np.argmax(x.data, axis=axis)

        def _bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            buf = np.zeros_like(x.data)
            np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis=axis)
            x._accum(buf)
        out._backward = _bw
    return out


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _node(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: x._accum(g.reshape(x.data.shape))
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    out = _node(np.transpose(x.data, axes), (x,), "transpose")
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: x._accum(np.transpose(g, inv))
    return out


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    out = _node(np.concatenate([t.data for t in ts], axis=axis), ts, "concat")
    if out.requires_grad:
        splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

        def _bw(g):
            for t, piece in zip(ts, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accum(piece)
        out._backward = _bw
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = _node(x.data[index], (x,), "narrow")
    if out.requires_grad:
        def _bw(g):
            buf = np.zeros_like(x.data)
            buf[index] = g
            x._accum(buf)
        out._backward = _bw
    return out
