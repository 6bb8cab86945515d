"""Minimal N-dimensional tensor engine with tape-based reverse-mode autodiff.

Tensors wrap immutable numpy arrays. When a :class:`GradTape` is active, every
primitive op whose inputs require gradients is appended to the tape together
with a vector-Jacobian product closure; :meth:`GradTape.backward` then walks
the records in exact reverse order.

Broadcasting is deliberately narrow: the smaller operand's shape must be a
trailing suffix of the larger one (a scalar is the empty suffix). This covers
per-channel vectors against NHWC batches and per-position masks against
batches, and nothing else.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_local = threading.local()
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 by default, float32 opt-in)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An immutable real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item (tensor must hold one value)", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return transpose(self, axes)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name."""

    __slots__ = ()

    def __init__(self, data, name: str = "param", requires_grad: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad, name)

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, value) -> None:
        """Replace the parameter value (optimizer updates only); shape must not change."""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError("assign", self.data.shape, value.shape)
        self.data = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class GradTape:
    """Records primitive ops for a single reverse sweep.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are recorded. The tape is single-owner and is
    cleared by :meth:`backward`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reached leaf.

        Parameters in ``params`` that the loss does not depend on receive an
        exact zero gradient. Returns the gradients of ``params`` in order.
        """
        if loss.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape, ())
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            owners.pop(id(out), None)
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        self.records = []
        for key, g in grads.items():
            leaf = owners[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        out = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    return tape.backward(loss, params)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out.name = None
    if track:
        tape.record(out, inputs, vjp)
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b or not b:
        return a
    if not a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _binary(op, a, b, fn, vjp_fn):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(op, a.shape, b.shape)
    data = fn(a.data, b.data)

    def vjp(g):
        ga, gb = vjp_fn(g, a.data, b.data, data)
        return (
            _unbroadcast(ga, a.shape) if a.requires_grad else None,
            _unbroadcast(gb, b.shape) if b.requires_grad else None,
        )

    return _emit(data, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, z: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, z: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, z: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide, lambda g, x, y, z: (g / y, -g * z / y))


def _unary(a, data, grad_fn) -> Tensor:
    a = as_tensor(a)
    return _emit(data, (a,), lambda g: (grad_fn(g),))


def neg(a) -> Tensor:
    return _unary(a, -as_tensor(a).data, lambda g: -g)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _unary(a, y, lambda g: g * y)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min()!r})")
    x = a.data
    return _unary(a, np.log(x), lambda g: g / x)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _unary(a, y, lambda g: g * (1.0 - y * y))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _unary(a, np.maximum(a.data, 0), lambda g: g * on)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt of negative value (min {a.data.min()!r})")
    y = np.sqrt(a.data)
    return _unary(a, y, lambda g: g * 0.5 / y)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _unary(a, x * x, lambda g: 2.0 * x * g)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "exp": exp, "log": log, "tanh": tanh,
    "relu": relu, "sqrt": sqrt, "square": square,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``exp``, ``mul``, ...)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a) if b is None else fn(a, b)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return _emit(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit(data, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def take_last(a, start: int, stop: int) -> Tensor:
    """Slice ``[..., start:stop]`` along the last axis."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit(a.data[..., start:stop], (a,), vjp)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, h, w, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, kh * kw * c)


def _correlate_taps(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw, _, co = k.shape
    n, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((n, h, w, co), dtype=np.result_type(x, k))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + h, j:j + w, :] @ k[i, j]
    return out


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1, zero "same"-padded cross-correlation over NHWC (or HWC) input.

    ``kernel`` has layout (kh, kw, c_in, c_out) with odd spatial extents.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeError("conv2d kernel", kernel.shape)
    kh, kw, ci, co = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d (kernel extent must be odd)", kernel.shape)
    squeeze_batch = x.ndim == 3
    if x.ndim not in (3, 4) or x.shape[-1] != ci:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    xd = x.data[None] if squeeze_batch else x.data
    n, h, w, _ = xd.shape
    kd = kernel.data
    if kh == kw == 1:
        cols = xd.reshape(n * h * w, ci)
        out = (cols @ kd[0, 0]).reshape(n, h, w, co)
    elif ci < 8:
        cols = _im2col(xd, kh, kw)
        out = (cols @ kd.reshape(-1, co)).reshape(n, h, w, co)
    else:
        cols = None
        out = _correlate_taps(xd, kd)
    if squeeze_batch:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze_batch else g
        gx = gk = None
        if x.requires_grad:
            flipped = kd[::-1, ::-1].transpose(0, 1, 3, 2)
            if kh == kw == 1:
                gx = gd @ flipped[0, 0]
            else:
                gx = _correlate_taps(gd, flipped)
            if squeeze_batch:
                gx = gx[0]
        if kernel.requires_grad:
            c = cols if cols is not None else _im2col(xd, kh, kw)
            gk = (c.T @ gd.reshape(-1, co)).reshape(kh, kw, ci, co)
        return gx, gk

    y = _emit(out, (x, kernel), vjp)
    if bias is not None:
        y = add(y, bias)
    return y
