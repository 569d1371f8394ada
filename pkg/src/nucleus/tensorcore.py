"""Dense arrays with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every primitive records its parents and a
backward rule; ``backward`` replays those rules in reverse topological order.
Arrays are 32-bit by default; ``default_dtype`` switches the working precision
(used by the gradient checks, which need 64-bit finite differences).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "GradCheckError",
    "GradCheckReport",
    "as_tensor",
    "backward",
    "concat",
    "default_dtype",
    "gelu",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "max_with_argmax",
    "maximum",
    "minimum",
    "no_grad",
    "scatter_add",
    "softmax",
    "stack",
    "take",
    "where",
    "zero_grads",
]


class TensorError(Exception):
    """Base class for substrate errors."""


class ShapeError(TensorError):
    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class NonFiniteError(TensorError):
    def __init__(self, primitive: str, shape):
        self.primitive = primitive
        self.shape = tuple(shape)
        super().__init__(f"{primitive}: non-finite values in output of shape {self.shape}")


class BackwardError(TensorError):
    pass


class GradCheckError(TensorError):
    pass


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: int = -1, keepdims: bool = False):
        return max_with_argmax(self, axis, keepdims)[0]

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes or None)

    permute = transpose

    @property
    def T(self):
        return permute(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)

    def softmax(self, axis: int = -1, mask=None):
        return softmax(self, axis, mask)

    def gelu(self):
        return gelu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    return x


def _needs_grad(*xs) -> bool:
    return _GRAD_ENABLED and any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _result(op: str, data: np.ndarray, parents: Sequence, backward_fn: Callable | None) -> Tensor:
    data = np.asarray(data)
    if data.dtype != _DEFAULT_DTYPE:
        data = data.astype(_DEFAULT_DTYPE)
    if not np.isfinite(data).all():
        raise NonFiniteError(op, data.shape)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if backward_fn is not None and _needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(p if isinstance(p, Tensor) else None for p in parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _shape_of(x):
    return np.shape(_data(x))


def _binary(op: str, a, b, fn):
    try:
        return fn(_data(a), _data(b))
    except ValueError as exc:
        raise ShapeError(op, _shape_of(a), _shape_of(b)) from exc


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    out = _binary("add", a, b, np.add)
    sa, sb = _shape_of(a), _shape_of(b)
    return _result("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    out = _binary("subtract", a, b, np.subtract)
    sa, sb = _shape_of(a), _shape_of(b)
    return _result("subtract", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = _binary("multiply", a, b, np.multiply)
    sa, sb = np.shape(da), np.shape(db)
    return _result(
        "multiply", out, (a, b),
        lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)),
    )


def div(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = _binary("divide", a, b, np.divide)
    sa, sb = np.shape(da), np.shape(db)
    return _result(
        "divide", out, (a, b),
        lambda g: (_unbroadcast(g / db, sa), _unbroadcast(-g * out / db, sb)),
    )


def neg(a) -> Tensor:
    return _result("negate", -_data(a), (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    da = _data(a)
    out = da ** exponent
    return _result("power", out, (a,), lambda g: (g * exponent * da ** (exponent - 1),))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    da = _data(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(da)
    return _result("log", out, (a,), lambda g: (g / da,))


def abs_(a) -> Tensor:
    da = _data(a)
    return _result("abs", np.abs(da), (a,), lambda g: (g * np.sign(da),))


def sqrt(a) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(_data(a))
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = _binary("maximum", a, b, np.maximum)
    pick_a = np.broadcast_to(da, out.shape) >= np.broadcast_to(db, out.shape)
    sa, sb = np.shape(da), np.shape(db)
    return _result(
        "maximum", out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def minimum(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = _binary("minimum", a, b, np.minimum)
    pick_a = np.broadcast_to(da, out.shape) <= np.broadcast_to(db, out.shape)
    sa, sb = np.shape(da), np.shape(db)
    return _result(
        "minimum", out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    out = _binary("where", a, b, lambda x, y: np.where(cond, x, y))
    sa, sb = _shape_of(a), _shape_of(b)
    return _result(
        "where", out, (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh form."""
    x = _data(a)
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result("gelu", out, (a,), bw)


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError("matmul", da.shape, db.shape)
    out = _binary("matmul", a, b, np.matmul)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(db, -1, -2), da.shape)
        if db.ndim == 2:
            # shared weight matrix: fold all leading axes into one product
            gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(da, -1, -2) @ g, db.shape)
        return ga, gb

    return _result("matmul", out, (a, b), bw)


def reshape(a, shape) -> Tensor:
    da = _data(a)
    try:
        out = da.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", da.shape, tuple(shape)) from exc
    return _result("reshape", out, (a,), lambda g: (g.reshape(da.shape),))


def permute(a, axes=None) -> Tensor:
    da = _data(a)
    if axes is None:
        axes = tuple(reversed(range(da.ndim)))
    if sorted(axes) != list(range(da.ndim)):
        raise ShapeError("permute", da.shape, tuple(axes))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(da, axes))
    return _result("permute", out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    da = _data(a)
    try:
        out = da[index]
    except IndexError as exc:
        raise ShapeError("getitem", da.shape, np.shape(index)) from exc
    out = np.array(out, copy=True)
    items = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)
    rows = len(items) == 1 and isinstance(items[0], np.ndarray) and items[0].dtype.kind in "iu" \
        and items[0].ndim == 1

    def bw(g):
        full = np.zeros(da.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        elif rows:
            return (_index_add(da.shape[0], items[0] % da.shape[0], g),)
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result("getitem", out, (a,), bw)


def _index_add(n: int, indices: np.ndarray, src: np.ndarray) -> np.ndarray:
    """Rows of ``src`` summed into ``n`` slots: out[indices[j]] += src[j] (leading axes)."""
    flat = indices.ravel()
    m = flat.size
    rest = src.shape[indices.ndim:]
    s = sparse.csr_matrix((np.ones(m, dtype=src.dtype), (flat, np.arange(m))), shape=(n, m))
    return np.asarray(s @ src.reshape(m, -1)).reshape((n,) + rest)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    da = _data(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % da.ndim
    if indices.size and (indices.min() < 0 or indices.max() >= da.shape[axis]):
        raise ShapeError("gather", da.shape, indices.shape)
    out = np.take(da, indices, axis=axis)

    def bw(g):
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)), tuple(range(indices.ndim)))
        return (np.moveaxis(_index_add(da.shape[axis], indices, gm), 0, axis),)

    return _result("gather", out, (a,), bw)


def scatter_add(shape, indices, src, axis: int = 0) -> Tensor:
    """Zeros of ``shape`` with ``src`` rows added at ``indices`` along ``axis``."""
    ds = _data(src)
    indices = np.asarray(indices, dtype=np.intp)
    shape = tuple(shape)
    axis = axis % len(shape)
    src_m = np.moveaxis(ds, axis, 0) if indices.ndim == 1 else ds
    if src_m.shape[:indices.ndim] != indices.shape or (indices.size and (
            indices.min() < 0 or indices.max() >= shape[axis])):
        raise ShapeError("scatter", shape, ds.shape)
    moved_shape = (shape[axis],) + shape[:axis] + shape[axis + 1:]
    if src_m.shape[indices.ndim:] != moved_shape[1:]:
        raise ShapeError("scatter", shape, ds.shape)
    full = np.moveaxis(_index_add(shape[axis], indices, src_m), 0, axis)

    def bw(g):
        return (np.take(g, indices, axis=axis),)

    return _result("scatter", full, (src,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *[a.shape for a in arrays]) from exc
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _result("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in tensors]
    try:
        out = np.stack(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError("stack", *[a.shape for a in arrays]) from exc
    n = len(arrays)
    return _result(
        "stack", out, tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# -- reductions --------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    out = da.sum(axis=axis, keepdims=keepdims)
    return _result("sum", out, (a,), lambda g: (_expand_reduced(g, da.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    out = da.mean(axis=axis, keepdims=keepdims)
    count = da.size // max(np.asarray(out).size, 1)
    return _result(
        "mean", out, (a,),
        lambda g: (_expand_reduced(g / count, da.shape, axis, keepdims).copy(),),
    )


def max_with_argmax(a, axis: int = -1, keepdims: bool = False):
    """Maximum along ``axis`` and the (first) index attaining it."""
    da = _data(a)
    axis = axis % da.ndim
    idx = np.argmax(da, axis=axis)
    vals = np.take_along_axis(da, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        vals = np.squeeze(vals, axis)

    def bw(g):
        full = np.zeros(da.shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
        return (full,)

    return _result("max", vals, (a,), bw), idx


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction. ``mask`` (broadcastable bool) zeroes entries."""
    x = _data(a)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (a,), bw)


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned scale and shift."""
    x = _data(a)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = _data(weight) if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + _data(bias)
    n = x.shape[-1]

    def bw(g):
        gx = g * w if w is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, w.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, np.shape(_data(bias))))
        return tuple(grads)

    del n
    parents = (a,) + ((weight,) if weight is not None else ()) + ((bias,) if bias is not None else ())
    return _result("layer_norm", out, parents, bw)


# -- backward ------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p is not None and p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is detached from any requires_grad leaf")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.data.dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if parent is None or not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg)


Tensor.backward = lambda self: backward(self)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- verification --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err < tol


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               n_samples: int | None = None, rng=None, fd_dtype=np.float64) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``fn`` at ``x``.

    ``x`` must be a requires_grad leaf that ``fn`` reads (typically a parameter).
    With ``n_samples`` only that many random coordinates are probed.
    The analytic pass runs at the current default precision; the reference
    differences are evaluated in ``fd_dtype`` (float64 by default) so that
    rounding in the reference does not mask or fake errors in the backward
    pass. Pass ``fd_dtype=None`` to difference at the default precision.
    """
    if h <= 0:
        raise GradCheckError("step h must be positive")
    if not x.requires_grad:
        raise GradCheckError("x must require grad")
    saved = x.grad
    x.grad = None
    loss = fn(x)
    again = fn(x)
    if not np.array_equal(loss.data, again.data):
        raise GradCheckError("fn is not deterministic: two forward passes disagree")
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved

    original = x.data
    if fd_dtype is not None:
        x.data = original.astype(fd_dtype)
    flat = x.data.reshape(-1)
    if n_samples is None or n_samples >= flat.size:
        coords = np.arange(flat.size)
    else:
        rng = np.random.default_rng(rng)
        coords = rng.choice(flat.size, size=n_samples, replace=False)
    max_rel = max_abs = 0.0
    ctx = default_dtype(fd_dtype) if fd_dtype is not None else contextlib.nullcontext()
    try:
        with no_grad(), ctx:
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(x).data)
                flat[i] = orig - h
                fm = float(fn(x).data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - num)
                max_abs = max(max_abs, err)
                max_rel = max(max_rel, err / max(abs(a), abs(num), 1e-6))
    finally:
        x.data = original
    return GradCheckReport(max_rel, max_abs, len(coords))
