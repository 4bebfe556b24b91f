"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation goes
through :func:`record`, which attaches a graph node holding the parents and a
closure computing the parents' gradients from the output gradient. Calling
:meth:`Tensor.backward` on a one-element tensor walks the recorded nodes in
reverse creation order (a valid reverse topological order, since a node is
always created after its inputs) and consumes the graph.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_ORDER = itertools.count()


class GraphError(RuntimeError):
    """Raised for invalid backward passes (non-scalar loss, reused graph)."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    float32 is the working precision. float64 is used by the finite
    difference checks, where float32 round-off would swamp the signal.
    """
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    of the same shape. Intermediate tensors only keep a gradient when
    :meth:`retain_grad` was called before ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_order", "_retain", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Optional[Node] = None
        self._order = next(_ORDER)
        self._retain = False
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, node: Optional[Node]) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = node is not None
        t.grad = None
        t._node = node
        t._order = next(_ORDER)
        t._retain = False
        t.name = None
        return t

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None)

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a one-element loss, got shape {self.shape}")
        seed = np.ones_like(self.data)
        if self._node is None:
            if self.requires_grad:
                self.grad += seed
            return
        if self._node.consumed:
            raise GraphError("graph already consumed; run a new forward pass first")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._node.parents)
        nodes.sort(key=lambda t: t._order, reverse=True)

        grads = {id(self): seed}
        for t in nodes:
            node = t._node
            if node.consumed:
                raise GraphError("graph already consumed; run a new forward pass first")
            g = grads.pop(id(t), None)
            fn = node.backward_fn
            node.consumed = True
            node.backward_fn = None
            if g is None:
                continue
            if t._retain:
                t.grad = g.copy()
            parent_grads = fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(f"{node.op}: gradient shape {pg.shape} != {p.shape}")
                if p._node is None:
                    p.grad += pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, attaching a graph node when any parent needs grad.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor._wrap(data, Node(op, parents, backward_fn))
    return Tensor._wrap(data, None)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "sub")
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, clipped so results stay strictly inside (0, 1)."""
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    info = np.finfo(x.dtype)
    s = np.clip(s, info.tiny, 1.0 - info.epsneg)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def elementwise(op_tag: str, a, b=None, c: Optional[float] = None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid, neg, scale."""
    if op_tag == "add":
        return add(a, b)
    if op_tag == "sub":
        return sub(a, b)
    if op_tag == "mul":
        return mul(a, b)
    if op_tag == "relu":
        return relu(a)
    if op_tag == "sigmoid":
        return sigmoid(a)
    if op_tag == "neg":
        return neg(a)
    if op_tag == "scale":
        return scale(a, c)
    raise ValueError(f"unknown elementwise op {op_tag!r}")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    inv = a.dtype.type(1.0 / count)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, a.shape).copy(),)

    return record("mean", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return record("stack", np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis``, dropping that axis."""

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return record("select", np.ascontiguousarray(np.take(a.data, index, axis=axis)), (a,), backward)


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` as for :func:`numpy.pad`."""
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return record("pad", np.pad(a.data, widths), (a,), lambda g: (np.ascontiguousarray(g[sl]),))


def crop(a: Tensor, slices) -> Tensor:
    slices = tuple(slices)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[slices] = g
        return (full,)

    return record("crop", np.ascontiguousarray(a.data[slices]), (a,), backward)
