"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive records its parents and a backward closure on the output
tensor. Calling :func:`backward` on a scalar loss builds a
:class:`ComputationTape` (the reachable nodes in topological order) and
replays it in reverse, accumulating gradients into leaf tensors.

Shapes never broadcast implicitly. The only exception is an operand that
is a Python scalar or a 0-d tensor. Layer code that needs to combine a
weight with batched activations uses the explicit primitives
(:func:`linear`, :func:`add_bias`, :func:`outer_add`, :func:`bmm`).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "DimensionError",
    "RankError",
    "DegenerateMaskError",
    "NonFiniteError",
    "GraphConsumedError",
    "no_grad",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "square",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "shift",
    "matmul",
    "bmm",
    "linear",
    "add_bias",
    "outer_add",
    "softmax_masked",
    "elementwise",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(ValueError):
    """A scalar was required."""


class DegenerateMaskError(ValueError):
    """A softmax row has no admissible entry."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class GraphConsumedError(RuntimeError):
    """Backward was already run through this graph."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "const"
        t._consumed = False
        return t

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
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by Python scalars")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(out: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    # a single NaN/Inf anywhere makes the sum non-finite
    if not np.isfinite(np.sum(out)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    t = Tensor._wrap(out)
    t._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = fn
    return t


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, b)
    if _is_scalar(a):
        return add_scalar(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a, b = b, a
    if b.ndim == 0 and a.ndim > 0:
        return _make(a.data + b.data, (a, b), lambda g: (g, np.sum(g)), "add")
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, -float(b))
    return add(a, neg(_as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a, b = b, a
    if b.ndim == 0 and a.ndim > 0:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, np.sum(g * ad)), "mul")
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise primitive by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------------- shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(y, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (i is Ellipsis or i is None or isinstance(i, (int, np.integer, slice))):
            raise TypeError("only basic indexing (ints, slices, Ellipsis) is differentiable")
    shape = a.shape
    y = np.array(a.data[index])

    def fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(y, (a,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    arrs = [t.data for t in tensors]
    try:
        y = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum([x.shape[axis] for x in arrs])[:-1]
    return _make(y, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def shift(a: Tensor, steps: int, axis: int) -> Tensor:
    """Delay ``a`` by ``steps`` along ``axis``; vacated leading slots are zero."""
    if steps < 0:
        raise ValueError("shift only delays (steps >= 0)")
    if steps == 0:
        return a
    n = a.shape[axis]
    y = np.zeros_like(a.data)
    if steps < n:
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        src[axis] = slice(0, n - steps)
        dst[axis] = slice(steps, n)
        y[tuple(dst)] = a.data[tuple(src)]

    def fn(g):
        out = np.zeros_like(g)
        if steps < n:
            out[tuple(src)] = g[tuple(dst)]
        return (out,)

    return _make(y, (a,), fn, "shift")


# ------------------------------------------------------------------ products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dimensions: ``[..., m, k] x [..., k, n]``."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g), "bmm")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``x`` with a weight matrix ``w[k, n]``."""
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    k, n = wd.shape
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, k)  # one GEMM instead of a stack of small ones

    def fn(g):
        g2 = g.reshape(-1, n)
        return (g2 @ wd.T).reshape(lead + (k,)), x2.T @ g2

    return _make((x2 @ wd).reshape(lead + (n,)), (x, w), fn, "linear")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b[n]`` along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: input {x.shape} incompatible with bias {b.shape}")
    n = b.shape[0]
    return _make(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


def outer_add(u: Tensor, v: Tensor) -> Tensor:
    """``out[..., i, j] = u[..., i] + v[..., j]`` for identical leading dims."""
    if u.ndim < 1 or u.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"outer_add: {u.shape} vs {v.shape}")
    y = u.data[..., :, None] + v.data[..., None, :]
    return _make(y, (u, v), lambda g: (g.sum(axis=-1), g.sum(axis=-2)), "outer_add")


# ------------------------------------------------------------------ softmax


def softmax_masked(scores: Tensor, mask, allow_empty_rows: bool = False) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries are excluded before exponentiation and come out as exact
    zeros. ``mask`` is a constant boolean array broadcastable to ``scores``.
    A row without any admissible entry raises unless ``allow_empty_rows``,
    in which case that row is all zeros.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    has_any = mask.any(axis=-1, keepdims=True)
    if not allow_empty_rows and not has_any.all():
        raise DegenerateMaskError("softmax_masked: a row has no unmasked entry")
    s = np.where(mask, scores.data, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    m = np.where(has_any, m, 0.0)
    ex = np.where(mask, np.exp(s - m), 0.0)
    denom = ex.sum(axis=-1, keepdims=True)
    y = np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (scores,), fn, "softmax_masked")


# ----------------------------------------------------------------- backward


class ComputationTape:
    """Nodes reachable from ``loss`` in topological order (parents first)."""

    def __init__(self, loss: Tensor):
        if loss.data.size != 1 or loss.ndim != 0:
            raise RankError(f"backward needs a 0-d scalar loss, got shape {loss.shape}")
        self.loss = loss
        self.nodes = self._toposort(loss)
        if loss._consumed:
            raise GraphConsumedError("backward already ran through this graph; run a fresh forward pass")
        if loss._backward is None:
            raise RuntimeError("empty tape: loss does not depend on any tensor requiring grad")

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise GraphConsumedError("backward already ran through this graph; run a fresh forward pass")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones(())}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            fn = node._backward
            if fn is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for p, pg in zip(node._parents, fn(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
            node._backward = None
            node._parents = ()
            node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on (additively)."""
    ComputationTape(loss).backward()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
