"""Dense float tensors with a reverse-mode tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  Creation order is
recorded through a global counter, so reverse creation order is a valid
reverse topological order for :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "precision",
    "default_dtype",
    "tensor",
    "matmul",
    "softmax_rows",
    "add",
    "sub",
    "mul",
    "relu",
    "elu",
    "l1",
    "sum_all",
    "reshape",
    "transpose",
    "crop",
    "elementwise",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_DTYPE = np.dtype(np.float32)
_DEBUG = os.environ.get("SADUNET_DEBUG", "") not in ("", "0")
_ids = itertools.count()


def default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.name = name
        if _DEBUG and _parents and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values produced by a forward op")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return crop(self, index)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), back)


def softmax_rows(s: Tensor) -> Tensor:
    if s.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {s.shape}")
    z = s.data - s.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (s,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc

    def back(g):
        return (g.reshape(src),)

    return _make(out, (x,), back)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")

    def back(g):
        return (np.ascontiguousarray(g.T),)

    return _make(x.data.T, (x,), back)


def crop(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing; the gradient scatters back into zeros."""
    out = x.data[index]
    if out.base is None and not np.shares_memory(out, x.data):
        raise ContractError("crop supports basic slicing only")
    src = x.shape
    dtype = x.data.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape or b.data.size == 1 and b.ndim <= a.ndim or a.data.size == 1 and a.ndim <= b.ndim:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    A, B = a.data, b.data

    def back(g):
        return _reduce_to(g * B, A.shape), _reduce_to(g * A, B.shape)

    return _make(A * B, (a, b), back)


def relu(x: Tensor) -> Tensor:
    # subgradient 1 at exactly zero
    mask = x.data >= 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def back(g):
        return (g * mask,)

    return _make(out, (x,), back)


def elu(x: Tensor) -> Tensor:
    X = x.data
    neg = X < 0
    ex = np.exp(np.minimum(X, 0))
    out = np.where(neg, ex - 1, X).astype(X.dtype)

    def back(g):
        return (np.where(neg, g * ex, g).astype(g.dtype),)

    return _make(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        return (np.full(shape, g.reshape(-1)[0], dtype=dtype),)

    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), back)


def l1(x: Tensor) -> Tensor:
    """Sum of absolute values, reduced to a 0-d tensor."""
    X = x.data
    sign = np.sign(X)

    def back(g):
        return (sign * g.reshape(-1)[0],)

    return _make(np.asarray(np.abs(X).sum(), dtype=X.dtype), (x,), back)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "elu": elu,
    "l1": l1,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reverse sweep


def _reachable(root: Tensor) -> list[Tensor]:
    seen, stack, nodes = set(), [root], []
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Existing grads on those leaves are cleared first, so calling twice yields
    the same result rather than accumulating.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    nodes = _reachable(loss)
    for node in nodes:
        if node.is_leaf:
            node.grad = np.zeros_like(node.data)
    grads = {loss._id: np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def grad_check(f: Callable[..., Tensor], x: Tensor | Iterable[Tensor], h: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``x`` may be one tensor or a list; ``f`` is called with the same arity.
    ``coords`` limits the check to a random subset of coordinates per tensor,
    which keeps whole-model checks affordable.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if any(t.data.dtype != np.float64 for t in xs):
        raise ContractError("grad_check requires 64-bit tensors")
    for t in xs:
        t.requires_grad = True
    out = f(*xs)
    backward(out)
    analytic = [t.grad.copy() for t in xs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(xs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs).item()
            flat[i] = orig - h
            fm = f(*xs).item()
            flat[i] = orig
            cd = (fp - fm) / (2 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
