"""Dense N-D tensors with reverse-mode automatic differentiation.

The tape is implicit: every op that sees a gradient-requiring input
records a closure that maps the output gradient to input gradients.
``backward`` on a scalar walks the recorded graph once, in reverse
topological order, and accumulates into leaf ``grad`` buffers.

Values are float32 by default; float64 is supported so that gradient
checks can run at a precision where central differences are meaningful.
"""

from __future__ import annotations

import numpy as np


class TensorError(ValueError):
    """Base class for tensor-level failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible; message names the offending dim."""


class NonFiniteError(TensorError):
    """A NaN or Inf was produced or fed where finite values are required."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional gradient buffer and tape node.

    ``data`` is always a float32 or float64 ndarray. ``grad`` is lazily
    allocated, same shape and dtype as ``data``, and accumulates across
    backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self):
        """Populate ``grad`` of every reachable gradient-requiring leaf.

        Only valid on scalars. Grads accumulate; the caller zeroes
        between optimization steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data):
            raise NonFiniteError("backward() called on a non-finite loss")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        # transient gradient accumulators, keyed by node identity
        acc: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None:
                        continue
                    prev = acc.get(id(parent))
                    if prev is None:
                        acc[id(parent)] = pg
                    else:
                        # out-of-place: a vjp may hand the *same* array to
                        # several parents, so in-place accumulation would
                        # corrupt sibling accumulators through aliasing
                        acc[id(parent)] = prev + pg
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_graph(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad or t._vjp is not None for t in tensors)


def _make(data, parents, vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        return Tensor(data, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data, dtype=data.dtype)


def require_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        for i, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeError(f"{opname}: dim {i} mismatch ({da} vs {db})")
        raise ShapeError(f"{opname}: rank mismatch ({a.shape} vs {b.shape})")


def check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


# -- elementwise primitives --------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.size == 1 and a.size != 1:
        out = a.data + b.data.reshape(())

        def vjp(g):
            return g, np.array(g.sum(), dtype=g.dtype).reshape(b.shape)

        return _make(out, (a, b), vjp)
    require_same_shape(a, b, "add")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    require_same_shape(a, b, "mul")
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    require_same_shape(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _make(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.dtype)
    return _make(out, (a,), lambda g: (g * np.asarray(s, dtype=g.dtype),))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is defined as 0
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return _make(out, (a,), lambda g: (np.where(mask, g, 0).astype(g.dtype),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def pointwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: relu | sigmoid | add | scale."""
    if kind == "relu":
        return relu(*operands)
    if kind == "sigmoid":
        return sigmoid(*operands)
    if kind == "add":
        return add(*operands)
    if kind == "scale":
        return scale(*operands)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# -- reductions & views ------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g).reshape(()), a.shape).astype(g.dtype).copy(),)
        gexp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gexp, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _make(np.ascontiguousarray(out), (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    parts = list(tensors)
    out = np.concatenate([t.data for t in parts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def pad_channels(a: Tensor, out_channels: int) -> Tensor:
    """Zero-pad axis 1 up to ``out_channels`` (parameter-free skip lift)."""
    c = a.shape[1]
    if out_channels < c:
        raise ShapeError(f"pad_channels: cannot shrink {c} -> {out_channels}")
    if out_channels == c:
        return a
    width = [(0, 0)] * a.data.ndim
    width[1] = (0, out_channels - c)
    out = np.pad(a.data, width)

    def vjp(g):
        return (np.ascontiguousarray(g[:, :c]),)

    return _make(out, (a,), vjp)


def softmax_channels(a: Tensor) -> Tensor:
    """Numerically stable softmax over axis 1."""
    x = a.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), vjp)
