"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray (float32 or float64) and records the operations
that produced it.  Calling backward() on a scalar walks the tape in reverse
topological order and accumulates gradients into every tensor created with
requires_grad=True.  Training code runs in float32; oracle and finite
difference code can run the same graph in float64 because every op keeps
the dtype of its inputs.
"""
from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite contains NaN or Inf."""


_grad_stack = [True]


def grad_enabled() -> bool:
    return _grad_stack[-1]


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        _grad_stack.append(False)
        return self

    def __exit__(self, *exc):
        _grad_stack.pop()
        return False


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    # ---- bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains NaN or Inf")
        return self

    # ---- graph construction ------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents, bwd) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._bwd is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._bwd(node.grad)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg

    # ---- arithmetic --------------------------------------------------

    def _other(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if np.isscalar(other):
            return Tensor(np.asarray(other, dtype=self.data.dtype))
        return Tensor(other)

    def __add__(self, other):
        a, b = self, self._other(other)
        data = a.data + b.data
        return Tensor._make(
            data, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        a, b = self, self._other(other)
        data = a.data - b.data
        return Tensor._make(
            data, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))

    def __rsub__(self, other):
        return self._other(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, self._other(other)
        data = a.data * b.data
        return Tensor._make(
            data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.data.shape),
                       _unbroadcast(g * a.data, b.data.shape)))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        a, b = self, self._other(other)
        data = a.data / b.data
        return Tensor._make(
            data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.data.shape),
                       _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    def __rtruediv__(self, other):
        return self._other(other).__truediv__(self)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        a = self
        data = a.data ** p
        return Tensor._make(data, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        a, b = self, self._other(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul requires operands with ndim >= 2")
        data = a.data @ b.data

        def bwd(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            return ga, gb

        return Tensor._make(data, (a, b), bwd)

    # ---- elementwise -------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        return Tensor._make(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * (0.5 / out_data),))

    # ---- reductions --------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            g2 = g
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(x % a.data.ndim for x in axes):
                    g2 = np.expand_dims(g2, ax)
            return (np.broadcast_to(g2, a.data.shape).copy(),)

        return Tensor._make(np.asarray(data), (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- shape ops ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.data.ndim))[::-1]
        inv = tuple(np.argsort(axes))
        a = self
        return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    def astype(self, dtype):
        a = self
        old = a.data.dtype
        return Tensor._make(a.data.astype(dtype), (a,), lambda g: (g.astype(old),))

    def __getitem__(self, key):
        a = self
        data = a.data[key]

        def bwd(g):
            out = np.zeros_like(a.data)
            out[key] += g
            return (out,)

        return Tensor._make(data, (a,), bwd)


# ---- free functions ---------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return Tensor._make(data, ts, bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(data, ts, bwd)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    data = np.where(cond, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0).astype(g.dtype), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g).astype(g.dtype), b.data.shape),
        )

    return Tensor._make(data, (a, b), bwd)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis by integer index (embedding-style lookup)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("take expects integer indices")
    ax = axis % a.data.ndim
    data = np.take(a.data, idx, axis=ax)

    def bwd(g):
        out = np.zeros_like(a.data)
        # np.take inserted idx's dims at position ax; bring them to the front
        g2 = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(np.moveaxis(out, ax, 0), idx, g2)
        return (out,)

    return Tensor._make(data, (a,), bwd)


def take_along_axis(a: Tensor, idx, axis: int) -> Tensor:
    idx = np.asarray(idx)
    ax = axis % a.data.ndim
    data = np.take_along_axis(a.data, idx, axis=ax)

    def bwd(g):
        out = np.zeros_like(a.data)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(out, tuple(grids), g)
        return (out,)

    return Tensor._make(data, (a,), bwd)


_SELU_LAMBDA = 1.0507009873554805
_SELU_ALPHA = 1.6732632423543772


def selu(x: Tensor) -> Tensor:
    """SELU activation: lambda * (x if x > 0 else alpha * (exp(x) - 1))."""
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0.0))
    data = np.where(pos, _SELU_LAMBDA * x.data, _SELU_LAMBDA * _SELU_ALPHA * (ex - 1.0))

    def bwd(g):
        d = np.where(pos, _SELU_LAMBDA, _SELU_LAMBDA * _SELU_ALPHA * ex)
        return ((g * d).astype(g.dtype, copy=False),)

    return Tensor._make(data.astype(x.data.dtype, copy=False), (x,), bwd)


def logsigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""
    z = x.data
    e = np.exp(-np.abs(z))
    data = np.where(z >= 0, -np.log1p(e), z - np.log1p(e))

    def bwd(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        sig = np.where(z >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
        return ((g * sig).astype(g.dtype, copy=False),)

    return Tensor._make(data.astype(z.dtype, copy=False), (x,), bwd)
