"""Minimal N-dimensional tensor with reverse-mode differentiation.

A ``Tensor`` wraps a contiguous numpy float array (float32 for training,
float64 for gradient checking) and records the operations applied to it.
Each operation attaches a backward closure to its output; ``backward()`` on a
scalar loss walks the recorded graph once in reverse topological order and
accumulates gradients into every ``requires_grad`` tensor it reaches.

Layout convention is row-major NCHW throughout the package.
"""

from __future__ import annotations

import contextlib

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf, which is an error state."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation (non-scalar loss, double backward)."""


_finite_checks = True


@contextlib.contextmanager
def no_finite_checks():
    """Disable per-op NaN/Inf scanning inside the block (hot training loops).

    Callers that disable the scan are responsible for checking the final loss
    value themselves.
    """
    global _finite_checks
    prev = _finite_checks
    _finite_checks = False
    try:
        yield
    finally:
        _finite_checks = prev


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not (isinstance(data, np.ndarray) and arr.dtype in _FLOAT_DTYPES):
        # Lists/scalars and non-float arrays land on the training dtype;
        # float numpy arrays keep their precision (e.g. float64 checking).
        arr = arr.astype(DEFAULT_DTYPE)
    # Keep 0-d shapes intact (ascontiguousarray would promote them to 1-d).
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: "Tensor", g: np.ndarray) -> None:
    # Accumulate, never overwrite: two backward passes from independent
    # losses must sum their gradients.
    t.grad = g if t.grad is None else t.grad + g


class Tensor:
    """Numpy-backed tensor with an optional gradient slot.

    Attributes:
        data: contiguous numpy array (float32 or float64).
        grad: same-shape numpy array once backward has reached this tensor.
        requires_grad: whether gradients should flow into this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        if _finite_checks and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor created with non-finite values")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        if _finite_checks and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._consumed = False
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
            out._op = op
        else:
            out._parents = ()
            out._backward_fn = None
            out._op = op
        return out

    # -- basic protocol ------------------------------------------------------

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
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise GraphError(f"item: tensor has {self.data.size} elements, expected 1")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor holds non-finite values")
        return self

    # -- reverse sweep ---------------------------------------------------------

    def backward(self) -> None:
        """Run one reverse sweep from this scalar, accumulating into ``grad``.

        The recorded graph is consumed: closures are dropped so activation
        memory is released, and a second call raises ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {self.data.shape}")
        if self._consumed:
            raise GraphError("backward: computation record already consumed")
        if not self.requires_grad:
            self._consumed = True
            return

        # Iterative post-order: each op's inputs precede it in `topo`.
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
            node._consumed = True
            node._backward_fn = None
            node._parents = ()

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic ----------------------------------------------

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ShapeError(f"mixed dtypes {self.dtype} vs {other.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), requires_grad=False)

    def _check_broadcast(self, other: "Tensor", op: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {self.shape} vs {other.shape} do not broadcast") from None

    def __add__(self, other):
        other = self._wrap(other)
        self._check_broadcast(other, "add")
        a, b = self, other

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), backward_fn, "add")

    __radd__ = __add__

    def __mul__(self, other):
        other = self._wrap(other)
        self._check_broadcast(other, "multiply")
        a, b = self, other

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), backward_fn, "multiply")

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, -g)

        return Tensor._result(-a.data, (a,), backward_fn, "negate")

    def __sub__(self, other):
        other = self._wrap(other)
        self._check_broadcast(other, "subtract")
        a, b = self, other

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g, b.shape))

        return Tensor._result(a.data - b.data, (a, b), backward_fn, "subtract")

    def __rsub__(self, other):
        return self._wrap(other).__sub__(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeError("divide: tensor/tensor division is not a registered primitive")
        return self * (1.0 / float(scalar))

    def __pow__(self, exponent):
        """Elementwise power with a constant exponent."""
        c = float(exponent)
        a = self

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g * c * a.data ** (c - 1.0))

        return Tensor._result(a.data ** c, (a,), backward_fn, "power")

    def __matmul__(self, other):
        other = self._wrap(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape} do not conform (2D only)")

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)

        return Tensor._result(a.data @ b.data, (a, b), backward_fn, "matmul")

    # -- elementwise nonlinearities --------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g * mask)

        return Tensor._result(np.where(mask, a.data, 0), (a,), backward_fn, "relu")

    def sigmoid(self):
        a = self
        z = np.exp(-np.abs(a.data))
        out = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g * out * (1.0 - out))

        return Tensor._result(out, (a,), backward_fn, "sigmoid")

    def exp(self):
        a = self
        out = np.exp(a.data)

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g * out)

        return Tensor._result(out, (a,), backward_fn, "exp")

    def log(self):
        a = self

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g / a.data)

        return Tensor._result(np.log(a.data), (a,), backward_fn, "log")

    # -- reductions and reshaping -----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward_fn(g):
            if not a.requires_grad:
                return
            if axis is None:
                _accum(a, np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape).copy())

        return Tensor._result(np.asarray(out), (a,), backward_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g.reshape(old))

        return Tensor._result(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward_fn, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, np.ascontiguousarray(g.transpose(inverse)))

        return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward_fn, "transpose")
