"""N-dimensional tensors with reverse-mode automatic differentiation.

Every forward op that sees a `requires_grad` input records its parents and a
backward closure on the output tensor; `Tensor.backward()` topologically sorts
the recorded graph and runs the closures in reverse. Data lives in numpy
buffers, float32 for training and float64 for gradient checking (precision is
a per-tensor property). Layout convention for 4-D tensors is
(batch, channels, height, width), row-major.
"""

from __future__ import annotations

import numpy as np

from .errors import AutodiffError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Numeric array plus optional gradient buffer and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data, parents, backward_fn, op):
        """Wrap an op result, recording parents only if grads are needed."""
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
            out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def is_leaf(self):
        return not self._parents

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, op={self._op})"

    # -- backward engine ------------------------------------------------------

    def backward(self):
        """Populate .grad on every tensor reachable from this scalar loss.

        Raises if the loss is not scalar, if this graph was already walked,
        or if any leaf still carries a gradient from a previous backward
        (gradients must be explicitly zeroed between passes).
        """
        if self.data.size != 1:
            raise AutodiffError(
                f"backward requires a scalar, got shape {tuple(self.shape)}")
        if self._consumed:
            raise AutodiffError(
                "backward already ran on this graph; build a new forward pass")
        if not self.requires_grad:
            raise AutodiffError("loss does not require grad; nothing to do")

        order = self._topo_order()
        for t in order:
            if t.grad is not None:
                raise AutodiffError(
                    "stale gradient found on a tensor in the graph; "
                    "call zero_grad on parameters before the next backward")

        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward_fn is not None:
                t._backward_fn(t.grad)
        self._consumed = True

    def _topo_order(self):
        # iterative DFS; every node's parents precede it in the result
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    # -- arithmetic (same-shape tensors or python scalars) --------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(
                    f"operand shapes differ: {self.shape} vs {other.shape}")
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data

        def bwd(g):
            _accumulate(self, _unbroadcast(g, self.shape))
            _accumulate(other, _unbroadcast(g, other.shape))

        return Tensor.from_op(out_data, (self, other), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            _accumulate(self, -g)

        return Tensor.from_op(-self.data, (self,), bwd, "neg")

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data

        def bwd(g):
            _accumulate(self, _unbroadcast(g, self.shape))
            _accumulate(other, _unbroadcast(-g, other.shape))

        return Tensor.from_op(out_data, (self, other), bwd, "sub")

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data

        def bwd(g):
            _accumulate(self, _unbroadcast(g * other.data, self.shape))
            _accumulate(other, _unbroadcast(g * self.data, other.shape))

        return Tensor.from_op(out_data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data

        def bwd(g):
            _accumulate(self, _unbroadcast(g / other.data, self.shape))
            _accumulate(other,
                        _unbroadcast(-g * self.data / other.data ** 2, other.shape))

        return Tensor.from_op(out_data, (self, other), bwd, "div")

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def sum(self):
        def bwd(g):
            _accumulate(self, np.full_like(self.data, g))

        return Tensor.from_op(self.data.sum(), (self,), bwd, "sum")

    def mean(self):
        n = self.data.size

        def bwd(g):
            _accumulate(self, np.full_like(self.data, g / n))

        return Tensor.from_op(self.data.mean(), (self,), bwd, "mean")

    def pick(self, index):
        """Select a single element as a scalar tensor (e.g. one logit)."""
        val = self.data[index]
        if np.ndim(val) != 0:
            raise ShapeError(f"pick index {index} does not select a scalar")

        def bwd(g):
            full = np.zeros_like(self.data)
            full[index] = g
            _accumulate(self, full)

        return Tensor.from_op(val, (self,), bwd, "pick")


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    # reduce a gradient back to `shape` after scalar broadcasting
    if g.shape == tuple(shape):
        return g
    return np.sum(g) * np.ones(shape, dtype=g.dtype) if shape == () or np.prod(shape) == 1 \
        else g  # same-shape ops only; scalars are the lone broadcast case


def zero_grads(tensors):
    """Clear gradients on an iterable of tensors."""
    for t in tensors:
        t.grad = None


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def bwd(g):
        _accumulate(x, g * mask)

    return Tensor.from_op(out_data, (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid exp overflow on large negative inputs
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return Tensor.from_op(out_data, (x,), bwd, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    d = x.data
    out_data = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def bwd(g):
        sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                       np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        _accumulate(x, g * sig)

    return Tensor.from_op(out_data, (x,), bwd, "softplus")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last dimension."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        # dx = (g - sum(g*p)) * p  per row
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - dot) * out_data)

    return Tensor.from_op(out_data, (x,), bwd, "softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    """Dispatch by name: relu, sigmoid, or softmax_lastdim."""
    try:
        fn = {"relu": relu, "sigmoid": sigmoid,
              "softmax_lastdim": softmax_lastdim}[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind: {kind!r}") from None
    return fn(x)
