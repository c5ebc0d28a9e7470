"""Dense float64 tensors that record the primitives applied to them.

Every primitive's backward rule is written with the same primitives, so a
backward pass run with recording enabled is itself differentiable.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import expit

from ..errors import SecondOrderError, ShapeError

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _local.enabled = bool(flag)
    try:
        yield
    finally:
        _local.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """Immutable float64 array plus the node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()  # read-only view; the caller's array stays writable
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    # -- introspection --------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def expand(self, shape):
        return broadcast_to(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Op:
    """A primitive: numpy forward plus a backward written in primitives."""

    name = "op"

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, g: Tensor, inputs: tuple, needs: tuple):
        raise NotImplementedError


def _apply(op: Op, *inputs: Tensor) -> Tensor:
    out = Tensor._wrap(op.forward(*[t.data for t in inputs]))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = (op, inputs)
    return out


def _same_shape(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(name, a.shape, b.shape, detail="only scalar broadcasting is implicit")


# ---------------------------------------------------------------------------
# arithmetic


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g, inputs, needs):
        return g, g


class _Sub(Op):
    name = "subtract"

    def forward(self, a, b):
        return a - b

    def backward(self, g, inputs, needs):
        return g, (scale(g, -1.0) if needs[1] else None)


class _Mul(Op):
    name = "multiply"

    def forward(self, a, b):
        return a * b

    def backward(self, g, inputs, needs):
        a, b = inputs
        return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)


class _Scale(Op):
    name = "scale"

    def __init__(self, c):
        self.c = c

    def forward(self, a):
        return a * self.c

    def backward(self, g, inputs, needs):
        return (scale(g, self.c),)


class _Shift(Op):
    name = "shift"

    def __init__(self, c):
        self.c = c

    def forward(self, a):
        return a + self.c

    def backward(self, g, inputs, needs):
        return (g,)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _apply(_Add(), a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("subtract", a, b)
    return _apply(_Sub(), a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("multiply", a, b)
    return _apply(_Mul(), a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _apply(_Scale(float(c)), as_tensor(a))


def shift(a: Tensor, c: float) -> Tensor:
    return _apply(_Shift(float(c)), as_tensor(a))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        return a @ b

    def backward(self, g, inputs, needs):
        a, b = inputs
        ga = matmul(g, transpose(b)) if needs[0] else None
        gb = matmul(transpose(a), g) if needs[1] else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expects [m,k] @ [k,n]")
    return _apply(_MatMul(), a, b)


class _Transpose(Op):
    name = "transpose"

    def __init__(self, axes):
        self.axes = axes

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, inputs, needs):
        return (transpose(g, tuple(np.argsort(self.axes))),)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return _apply(_Transpose(tuple(axes)), a)


class _Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g, inputs, needs):
        return (reshape(g, inputs[0].shape),)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if -1 not in shape else None
    if n is not None and n != a.size:
        raise ShapeError("reshape", a.shape, shape)
    try:
        np.empty(a.shape).reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _apply(_Reshape(shape), a)


class _Sum(Op):
    name = "sum"

    def __init__(self, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, inputs, needs):
        shape = inputs[0].shape
        if self.axis is None:
            kept = (1,) * len(shape)
        else:
            kept = tuple(1 if i in self.axis else s for i, s in enumerate(shape))
        return (broadcast_to(reshape(g, kept), shape),)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _apply(_Sum(_norm_axis(axis, a.ndim), keepdims), a)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return scale(sum(a, axis=ax, keepdims=keepdims), 1.0 / n)


class _BroadcastTo(Op):
    name = "broadcast_to"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def backward(self, g, inputs, needs):
        src = inputs[0].shape
        axes = tuple(i for i, (s, t) in enumerate(zip(src, self.shape)) if s == 1 and t != 1)
        if not axes:
            return (g,)
        return (sum(g, axis=axes, keepdims=True),)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; operand must already have the target rank."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError("broadcast_to", a.shape, shape, detail="reshape to the target rank first")
    return _apply(_BroadcastTo(shape), a)


class _Index(Op):
    name = "index"

    def __init__(self, key):
        self.key = key

    def forward(self, a):
        return np.array(a[self.key])

    def backward(self, g, inputs, needs):
        return (_apply(_IndexAdjoint(self.key, inputs[0].shape), g),)


class _IndexAdjoint(Op):
    name = "index_adjoint"

    def __init__(self, key, shape):
        self.key = key
        self.shape = shape

    def forward(self, g):
        out = np.zeros(self.shape)
        np.add.at(out, self.key, g)
        return out

    def backward(self, gg, inputs, needs):
        return (index(gg, self.key),)


def index(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    try:
        a.data[key]
    except (IndexError, TypeError) as exc:
        raise ShapeError("index", a.shape, detail=str(exc)) from None
    return _apply(_Index(key), a)


class _Concat(Op):
    name = "concat"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, g, inputs, needs):
        out, start = [], 0
        for t, need in zip(inputs, needs):
            stop = start + t.shape[self.axis]
            if need:
                key = [slice(None)] * g.ndim
                key[self.axis] = slice(start, stop)
                out.append(index(g, tuple(key)))
            else:
                out.append(None)
            start = stop
        return tuple(out)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError("concat", *[u.shape for u in tensors])
    return _apply(_Concat(axis), *tensors)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


class _Unary(Op):
    fn = None

    def forward(self, a):
        return type(self).fn(a)


class _Exp(_Unary):
    name = "exp"
    fn = staticmethod(np.exp)

    def backward(self, g, inputs, needs):
        return (mul(g, exp(inputs[0])),)


class _Log(_Unary):
    name = "log"
    fn = staticmethod(np.log)

    def backward(self, g, inputs, needs):
        return (mul(g, reciprocal(inputs[0])),)


class _Reciprocal(_Unary):
    name = "reciprocal"
    fn = staticmethod(np.reciprocal)

    def backward(self, g, inputs, needs):
        return (mul(g, scale(square(reciprocal(inputs[0])), -1.0)),)


class _Square(_Unary):
    name = "square"
    fn = staticmethod(np.square)

    def backward(self, g, inputs, needs):
        return (mul(g, scale(inputs[0], 2.0)),)


class _Sqrt(_Unary):
    name = "sqrt"
    fn = staticmethod(np.sqrt)

    def backward(self, g, inputs, needs):
        return (mul(g, scale(reciprocal(sqrt(inputs[0])), 0.5)),)


class _Sin(_Unary):
    name = "sin"
    fn = staticmethod(np.sin)

    def backward(self, g, inputs, needs):
        return (mul(g, cos(inputs[0])),)


class _Cos(_Unary):
    name = "cos"
    fn = staticmethod(np.cos)

    def backward(self, g, inputs, needs):
        return (mul(g, scale(sin(inputs[0]), -1.0)),)


class _Tanh(_Unary):
    name = "tanh"
    fn = staticmethod(np.tanh)

    def backward(self, g, inputs, needs):
        return (mul(g, shift(scale(square(tanh(inputs[0])), -1.0), 1.0)),)


class _Sigmoid(_Unary):
    name = "sigmoid"
    fn = staticmethod(expit)

    def backward(self, g, inputs, needs):
        s = sigmoid(inputs[0])
        return (mul(g, mul(s, shift(scale(s, -1.0), 1.0))),)


def _softplus_np(a):
    return np.logaddexp(0.0, a)


class _Softplus(_Unary):
    name = "softplus"
    fn = staticmethod(_softplus_np)

    def backward(self, g, inputs, needs):
        return (mul(g, sigmoid(inputs[0])),)


def _silu_np(a):
    return a * expit(a)


class _SiLU(_Unary):
    name = "silu"
    fn = staticmethod(_silu_np)

    def backward(self, g, inputs, needs):
        x = inputs[0]
        s = sigmoid(x)
        ds = mul(s, shift(scale(s, -1.0), 1.0))
        return (mul(g, add(s, mul(x, ds))),)


def _elu_np(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


class _ELU(_Unary):
    name = "elu"
    fn = staticmethod(_elu_np)

    def backward(self, g, inputs, needs):
        # elu'(x) = 1 for x > 0, elu(x) + 1 otherwise
        x = inputs[0]
        neg = Tensor._wrap((x.data <= 0).astype(np.float64))
        return (mul(g, shift(mul(elu(x), neg), 1.0)),)


class _ReLU(_Unary):
    name = "relu"
    fn = staticmethod(lambda a: np.maximum(a, 0.0))

    def backward(self, g, inputs, needs):
        return (_apply(_ReluGrad(), g, inputs[0]),)


class _ReluGrad(Op):
    name = "relu_backward"

    def forward(self, g, x):
        return g * (x > 0)

    def backward(self, gg, inputs, needs):
        if needs[1]:
            raise SecondOrderError(
                "second-order gradient through a ReLU is zero almost everywhere; "
                "evaluate the network in softplus mode"
            )
        return _apply(_ReluGrad(), gg, inputs[1]), None


class _GuidedReLU(_Unary):
    name = "guided_relu"
    fn = staticmethod(lambda a: np.maximum(a, 0.0))

    def backward(self, g, inputs, needs):
        return (_apply(_GuidedReluGrad(), g, inputs[0]),)


class _GuidedReluGrad(Op):
    """Passes only positive upstream signal through active units."""

    name = "guided_relu_backward"

    def forward(self, g, x):
        return g * ((x > 0) & (g > 0))

    def backward(self, gg, inputs, needs):
        if needs[1]:
            raise SecondOrderError(
                "guided-backprop gradients are not differentiable with respect to the input"
            )
        g, x = inputs
        mask = Tensor._wrap(((x.data > 0) & (g.data > 0)).astype(np.float64))
        return mul(gg, mask), None


def exp(a):
    return _apply(_Exp(), as_tensor(a))


def log(a):
    return _apply(_Log(), as_tensor(a))


def reciprocal(a):
    return _apply(_Reciprocal(), as_tensor(a))


def square(a):
    return _apply(_Square(), as_tensor(a))


def sqrt(a):
    return _apply(_Sqrt(), as_tensor(a))


def sin(a):
    return _apply(_Sin(), as_tensor(a))


def cos(a):
    return _apply(_Cos(), as_tensor(a))


def tanh(a):
    return _apply(_Tanh(), as_tensor(a))


def sigmoid(a):
    return _apply(_Sigmoid(), as_tensor(a))


def softplus(a):
    return _apply(_Softplus(), as_tensor(a))


def silu(a):
    return _apply(_SiLU(), as_tensor(a))


def elu(a):
    return _apply(_ELU(), as_tensor(a))


def relu(a):
    return _apply(_ReLU(), as_tensor(a))


def guided_relu(a):
    return _apply(_GuidedReLU(), as_tensor(a))


# ---------------------------------------------------------------------------
# fixed-kernel Gaussian blur


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """Row-stochastic matrix of a truncated (3 sigma) Gaussian, reflect boundary."""
    if sigma <= 0:
        return np.eye(n)
    radius = int(3.0 * sigma + 0.5)
    if radius == 0:
        return np.eye(n)
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for off, w in zip(offsets, kernel):
            j = i + off
            # half-sample symmetric reflection, repeated for wide kernels
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            m[i, j] += w
    return m


class _Blur(Op):
    name = "gaussian_blur"

    def __init__(self, rows, cols):
        self.rows = rows
        self.cols = cols

    def forward(self, a):
        return np.einsum("ij,...jk,lk->...il", self.rows, a, self.cols)

    def backward(self, g, inputs, needs):
        return (_apply(_Blur(self.rows.T, self.cols.T), g),)


def gaussian_blur(a: Tensor, sigma: float) -> Tensor:
    """Blur the trailing two axes of ``a`` with an isotropic Gaussian of std ``sigma``."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("gaussian_blur", a.shape, detail="needs an image with two trailing axes")
    h, w = a.shape[-2:]
    return _apply(_Blur(blur_matrix(h, sigma), blur_matrix(w, sigma)), a)
