"""A small reverse-mode autodiff over numpy arrays.

Only the operations the models and losses in this package need are
implemented. Every op records its parents and a closure mapping the
output gradient to parent gradients; :meth:`Tensor.backward` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        order, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for t in reversed(order):
            if t._backward is None or t.grad is None:
                continue
            for parent, g in zip(t._parents, t._backward(t.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor(self.data + other.data, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor(x * y, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor(out, _parents=(self, other),
                      _backward=lambda g: (_unbroadcast(g / y, x.shape),
                                           _unbroadcast(-g * out / y, y.shape)))

    def __matmul__(self, other):
        x, y = self.data, other.data
        return Tensor(x @ y, _parents=(self, other), _backward=lambda g: (g @ y.T, x.T @ g))

    # reductions and shape -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), _parents=(self,), _backward=lambda g: (g.reshape(old),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(x.data * mask, _parents=(x,), _backward=lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * 0.5 / out,))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return Tensor(out, _parents=(x,),
                  _backward=lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid_clamped(x: Tensor, floor: float = 1e-12, complement: bool = False) -> Tensor:
    """``log(clip(sigmoid(x)))``, or ``log(1 - clip(sigmoid(x)))`` with ``complement``.

    The clip into ``[floor, 1 - floor]`` bounds the value only. The gradient
    is the unclipped one (``1 - sigmoid`` resp. ``-sigmoid``), so a saturated
    discriminator still receives a restoring signal.
    """
    s = sigmoid(x.data)
    c = np.clip(s, floor, 1.0 - floor)
    if complement:
        return Tensor(np.log1p(-c), _parents=(x,), _backward=lambda g: (-g * s,))
    return Tensor(np.log(c), _parents=(x,), _backward=lambda g: (g * (1.0 - s),))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    out, cols = _kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)
    x_shape = x.shape

    def back(g):
        return _kernels.conv2d_backward(cols, x_shape, w.data, g, stride, pad, x.requires_grad)

    return Tensor(out, _parents=(x, w, b), _backward=back)


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, gradient times ``-lam`` backward."""
    if lam < 0:
        raise ValueError("gradient reversal coefficient must be >= 0")
    return Tensor(x.data, _parents=(x,), _backward=lambda g: (-lam * g,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)
