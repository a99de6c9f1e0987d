"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float64 NumPy array plus an optional gradient.  Each
operation records a backward closure on its output; ``Tensor.backward`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into every reachable tensor with ``requires_grad``.

Design choices:
  * float64 everywhere, single-threaded, bitwise deterministic.
  * gradients never accumulate silently across backward calls; a second
    backward on the same loss raises unless ``accumulate=True`` is passed.
  * hot elementwise kernels (leaky ReLU, masked softmax) dispatch to the
    compiled extension when available.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DegenerateMaskError, DimensionError, GradientError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "concatenate",
    "stack",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "elu",
    "masked_softmax",
    "mse",
    "zero_grads",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._backward = _backward
        self._done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph mechanics -----------------------------------------------

    def backward(self, accumulate=False):
        """Run reverse-mode differentiation from this scalar.

        ``accumulate=True`` adds into existing ``grad`` buffers instead of
        requiring them to be reset; the default treats a second backward
        without an intervening ``zero_grads`` as a bug and raises.
        """
        if self.size != 1:
            raise GradientError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if self._done and not accumulate:
            raise GradientError(
                "backward already ran on this loss; pass accumulate=True "
                "to add gradients explicitly"
            )
        order = []
        seen = set()
        stack = [self]
        while stack:
            node = stack[-1]
            if id(node) in seen:
                stack.pop()
                continue
            unvisited = [p for p in node._parents if id(p) not in seen]
            if unvisited:
                stack.extend(unvisited)
            else:
                seen.add(id(node))
                order.append(node)
                stack.pop()
        for node in order:
            if node._parents:
                node.grad = None  # stale intermediate grads from earlier passes
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._done = True

    def _accumulate(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _binary(self, _wrap(other), np.add, lambda a, b, g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, _wrap(other), np.subtract, lambda a, b, g: (g, -g))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        return _binary(
            self, _wrap(other), np.multiply, lambda a, b, g: (g * b.data, g * a.data)
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply "
                            "by a reciprocal instead")
        return self * (1.0 / float(other))

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        out_data = self.data[key]
        src = self

        def back(grad):
            full = np.zeros_like(src.data)
            np.add.at(full, key, grad)
            src._accumulate(full)

        return Tensor(out_data, _parents=(src,), _backward=back)

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self
        out = Tensor(
            self.data.reshape(shape),
            _parents=(self,),
            _backward=lambda g: src._accumulate(g.reshape(src.shape)),
        )
        return out

    def swapaxes(self, a, b):
        src = self
        return Tensor(
            np.swapaxes(self.data, a, b),
            _parents=(self,),
            _backward=lambda g: src._accumulate(np.swapaxes(g, a, b)),
        )

    @property
    def T(self):
        if self.ndim != 2:
            raise DimensionError(".T is defined for 2-D tensors only")
        return self.swapaxes(0, 1)

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src = self
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(grad):
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            src._accumulate(np.broadcast_to(g, src.shape).copy())

        return Tensor(out_data, _parents=(self,), _backward=back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _binary(a: Tensor, b: Tensor, fn, grads) -> Tensor:
    try:
        out_data = fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"incompatible shapes {a.shape} and {b.shape}"
        ) from exc

    def back(grad):
        ga, gb = grads(a, b, grad)
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with NumPy stacking semantics on leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 1:
        out = matmul(a.reshape(1, -1), b)
        return out.reshape(out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, b.reshape(-1, 1))
        return out.reshape(out.shape[:-1])
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out_data = a.data @ b.data

    def back(grad):
        if a.requires_grad or a._parents:
            ga = grad @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ grad
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def concatenate(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(grad[tuple(sl)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=back)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def back(grad):
        parts = np.moveaxis(grad, axis, 0)
        for t, g in zip(tensors, parts):
            t._accumulate(g)

    return Tensor(out_data, _parents=tuple(tensors), _backward=back)


# -- elementwise nonlinearities ---------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def back(grad):
        x._accumulate(grad * out_data * (1.0 - out_data))

    return Tensor(out_data, _parents=(x,), _backward=back)


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.tanh(x.data)

    def back(grad):
        x._accumulate(grad * (1.0 - out_data * out_data))

    return Tensor(out_data, _parents=(x,), _backward=back)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _wrap(x)
    out_data = kernels.leaky_relu_forward(x.data, slope)

    def back(grad):
        x._accumulate(kernels.leaky_relu_backward(x.data, grad, slope))

    return Tensor(out_data, _parents=(x,), _backward=back)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = _wrap(x)
    neg = x.data < 0
    out_data = x.data.copy()
    out_data[neg] = alpha * np.expm1(x.data[neg])

    def back(grad):
        dx = grad.copy()
        dx[neg] = grad[neg] * (out_data[neg] + alpha)
        x._accumulate(dx)

    return Tensor(out_data, _parents=(x,), _backward=back)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (broadcast over
    leading dims).  Off-mask outputs are exactly zero."""
    logits = _wrap(logits)
    mask = np.ascontiguousarray(np.asarray(mask, dtype=np.uint8))
    if mask.ndim == 1:
        mask = mask[None, :]
    width = logits.shape[-1]
    if mask.shape[-1] != width:
        raise DimensionError(
            f"mask width {mask.shape[-1]} does not match logits width {width}"
        )
    flat = np.ascontiguousarray(logits.data.reshape(-1, width))
    mask2d = mask.reshape(-1, width)
    if flat.shape[0] % mask2d.shape[0] != 0:
        raise DimensionError(
            f"mask rows {mask2d.shape[0]} do not tile logits rows {flat.shape[0]}"
        )
    try:
        out2d = kernels.masked_softmax_forward(flat, mask2d)
    except ValueError as exc:
        raise DegenerateMaskError(str(exc)) from exc
    out_data = out2d.reshape(logits.shape)

    def back(grad):
        g2d = np.ascontiguousarray(grad.reshape(-1, width))
        dx = kernels.masked_softmax_backward(out2d, g2d)
        logits._accumulate(dx.reshape(logits.shape))

    return Tensor(out_data, _parents=(logits,), _backward=back)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse requires equal shapes, got {pred.shape} and {target.shape}"
        )
    diff = pred - target
    return (diff * diff).mean()


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
