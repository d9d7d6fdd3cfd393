"""Reverse-mode autodiff over numpy arrays.

A Tensor produced by an operation keeps a reference to the Function that made it (`ctx`);
`backward()` walks that graph in reverse topological order. Spatial tensors are NHWC.
"""
import threading
from contextlib import contextmanager
from typing import Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import ShapeError, UsageError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None and np.issubdtype(data.dtype, np.floating):
        return data
    return np.asarray(data, dtype=dtype or np.float32)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, ctx: Optional["Function"] = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.ctx = ctx

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _wrap(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other): return Add.apply(self, self._wrap(other))
    def __radd__(self, other): return Add.apply(self._wrap(other), self)
    def __sub__(self, other): return Sub.apply(self, self._wrap(other))
    def __rsub__(self, other): return Sub.apply(self._wrap(other), self)
    def __mul__(self, other): return Mul.apply(self, self._wrap(other))
    def __rmul__(self, other): return Mul.apply(self._wrap(other), self)
    def __truediv__(self, other): return Div.apply(self, self._wrap(other))
    def __rtruediv__(self, other): return Div.apply(self._wrap(other), self)
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, self._wrap(other))
    def __getitem__(self, key): return Slice.apply(self, key=key)

    def sum(self, axis=None, keepdims=False): return Sum.apply(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return Mean.apply(self, axis=axis, keepdims=keepdims)
    def exp(self): return Exp.apply(self)
    def log(self): return Log.apply(self)
    def relu(self): return ReLU.apply(self)
    def softmax(self): return Softmax.apply(self)
    def clip(self, lo, hi): return Clip.apply(self, lo=lo, hi=hi)
    def reshape(self, *shape): return Reshape.apply(self, shape=shape[0] if len(shape) == 1 else shape)

    def backward(self, grad: Optional[np.ndarray] = None):
        if self.ctx is None:
            raise UsageError("backward() needs a tensor produced by a recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)

        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in reversed(node.ctx.parents):
                    if id(parent) not in seen:
                        stack.append((parent, False))

        for node in reversed(order):
            if node.ctx is None or node.grad is None:
                continue
            grads = node.ctx.backward(node.grad)
            for parent, g in zip(node.ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = g.astype(parent.data.dtype, copy=False)
                parent.grad = g.copy() if parent.grad is None else parent.grad + g


class Function:
    parents: Tuple[Tensor, ...] = ()

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        ctx = cls()
        out = ctx.forward(*[t.data for t in tensors], **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in tensors)
        if track:
            ctx.parents = tensors
        return Tensor(out, requires_grad=track, ctx=ctx if track else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, x, y):
        self.shapes = x.shape, y.shape
        return x + y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = x.shape, y.shape
        return x - y

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return unbroadcast(grad * self.y, self.x.shape), unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return (unbroadcast(grad / self.y, self.x.shape),
                unbroadcast(-grad * self.x / (self.y * self.y), self.y.shape))


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Clip(Function):
    def forward(self, x, lo, hi):
        self.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape) / self.count,)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Slice(Function):
    def forward(self, x, key):
        self.shape, self.dtype, self.key = x.shape, x.dtype, key
        return x[key]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        out[self.key] = grad
        return (out,)


class MatMul(Function):
    """x (..., n) @ w (n, k)."""

    def forward(self, x, w):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul: input {x.shape} does not match weight {w.shape}")
        self.x, self.w = x, w
        return x @ w

    def backward(self, grad):
        gx = grad @ self.w.T
        gw = self.x.reshape(-1, self.x.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        return gx, gw


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    """Softmax over the last (channel) axis."""

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=-1, keepdims=True)),)


class Conv2d(Function):
    """Stride-1 'same' convolution; x (N,H,W,Cin), w (k,k,Cin,Cout), b (Cout,).

    Accumulates one matmul per kernel offset in a fixed order.
    """

    def forward(self, x, w, b):
        k = w.shape[0]
        pad = k // 2
        self.k, self.pad = k, pad
        self.xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        self.w = w
        n, h, wd, _ = x.shape
        out = np.zeros((n, h, wd, w.shape[3]), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                out += self.xp[:, i:i + h, j:j + wd, :] @ w[i, j]
        return out + b

    def backward(self, grad):
        k, pad = self.k, self.pad
        n, h, wd, cout = grad.shape
        cin = self.w.shape[2]
        gxp = np.zeros_like(self.xp)
        gw = np.zeros_like(self.w)
        flat_grad = grad.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + h, j:j + wd, :] += grad @ self.w[i, j].T
                gw[i, j] = self.xp[:, i:i + h, j:j + wd, :].reshape(-1, cin).T @ flat_grad
        gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        gb = grad.sum(axis=(0, 1, 2))
        return gx, gw, gb


class MaxPool2(Function):
    def forward(self, x):
        n, h, w, c = x.shape
        self.shape = x.shape
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        self.index = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.index[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, h, w, c = self.shape
        blocks = np.zeros((n, h // 2, w // 2, c, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, self.index[..., None], grad[..., None], axis=-1)
        gx = blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)


class Upsample2(Function):
    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, grad):
        n, h, w, c = grad.shape
        return (grad.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)


class Concat(Function):
    """Concatenate along the last axis."""

    def forward(self, *xs):
        self.sizes = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=-1))


class DropoutMask(Function):
    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


class LayerNormalize(Function):
    """(x - mean) / sqrt(var + eps) over the last axis, without the affine part."""

    def forward(self, x, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat

    def backward(self, grad):
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * self.xhat).mean(axis=-1, keepdims=True)
        return (self.inv_std * (grad - g_mean - self.xhat * gx_mean),)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return Concat.apply(*tensors)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return DropoutMask.apply(x, mask=mask)
