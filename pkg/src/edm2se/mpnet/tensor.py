"""Minimal reverse-mode autodiff over numpy arrays.

Only the op set needed by the magnitude-preserving denoiser is provided.
Feature maps are channels-last (NHWC) inside the engine.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward):
        """Wrap an op result; records the backward closure only if needed."""
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes release their gradient once propagated
                    node.grad = None

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor.from_op(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(-g)

    return Tensor.from_op(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(out_data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(2.0 * a.data * g)

    return Tensor.from_op(a.data * a.data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(np.sign(a.data) * g)

    return Tensor.from_op(np.abs(a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)

    def backward(g):
        a._accum(g * s * (1.0 - s))

    return Tensor.from_op(s, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accum(g.reshape(a.shape))

    return Tensor.from_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accum(np.transpose(g, inv))

    return Tensor.from_op(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward)


def concat(tensors, axis=-1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(data, tuple(tensors), backward)


# reductions -------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(np.broadcast_to(g, a.shape))

    return Tensor.from_op(a.data.sum(), (a,), backward)


def sum_over(a: Tensor, axes) -> Tensor:
    """Sum over ``axes``; the result keeps only the remaining axes."""
    axes = tuple(axes)

    def backward(g):
        a._accum(np.broadcast_to(np.expand_dims(g, axes), a.shape))

    return Tensor.from_op(a.data.sum(axis=axes), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        a._accum(np.broadcast_to(g / n, a.shape))

    return Tensor.from_op(a.data.mean(), (a,), backward)


# layers -------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for x [N, in] and w [out, in]."""

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data)
        if w.requires_grad:
            w._accum(g.T @ x.data)

    return Tensor.from_op(x.data @ w.data.T, (x, w), backward)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Same-padded stride-1 convolution; x [B, H, W, Cin], w [Cout, Cin, k, k], odd k."""
    B, H, W, C = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {cin}")
    if kh == 1 and kw == 1:
        wm = w.data.reshape(cout, cin)
        xm = x.data.reshape(-1, C)

        def backward1(g):
            gm = g.reshape(-1, cout)
            if x.requires_grad:
                x._accum((gm @ wm).reshape(x.shape))
            if w.requires_grad:
                w._accum((gm.T @ xm).reshape(w.shape))

        return Tensor.from_op((xm @ wm.T).reshape(B, H, W, cout), (x, w), backward1)

    cols = _im2col(x.data, kh, kw)
    # weight as [(dy, dx, c), cout]
    wm = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(kh * kw * C, cout)
    out = (cols @ wm).reshape(B, H, W, cout)

    def backward(g):
        gm = g.reshape(-1, cout)
        if w.requires_grad:
            gw = (cols.T @ gm).reshape(kh, kw, C, cout).transpose(3, 2, 0, 1)
            w._accum(gw)
        if x.requires_grad:
            # input gradient is a same-padded convolution with the flipped kernel
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(kh * kw * cout, C)
            x._accum((_im2col(g, kh, kw) @ wf).reshape(B, H, W, C))

    return Tensor.from_op(out, (x, w), backward)


def _im2col(a, kh, kw):
    B, H, W, C = a.shape
    ph, pw = kh // 2, kw // 2
    ap = np.pad(a, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # win[b, h, w, c, dy, dx] -> cols[(b, h, w), (dy, dx, c)]
    win = np.lib.stride_tricks.sliding_window_view(ap, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * C)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the spatial axes of an NHWC tensor."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def backward(g):
        gx = np.broadcast_to((g / 4)[:, :, None, :, None, :], (B, H // 2, 2, W // 2, 2, C))
        x._accum(gx.reshape(B, H, W, C))

    return Tensor.from_op(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NHWC tensor."""
    B, H, W, C = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (B, H, 2, W, 2, C)).reshape(B, 2 * H, 2 * W, C)

    def backward(g):
        x._accum(g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)))

    return Tensor.from_op(out, (x,), backward)


def pixel_norm(x: Tensor, eps=1e-4) -> Tensor:
    """Normalize each pixel's channel vector to RMS one."""
    C = x.shape[-1]
    rms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) / C)
    den = rms + eps
    out = x.data / den

    def backward(g):
        # d(x/den) = g/den - x * <g, x> / (C * rms * den^2)
        dot = np.sum(g * x.data, axis=-1, keepdims=True)
        safe = np.where(rms > 0, rms, 1.0)
        coef = np.where(rms > 0, dot / (C * safe * den * den), 0.0)
        x._accum(g / den - x.data * coef)

    return Tensor.from_op(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward(g):
        x._accum(g * s * (1.0 + x.data * (1.0 - s)))

    return Tensor.from_op(x.data * s, (x,), backward)
