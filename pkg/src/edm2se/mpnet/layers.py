"""Magnitude-preserving primitives: weight normalization, forced norm, MP-Add, MP-SiLU."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import Tensor, as_tensor, concat, mul, silu

DEFAULT_EPS = 1e-4

# E[silu(x)^2]^0.5 for x ~ N(0, 1)
SILU_GAIN = 0.596


class Parameter(Tensor):
    """Learnable tensor.

    ``fan_in`` is the dimensionality of each per-output-channel weight vector
    (the product of all axes but the first). When ``mp_normalized`` is set the
    optimizer loop must call :func:`force_norm` after every update.
    """

    __slots__ = ("fan_in", "mp_normalized")

    def __init__(self, data, name=None, mp_normalized=False):
        super().__init__(data, requires_grad=True, name=name)
        self.mp_normalized = mp_normalized
        self.fan_in = int(np.prod(self.data.shape[1:])) if self.data.ndim > 1 else 1


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def normalize_weight(v, eps=DEFAULT_EPS):
    """v / (||v|| + eps), row-wise over output channels.

    Accepts a :class:`Tensor` (differentiable) or a plain array. A 1-D input
    is treated as a single weight vector.
    """
    if not isinstance(v, Tensor):
        arr = np.asarray(v, dtype=np.float64)
        flat = arr.reshape(1, -1) if arr.ndim == 1 else _rows(arr)
        norm = np.linalg.norm(flat, axis=1, keepdims=True)
        return (flat / (norm + eps)).reshape(arr.shape)

    shape = v.shape
    flat = v.data.reshape(1, -1) if v.data.ndim == 1 else _rows(v.data)
    norm = np.sqrt(np.sum(flat * flat, axis=1, keepdims=True))
    den = norm + eps
    out = (flat / den).reshape(shape)

    def backward(g):
        gf = g.reshape(flat.shape)
        dot = np.sum(gf * flat, axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, dot / (safe * den * den), 0.0)
        v._accum((gf / den - flat * coef).reshape(shape))

    return Tensor.from_op(out, (v,), backward)


def force_norm(p: Parameter) -> Parameter:
    """Rescale each per-output-channel row of ``p`` to norm sqrt(fan_in), in place.

    No gradient flows through this projection. All-zero rows are left as is.
    """
    flat = _rows(p.data) if p.data.ndim > 1 else p.data.reshape(1, -1)
    norm = np.linalg.norm(flat.astype(np.float64), axis=1, keepdims=True)
    scale = np.where(norm > 0, np.sqrt(p.fan_in) / np.where(norm > 0, norm, 1.0), 1.0)
    p.data = (flat * scale).astype(p.data.dtype).reshape(p.data.shape)
    return p


def mp_silu(x: Tensor) -> Tensor:
    return mul(silu(x), 1.0 / SILU_GAIN)


def mp_add(a, b, tau_raw):
    """Magnitude-preserving blend ((1-tau) a + tau b) / sqrt((1-tau)^2 + tau^2), tau = sigmoid(tau_raw).

    Works on plain arrays (with a float ``tau_raw``) or on Tensors, in which
    case ``tau_raw`` may be a scalar :class:`Tensor` and receives a gradient.
    """
    if not any(isinstance(u, Tensor) for u in (a, b, tau_raw)):
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"mp_add shape mismatch: {a.shape} vs {b.shape}")
        tau = expit(np.asarray(tau_raw, dtype=np.float64))
        return ((1 - tau) * a + tau * b) / np.sqrt((1 - tau) ** 2 + tau**2)

    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    r = as_tensor(tau_raw, a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"mp_add shape mismatch: {a.shape} vs {b.shape}")
    tau = expit(r.data)
    s = np.sqrt((1 - tau) ** 2 + tau**2)
    num = (1 - tau) * a.data + tau * b.data
    out = num / s

    def backward(g):
        if a.requires_grad:
            a._accum(g * ((1 - tau) / s))
        if b.requires_grad:
            b._accum(g * (tau / s))
        if r.requires_grad:
            # d out / d tau = (b - a)/s - num (2 tau - 1)/s^3
            dtau = np.sum(g * ((b.data - a.data) / s - num * (2 * tau - 1) / s**3))
            r._accum(np.asarray(dtau * tau * (1 - tau), dtype=r.dtype).reshape(r.shape))

    return Tensor.from_op(out.astype(a.dtype, copy=False), (a, b, r), backward)


def mp_cat(a: Tensor, b: Tensor, balance=0.5) -> Tensor:
    """Channel concatenation that keeps the overall magnitude (last axis)."""
    na, nb = a.shape[-1], b.shape[-1]
    c = np.sqrt((na + nb) / ((1 - balance) ** 2 + balance**2))
    wa = c / np.sqrt(na) * (1 - balance)
    wb = c / np.sqrt(nb) * balance
    return concat([mul(a, wa), mul(b, wb)], axis=-1)


def mp_sum(a: Tensor, b: Tensor, balance: float) -> Tensor:
    """Fixed-weight magnitude-preserving residual merge."""
    s = np.sqrt((1 - balance) ** 2 + balance**2)
    return mul(a, (1 - balance) / s) + mul(b, balance / s)
