"""Closed-form Schrödinger-bridge schedule with g(t) = sqrt(c) * k**t and zero drift."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BridgeSchedule:
    c: float = 0.4
    k: float = 2.6
    t_eps: float = 0.02

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"schedule: c must be > 0, got {self.c}")
        if not self.k > 1:
            raise ValueError(f"schedule: k must be > 1, got {self.k}")
        if not 0 < self.t_eps < 1:
            raise ValueError(f"schedule: t_eps must lie in (0, 1), got {self.t_eps}")

    def g(self, t):
        return math.sqrt(self.c) * np.power(self.k, t)

    def var_fwd(self, t):
        """Variance accumulated over [0, t]: integral of g^2."""
        t = np.asarray(t, dtype=np.float64)
        return self.c * np.expm1(2 * t * math.log(self.k)) / (2 * math.log(self.k))

    def var_bwd(self, t):
        """Variance accumulated over [t, 1]."""
        t = np.asarray(t, dtype=np.float64)
        lk = math.log(self.k)
        # k^(2t) (k^(2(1-t)) - 1) keeps both endpoints exact
        return self.c * np.exp(2 * t * lk) * np.expm1(2 * (1 - t) * lk) / (2 * lk)

    @property
    def var_total(self) -> float:
        return float(self.var_fwd(1.0))


@dataclass(frozen=True)
class ScheduleCoefficients:
    t: np.ndarray | float
    g: np.ndarray | float
    var_fwd: np.ndarray | float
    var_bwd: np.ndarray | float
    var_marg: np.ndarray | float
    w_x: np.ndarray | float
    w_y: np.ndarray | float

    @property
    def sigma(self):
        return np.sqrt(self.var_marg)


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"process time must lie in [0, 1], got {t}")
    return t


def _out(a, scalar):
    return float(a) if scalar else a


def schedule_coefficients(sched: BridgeSchedule, t) -> ScheduleCoefficients:
    """All bridge coefficients at time(s) ``t`` (scalar or array)."""
    scalar = np.ndim(t) == 0
    t = _check_time(t)
    vf = sched.var_fwd(t)
    vb = np.maximum(sched.var_bwd(t), 0.0)
    total = sched.var_fwd(1.0)
    # total > 0, so these are the analytic limits at t in {0, 1} as well
    var_marg = vf * vb / total
    w_x = vb / total
    w_y = vf / total
    return ScheduleCoefficients(
        t=_out(t, scalar),
        g=_out(sched.g(t), scalar),
        var_fwd=_out(vf, scalar),
        var_bwd=_out(vb, scalar),
        var_marg=_out(var_marg, scalar),
        w_x=_out(w_x, scalar),
        w_y=_out(w_y, scalar),
    )


def per_item(coef, x: np.ndarray):
    """Reshape a scalar or per-batch-item coefficient to broadcast against ``x``."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (np.ndim(x) - 1))


def sample_marginal(sched: BridgeSchedule, x0, y, t, z):
    """x_t = w_x(t) x0 + w_y(t) y + sigma_t z."""
    x0, y, z = np.asarray(x0), np.asarray(y), np.asarray(z)
    if not (x0.shape == y.shape == z.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape}, y {y.shape}, z {z.shape}")
    co = schedule_coefficients(sched, t)
    out = per_item(co.w_x, x0) * x0 + per_item(co.w_y, x0) * y + per_item(co.sigma, x0) * z
    return out.astype(np.result_type(x0, y, z), copy=False)
