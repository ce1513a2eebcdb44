"""Time-dependent input/output/skip scalings and loss weighting for the bridge denoiser."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .schedule import BridgeSchedule, per_item, schedule_coefficients


@dataclass(frozen=True)
class SignalStats:
    """Variances of compressed clean and noise spectra."""

    sigma_x2: float = 0.402
    sigma_n2: float = 0.342

    def __post_init__(self):
        if not (self.sigma_x2 > 0 and self.sigma_n2 > 0):
            raise ValueError(f"signal variances must be positive, got {self.sigma_x2}, {self.sigma_n2}")


class SkipMode(enum.Enum):
    NOISE = "noise"  # c_skip = 1: network predicts (scaled) noise
    CLEAN = "clean"  # c_skip = 0: network predicts clean speech

    @property
    def c_skip(self) -> float:
        return 1.0 if self is SkipMode.NOISE else 0.0

    @classmethod
    def parse(cls, value) -> "SkipMode":
        if isinstance(value, cls):
            return value
        aliases = {"noise": cls.NOISE, "1": cls.NOISE, "clean": cls.CLEAN, "0": cls.CLEAN}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown skip mode {value!r}; use 'noise' or 'clean'") from None


@dataclass(frozen=True)
class PreconditionSet:
    c_in: np.ndarray | float
    c_cond: float
    c_out: np.ndarray | float
    c_skip: float
    lam: np.ndarray | float


def precondition(sched: BridgeSchedule, stats: SignalStats, mode: SkipMode, t) -> PreconditionSet:
    scalar = np.ndim(t) == 0
    co = schedule_coefficients(sched, t)
    sx2, sn2 = stats.sigma_x2, stats.sigma_n2
    wsum = np.asarray(co.w_x) + np.asarray(co.w_y)
    w_y = np.asarray(co.w_y)
    var_t = np.asarray(co.var_marg)
    c_in = 1.0 / np.sqrt(wsum**2 * sx2 + w_y**2 * sn2 + var_t)
    cs = mode.c_skip
    c_out = np.sqrt((1.0 - cs * wsum) ** 2 * sx2 + cs**2 * w_y**2 * sn2 + cs**2 * var_t)
    # lam is inf where c_out vanishes or underflows
    with np.errstate(divide="ignore", over="ignore"):
        lam = 1.0 / c_out**2
    conv = float if scalar else np.asarray
    return PreconditionSet(
        c_in=conv(c_in),
        c_cond=float(1.0 / np.sqrt(sx2 + sn2)),
        c_out=conv(c_out),
        c_skip=cs,
        lam=conv(lam),
    )


def denoise(net, x_t, y, t, pre: PreconditionSet):
    """c_skip x_t + c_out F(c_in x_t, c_cond y, t).

    ``net`` is any callable ``F(x_in, cond, t)``; if it returns an autodiff
    Tensor the result is a Tensor too.
    """
    x_t = np.asarray(x_t)
    y = np.asarray(y)
    if x_t.shape != y.shape:
        raise ValueError(f"x_t {x_t.shape} and y {y.shape} differ in shape")
    dt = x_t.dtype if x_t.dtype.kind == "f" else np.float64
    c_in = per_item(pre.c_in, x_t).astype(dt)
    c_out = per_item(pre.c_out, x_t).astype(dt)
    out = net(c_in * x_t, (pre.c_cond * y).astype(dt), t)
    return c_out * out + (pre.c_skip * x_t).astype(dt)


def f_target(x0, x_t, pre: PreconditionSet):
    """Normalized network target (x0 - c_skip x_t) / c_out; zero where c_out = 0."""
    x0 = np.asarray(x0)
    x_t = np.asarray(x_t)
    if x0.shape != x_t.shape:
        raise ValueError(f"x0 {x0.shape} and x_t {x_t.shape} differ in shape")
    num = x0 - pre.c_skip * x_t
    c_out = np.broadcast_to(per_item(pre.c_out, x0), num.shape)
    out = np.zeros(num.shape, dtype=np.result_type(num, np.float32))
    np.divide(num, c_out, out=out, where=c_out > 0)
    return out
