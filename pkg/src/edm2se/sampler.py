"""Deterministic bridge ODE sampler and the waveform enhancement pipeline."""

from __future__ import annotations

import numpy as np

from .config import SamplerConfig
from .mpnet.tensor import Tensor, no_grad
from .precond import SignalStats, SkipMode, denoise, precondition
from .schedule import BridgeSchedule, schedule_coefficients
from .signal import StftConfig, level_gain, model_to_wav, wav_to_model


def sampler_grid(cfg: SamplerConfig) -> np.ndarray:
    """n_steps + 1 uniformly spaced times from 1 down to t_eps."""
    return 1.0 - np.arange(cfg.n_steps + 1) * ((1.0 - cfg.t_eps) / cfg.n_steps)


def ode_step(x_t, y, t: float, s: float, denoiser, sched: BridgeSchedule = BridgeSchedule()):
    """Move x_t to time s < t along the posterior-mean transport map.

    x_s = mu_s(x0_hat, y) + (sigma_s / sigma_t) (x_t - mu_t(x0_hat, y)), with the
    residual term taken as zero when sigma_t = 0.
    """
    if not s < t:
        raise ValueError(f"ode_step must move backwards in time, got t={t}, s={s}")
    x0_hat = np.asarray(denoiser(x_t, y, t))
    ct = schedule_coefficients(sched, t)
    cs = schedule_coefficients(sched, s)
    mean_t = ct.w_x * x0_hat + ct.w_y * y
    mean_s = cs.w_x * x0_hat + cs.w_y * y
    if ct.var_marg <= 0:
        return mean_s
    ratio = np.sqrt(cs.var_marg / ct.var_marg)
    return mean_s + ratio * (x_t - mean_t)


def enhance_spec(y_spec, denoiser, sched: BridgeSchedule = BridgeSchedule(), cfg: SamplerConfig = SamplerConfig()):
    """Integrate from x_1 = y down to t_eps; returns the denoiser estimate at t_eps."""
    y = np.asarray(y_spec)
    grid = sampler_grid(cfg)
    x = y.copy()
    for i in range(cfg.n_steps):
        x = ode_step(x, y, grid[i], grid[i + 1], denoiser, sched)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sampler state after step {i} (t={grid[i + 1]:.4f})")
    out = np.asarray(denoiser(x, y, grid[-1]))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite denoiser output at the final step {cfg.n_steps}")
    return out


def make_denoiser(net, sched: BridgeSchedule, stats: SignalStats, mode: SkipMode):
    """Wrap a network as ``D(x_t, y, t) -> x0_hat`` (numpy in, numpy out, no graph)."""

    def fn(x_t, y, t):
        x_t = np.asarray(x_t)
        batch = x_t.shape[0] if x_t.ndim == 4 else 1
        tb = np.full(batch, float(t)) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        pre = precondition(sched, stats, mode, tb if x_t.ndim == 4 else float(t))
        with no_grad():
            out = denoise(net, x_t.astype(net.dtype), np.asarray(y).astype(net.dtype), tb, pre)
        return out.data if isinstance(out, Tensor) else out

    return fn


def enhance_waveform(
    y_wav,
    denoiser,
    stft_cfg: StftConfig = StftConfig(),
    sampler_cfg: SamplerConfig = SamplerConfig(),
    sched: BridgeSchedule = BridgeSchedule(),
    time_multiple: int = 1,
) -> np.ndarray:
    """Enhance one waveform [N] or a batch [B, N]; output has the input's length.

    ``time_multiple`` pads the frame axis (with silence in the compressed
    domain) so that the network's pooling sees a divisible length.
    """
    y_wav = np.asarray(y_wav, dtype=np.float64)
    single = y_wav.ndim == 1
    batch = y_wav[None] if single else y_wav
    n = batch.shape[-1]
    gain = level_gain(batch, stft_cfg)
    spec = wav_to_model(batch * gain, stft_cfg)
    n_frames = spec.shape[-1]
    extra = (-n_frames) % time_multiple
    if extra:
        spec = np.pad(spec, [(0, 0)] * (spec.ndim - 1) + [(0, extra)])
    x0 = enhance_spec(spec, denoiser, sched, sampler_cfg)[..., :n_frames]
    out = model_to_wav(x0, stft_cfg, n) / gain
    return out[0] if single else out
