"""Held-out mixtures, enhancement scores and a fixed-draw validation loss."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .mpnet.net import DenoiserNet
from .mpnet.tensor import no_grad
from .precond import SignalStats
from .sampler import enhance_waveform, make_denoiser
from .signal import level_gain, si_sdr, wav_to_model
from .trainer import TEST_TAG, VALID_TAG, bridge_loss, synth_items


@dataclass(frozen=True)
class Mixtures:
    clean: np.ndarray  # [n, N]
    noisy: np.ndarray  # [n, N]
    snr_db: float


def held_out_mixtures(run: RunConfig, n: int, snr_db: float, n_samples: int, tag: int = TEST_TAG) -> Mixtures:
    """Mixtures from a seed stream disjoint from the training items."""
    clean, _, noisy = synth_items(run.data, tag, n, n_samples, snr=snr_db, sample_rate=run.stft.sample_rate)
    return Mixtures(clean, noisy, snr_db)


def validation_mixtures(run: RunConfig) -> Mixtures:
    d = run.data
    return held_out_mixtures(run, d.n_valid, d.valid_snr, d.valid_samples, tag=VALID_TAG)


def net_from_params(run: RunConfig, params: dict) -> DenoiserNet:
    net = DenoiserNet(dataclasses.replace(run.net, seed=run.train.seed))
    net.load_state_dict(params)
    return net


def enhance_batch(net, run: RunConfig, stats: SignalStats, noisy, n_steps: int | None = None) -> np.ndarray:
    cfg = run.sampler_cfg if n_steps is None else dataclasses.replace(run.sampler_cfg, n_steps=n_steps)
    den = make_denoiser(net, run.schedule, stats, run.mode)
    return enhance_waveform(noisy, den, run.stft, cfg, run.schedule, time_multiple=net.cfg.downsample_factor)


def enhancement_scores(net, run: RunConfig, stats: SignalStats, mix: Mixtures, n_steps: int | None = None) -> dict:
    """Mean SI-SDR of the enhanced output, of the noisy input, and their per-item difference."""
    out = enhance_batch(net, run, stats, mix.noisy, n_steps)
    s_out = np.array([si_sdr(c, o) for c, o in zip(mix.clean, out)])
    s_in = np.array([si_sdr(c, y) for c, y in zip(mix.clean, mix.noisy)])
    return {
        "si_sdr": float(s_out.mean()),
        "si_sdr_in": float(s_in.mean()),
        "improvement": float((s_out - s_in).mean()),
        "per_item": s_out - s_in,
        "enhanced": out,
    }


def validation_loss(net, run: RunConfig, stats: SignalStats, mix: Mixtures, seed: int = 0) -> float:
    """Training objective on whole validation items with fixed (seeded) t and noise draws."""
    gain = level_gain(mix.noisy, run.stft)
    x0 = wav_to_model(mix.clean * gain, run.stft)
    y = wav_to_model(mix.noisy * gain, run.stft)
    f = net.cfg.downsample_factor
    keep = x0.shape[-1] - x0.shape[-1] % f
    x0 = x0[..., :keep].astype(net.dtype)
    y = y[..., :keep].astype(net.dtype)
    rng = np.random.default_rng([run.data.seed, VALID_TAG, seed])
    t = rng.uniform(run.schedule.t_eps, 1.0, size=x0.shape[0])
    z = rng.standard_normal(x0.shape).astype(net.dtype)
    with no_grad():
        total, _, _ = bridge_loss(net, x0, y, t, z, run.schedule, stats, run.mode, run.train.alpha, run.stft)
    return float(total.data)


def sweep_evaluator(run: RunConfig, stats: SignalStats, mix: Mixtures | None = None):
    """``params -> {"si_sdr", "loss"}`` on the validation mixtures, for ema_sweep."""
    mix = validation_mixtures(run) if mix is None else mix

    def evaluate(params):
        net = net_from_params(run, params)
        return {
            "si_sdr": enhancement_scores(net, run, stats, mix)["si_sdr"],
            "loss": validation_loss(net, run, stats, mix),
        }

    return evaluate
