"""Training loop: weighted spectral loss plus time-domain l1, Adam with forced weight norms,
EMA tracking and periodic snapshots."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig, RunConfig, TrainConfig
from .ema import EmaTrace
from .mpnet import tensor as T
from .mpnet.layers import force_norm
from .mpnet.net import DenoiserNet
from .precond import SignalStats, SkipMode, denoise, precondition
from .schedule import BridgeSchedule, sample_marginal
from .signal import (
    COMPRESS_EXP,
    COMPRESS_GAIN,
    StftConfig,
    level_gain,
    compress,
    compressed_stats,
    istft,
    istft_adjoint,
    stft,
    synth_clean,
    synth_noise,
    mix_at_snr,
)
from .store import SnapshotStore, save_params

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "samples", "lr", "loss_spec", "loss_l1", "grad_norm")


def lr(samples_seen: float, cfg: TrainConfig = TrainConfig()) -> float:
    """Inverse-square-root decay after a plateau of ``lr_ref_samples`` samples."""
    if samples_seen < 0:
        raise ValueError("samples_seen must be >= 0")
    return cfg.lr0 / math.sqrt(max(samples_seen / cfg.lr_ref_samples, 1.0))


# differentiable spectrum -> waveform -------------------------------------------


def spec_to_wave(spec: T.Tensor, cfg: StftConfig) -> T.Tensor:
    """Decompress a model-space spectrum [B, 2, F-1, T] and invert the STFT.

    The Nyquist bin is restored as zero. Output length is hop * (T - 1).
    """
    d = spec.data.astype(np.float64)
    B, _, F, n_frames = d.shape
    if F != cfg.n_freq - 1:
        raise ValueError(f"expected {cfg.n_freq - 1} frequency bins, got {F}")
    full = np.concatenate([d, np.zeros((B, 2, 1, n_frames))], axis=2)
    a, b = full[:, 0], full[:, 1]
    r = np.hypot(a, b)
    p = 1.0 / COMPRESS_EXP - 1.0
    scale = COMPRESS_GAIN ** (-1.0 / COMPRESS_EXP)
    rp = r**p
    wav = istft((a + 1j * b) * rp * scale, cfg)

    def backward(g):
        gs = istft_adjoint(g, cfg, n_frames)
        gr, gi = gs.real, gs.imag
        # d(a r^p)/da = r^p + p a^2 r^(p-2), d(a r^p)/db = p a b r^(p-2)
        rp2 = np.zeros_like(r)
        nz = r > 0
        rp2[nz] = p * r[nz] ** (p - 2.0)
        ga = gr * (rp + a * a * rp2) + gi * (a * b * rp2)
        gb = gr * (a * b * rp2) + gi * (rp + b * b * rp2)
        grad = np.stack([ga, gb], axis=1)[:, :, :F] * scale
        spec._accum(grad.astype(spec.dtype))

    return T.Tensor.from_op(wav.astype(spec.dtype), (spec,), backward)


# data -------------------------------------------------------------------------------

TRAIN_TAG, VALID_TAG, TEST_TAG = 0, 1, 2


def synth_items(data: DataConfig, tag: int, n: int, n_samples: int, snr=None, sample_rate: int = 8000):
    """Clean, noise and noisy waveforms [n, n_samples]; item i uses seed (data.seed, tag, i)."""
    clean = np.empty((n, n_samples))
    noise = np.empty((n, n_samples))
    for i in range(n):
        rng = np.random.default_rng([data.seed, tag, i])
        snr_i = rng.uniform(data.snr_low, data.snr_high) if snr is None else snr
        c = synth_clean(rng, n_samples, sample_rate)
        nz = synth_noise(rng, n_samples, sample_rate)
        _, scaled = mix_at_snr(c, nz, snr_i)
        clean[i], noise[i] = c, scaled
    return clean, noise, clean + noise


@dataclass
class TrainingData:
    """Model-space training spectra (Nyquist bin dropped), float32 [N, 2, F-1, T]."""

    clean: np.ndarray
    noisy: np.ndarray
    stats: SignalStats

    @classmethod
    def build(cls, data: DataConfig, stft_cfg: StftConfig) -> "TrainingData":
        clean, noise, noisy = synth_items(data, TRAIN_TAG, data.n_train, data.item_samples, sample_rate=stft_cfg.sample_rate)
        gain = level_gain(noisy, stft_cfg)
        clean, noise, noisy = clean * gain, noise * gain, noisy * gain
        c_spec = compress(stft(clean, stft_cfg))
        n_spec = compress(stft(noise, stft_cfg))
        y_spec = compress(stft(noisy, stft_cfg))
        sx2, sn2 = compressed_stats(c_spec, n_spec)
        if c_spec.shape[-1] < data.segment_frames:
            raise ValueError(f"items give {c_spec.shape[-1]} frames, fewer than segment_frames={data.segment_frames}")
        return cls(
            clean=np.ascontiguousarray(c_spec[..., :-1, :], dtype=np.float32),
            noisy=np.ascontiguousarray(y_spec[..., :-1, :], dtype=np.float32),
            stats=SignalStats(sx2, sn2),
        )

    def sample(self, rng: np.random.Generator, batch_size: int, frames: int):
        idx = rng.integers(0, self.clean.shape[0], size=batch_size)
        off = rng.integers(0, self.clean.shape[-1] - frames + 1, size=batch_size)
        win = off[:, None] + np.arange(frames)[None, :]
        x0 = np.take_along_axis(self.clean[idx], win[:, None, None, :], axis=-1)
        y = np.take_along_axis(self.noisy[idx], win[:, None, None, :], axis=-1)
        return x0, y


# optimizer -----------------------------------------------------------------------------


class Adam:
    """Adam without weight decay, operating in place on Parameter data."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, rate: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# loss ------------------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    loss_spec: float
    loss_l1: float
    grad_norm: float
    t: np.ndarray


def bridge_loss(net, x0, y, t, z, sched, stats, mode, alpha, stft_cfg):
    """Weighted spectral squared error plus alpha-weighted time-domain l1.

    Returns (total, spectral, weighted l1) as Tensors; each term is a batch
    mean of per-item sums.
    """
    pre = precondition(sched, stats, mode, t)
    if not np.allclose(pre.lam * pre.c_out**2, 1.0, rtol=1e-12, atol=0):
        raise AssertionError(f"loss weight does not cancel the output scale at t={t}")
    x_t = sample_marginal(sched, x0, y, t, z).astype(x0.dtype)
    d = denoise(net, x_t, y, t, pre)
    B = x0.shape[0]
    per_item = T.sum_over(T.square(d - x0), (1, 2, 3))
    spec_term = T.sum_all(per_item * pre.lam.astype(x0.dtype)) / B
    if alpha > 0:
        wav_d = spec_to_wave(d, stft_cfg)
        wav_x = spec_to_wave(T.Tensor(x0), stft_cfg).data
        l1_term = T.sum_all(T.absolute(wav_d - wav_x)) * (alpha / B)
        total = spec_term + l1_term
    else:
        l1_term = T.Tensor(np.zeros((), dtype=x0.dtype))
        total = spec_term
    return total, spec_term, l1_term


# trainer -------------------------------------------------------------------------------------


class Trainer:
    """Holds the training state: network, optimizer moments, EMA traces, RNG and counters."""

    def __init__(self, run: RunConfig, stats: SignalStats, data: TrainingData | None = None, store: SnapshotStore | None = None):
        self.run = run
        self.cfg = run.train
        self.sched: BridgeSchedule = run.schedule
        self.stats = stats
        self.mode: SkipMode = run.mode
        self.stft_cfg = run.stft
        self.data = data
        self.store = store
        self.net = DenoiserNet(_net_cfg(run))
        self.opt = Adam(self.net.params, self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps)
        self.traces = [EmaTrace(gamma=g) for g in self.cfg.ema_gammas]
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step = 0
        self.samples_seen = 0
        self.history: list[dict] = []

    def draw_times(self, n: int) -> np.ndarray:
        return self.rng.uniform(self.sched.t_eps, 1.0, size=n)

    def training_step(self, x0, y) -> StepResult:
        x0 = np.asarray(x0, dtype=self.net.dtype)
        y = np.asarray(y, dtype=self.net.dtype)
        if x0.shape != y.shape:
            raise ValueError(f"x0 {x0.shape} and y {y.shape} differ in shape")
        B = x0.shape[0]
        t = self.draw_times(B)
        z = self.rng.standard_normal(x0.shape).astype(self.net.dtype)
        rate = lr(self.samples_seen, self.cfg)

        self.net.zero_grad()
        total, spec_term, l1_term = bridge_loss(
            self.net, x0, y, t, z, self.sched, self.stats, self.mode, self.cfg.alpha, self.stft_cfg
        )
        total.backward()
        gnorm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.net.params.values() if p.grad is not None))
        loss = float(total.data)
        if not (math.isfinite(loss) and math.isfinite(gnorm)):
            per = {k: float(np.linalg.norm(p.grad)) for k, p in self.net.params.items() if p.grad is not None}
            worst = sorted(per.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
            raise FloatingPointError(
                f"non-finite loss at step {self.step}: loss={loss}, t={np.round(t, 4).tolist()}, "
                f"grad_norm={gnorm}, largest parameter grads={worst}"
            )
        self.opt.step(rate)
        for p in self.net.mp_parameters():
            force_norm(p)
        self.net.zero_grad()

        state = self.net.state_dict()
        for tr in self.traces:
            tr.update(state)
        res = StepResult(loss, float(spec_term.data), float(l1_term.data), gnorm, t)
        self.history.append(
            {"step": self.step, "samples": self.samples_seen, "lr": rate,
             "loss_spec": res.loss_spec, "loss_l1": res.loss_l1, "grad_norm": gnorm}
        )
        self.step += 1
        self.samples_seen += B
        if self.store is not None and self.step % self.cfg.snapshot_every == 0:
            self.save_snapshot()
        return res

    def save_snapshot(self):
        self.store.add(self.step, "raw", self.net.state_dict())
        for tr in self.traces:
            self.store.add(self.step, tr.gamma, tr.value)

    def fit(self, n_steps: int | None = None, on_step=None):
        if self.data is None:
            raise ValueError("fit() needs training data")
        n_steps = self.cfg.total_steps if n_steps is None else n_steps
        frames = self.run.data.segment_frames
        for _ in range(n_steps):
            x0, y = self.data.sample(self.rng, self.cfg.batch_size, frames)
            res = self.training_step(x0, y)
            if on_step is not None:
                on_step(self, res)
        return self.history


def _net_cfg(run: RunConfig):
    import dataclasses

    return dataclasses.replace(run.net, seed=run.train.seed)


def log_csv(history) -> str:
    lines = [",".join(LOG_HEADER)]
    for row in history:
        cells = [str(row["step"]), str(row["samples"])] + [repr(float(row[h])) for h in LOG_HEADER[2:]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def resolve_stats(run: RunConfig, data: TrainingData) -> SignalStats:
    """Config-supplied statistics if present, else those measured on the training set."""
    return run.stats if run.stats is not None else data.stats


@dataclass
class TrainResult:
    out_dir: Path
    net: DenoiserNet
    stats: SignalStats
    history: list = field(default_factory=list)
    seconds: float = 0.0


def train(run: RunConfig, out_dir, progress_every: int = 0) -> TrainResult:
    """Full training run writing config, stats, log, snapshots and the final model to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(run.to_json())
    data = TrainingData.build(run.data, run.stft)
    stats = resolve_stats(run, data)
    store = SnapshotStore.create(out_dir)
    trainer = Trainer(run, stats, data, store)
    t0 = time.perf_counter()

    def report(tr, res):
        if progress_every and tr.step % progress_every == 0:
            log.info("step %d loss %.4f (spec %.4f, l1 %.4f) lr %.2e", tr.step, res.loss, res.loss_spec, res.loss_l1, lr(tr.samples_seen, tr.cfg))

    trainer.fit(on_step=report)
    seconds = time.perf_counter() - t0
    save_params(out_dir / "model.bin", trainer.net.state_dict())
    (out_dir / "train_log.csv").write_text(log_csv(trainer.history))
    stats_doc = {
        "sigma_x2": stats.sigma_x2,
        "sigma_n2": stats.sigma_n2,
        "measured_sigma_x2": data.stats.sigma_x2,
        "measured_sigma_n2": data.stats.sigma_n2,
        "steps": trainer.step,
        "samples": trainer.samples_seen,
    }
    (out_dir / "stats.json").write_text(json.dumps(stats_doc, indent=2, sort_keys=True) + "\n")
    return TrainResult(out_dir, trainer.net, stats, trainer.history, seconds)


def load_stats(path) -> SignalStats:
    doc = json.loads(Path(path).read_text())
    return SignalStats(float(doc["sigma_x2"]), float(doc["sigma_n2"]))
