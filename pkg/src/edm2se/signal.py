"""STFT/iSTFT, amplitude compression, SI-SDR, synthetic mixtures and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
from scipy.interpolate import PchipInterpolator

COMPRESS_GAIN = 0.15
COMPRESS_EXP = 0.5
SI_SDR_CLAMP = 60.0


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 128
    hop: int = 32
    sample_rate: int = 8000
    # noisy inputs are scaled to this RMS before the transform (0 disables);
    # it sets where the compressed spectra sit relative to the bridge noise
    input_rms: float = 16.0

    def __post_init__(self):
        if self.input_rms < 0:
            raise ValueError("input_rms must be >= 0")
        if self.n_fft <= 0 or self.hop <= 0 or self.n_fft % self.hop:
            raise ValueError(f"hop ({self.hop}) must divide the window length ({self.n_fft})")
        wsq = self.window**2
        overlap = wsq.reshape(-1, self.hop).sum(axis=0)
        if overlap.min() < 1e-10:
            raise ValueError("window/hop pair violates the overlap-add reconstruction condition")

    @property
    def window(self) -> np.ndarray:
        return scipy.signal.get_window("hann", self.n_fft, fftbins=True)

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


def stft(wav, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Centered, zero-padded STFT; [..., N] -> complex [..., F, T]."""
    wav = np.asarray(wav, dtype=np.float64)
    n = wav.shape[-1]
    if n < cfg.n_fft:
        raise ValueError(f"signal of {n} samples is shorter than one window ({cfg.n_fft})")
    pad = cfg.n_fft // 2
    padded = np.pad(wav, [(0, 0)] * (wav.ndim - 1) + [(pad, pad)])
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft, axis=-1)[..., :: cfg.hop, :]
    frames = frames[..., : cfg.n_frames(n), :]
    spec = np.fft.rfft(frames * cfg.window, axis=-1)
    return np.swapaxes(spec, -1, -2)


def _ola_norm(cfg: StftConfig, n_frames: int) -> np.ndarray:
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    wsq = np.zeros(total)
    w2 = cfg.window**2
    for j in range(n_frames):
        wsq[j * cfg.hop : j * cfg.hop + cfg.n_fft] += w2
    return wsq


def istft(spec, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; complex [..., F, T] -> [..., N]."""
    spec = np.asarray(spec)
    n_frames = spec.shape[-1]
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=cfg.n_fft, axis=-1) * cfg.window
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    out = np.zeros(spec.shape[:-2] + (total,))
    for j in range(n_frames):
        out[..., j * cfg.hop : j * cfg.hop + cfg.n_fft] += frames[..., j, :]
    wsq = _ola_norm(cfg, n_frames)
    out = out / np.where(wsq > 1e-10, wsq, 1.0)
    pad = cfg.n_fft // 2
    if length is None:
        length = cfg.hop * (n_frames - 1)
    out = out[..., pad : pad + length]
    if out.shape[-1] < length:
        out = np.pad(out, [(0, 0)] * (out.ndim - 1) + [(0, length - out.shape[-1])])
    return out


def istft_adjoint(wav_grad, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Adjoint of ``istft`` (as a real-linear map from (Re, Im) to samples).

    Returns the gradient w.r.t. the complex spectrum packed as Re + i*Im, so
    that d<g, istft(S)>/dRe = out.real and d/dIm = out.imag.
    """
    g = np.asarray(wav_grad, dtype=np.float64)
    length = g.shape[-1]
    total = cfg.n_fft + cfg.hop * (n_frames - 1)
    pad = cfg.n_fft // 2
    full = np.zeros(g.shape[:-1] + (total,))
    take = min(length, total - pad)
    full[..., pad : pad + take] = g[..., :take]
    wsq = _ola_norm(cfg, n_frames)
    full = full / np.where(wsq > 1e-10, wsq, 1.0)
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.n_fft)[None, :]
    frames = full[..., idx] * cfg.window
    # adjoint of irfft(n): non-edge bins appear twice in the real signal
    mult = np.full(cfg.n_freq, 2.0)
    mult[0] = 1.0
    if cfg.n_fft % 2 == 0:
        mult[-1] = 1.0
    spec = np.fft.rfft(frames, axis=-1) * (mult / cfg.n_fft)
    return np.swapaxes(spec, -1, -2)


def compress(spec) -> np.ndarray:
    """0.15 |x|^0.5 e^{i angle x}, returned as real/imag channels [..., 2, F, T]."""
    spec = np.asarray(spec)
    mag = np.abs(spec)
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = COMPRESS_GAIN * mag[nz] ** COMPRESS_EXP / mag[nz]
    c = spec * scale
    return np.stack([c.real, c.imag], axis=-3)


def decompress(cspec) -> np.ndarray:
    """Inverse of :func:`compress`; [..., 2, F, T] real -> complex [..., F, T]."""
    cspec = np.asarray(cspec)
    z = cspec[..., 0, :, :] + 1j * cspec[..., 1, :, :]
    mag = np.abs(z)
    # |out| = (|z| / 0.15) ** 2 with the phase of z
    return z * (mag ** (1.0 / COMPRESS_EXP - 1.0)) / COMPRESS_GAIN ** (1.0 / COMPRESS_EXP)


def level_gain(noisy, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Per-item gain [..., 1] bringing ``noisy`` to ``cfg.input_rms`` (ones when disabled or silent)."""
    noisy = np.asarray(noisy, dtype=np.float64)
    rms = np.sqrt(np.mean(noisy**2, axis=-1, keepdims=True))
    if cfg.input_rms == 0:
        return np.ones_like(rms)
    return np.where(rms > 0, cfg.input_rms / np.where(rms > 0, rms, 1.0), 1.0)


def wav_to_model(wav, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Waveform -> compressed spectrum without the Nyquist bin, [..., 2, F-1, T]."""
    return compress(stft(wav, cfg))[..., :-1, :]


def model_to_wav(cspec, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Inverse of :func:`wav_to_model`; the dropped Nyquist bin is restored as zero."""
    cspec = np.asarray(cspec)
    if cspec.shape[-2] != cfg.n_freq - 1:
        raise ValueError(f"expected {cfg.n_freq - 1} frequency bins, got {cspec.shape[-2]}")
    full = np.concatenate([cspec, np.zeros(cspec.shape[:-2] + (1, cspec.shape[-1]))], axis=-2)
    return istft(decompress(full), cfg, length)


def si_sdr(reference, estimate, zero_mean=True) -> float:
    """Scale-invariant SDR in dB, clamped to +-60."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {e.shape}")
    if zero_mean:
        s = s - s.mean()
        e = e - e.mean()
    ref_energy = np.dot(s, s)
    if ref_energy <= 0:
        raise ValueError("reference signal has zero energy")
    alpha = np.dot(e, s) / ref_energy
    target = alpha * s
    noise = target - e
    num = np.dot(target, target)
    den = np.dot(noise, noise)
    if den == 0:
        return SI_SDR_CLAMP
    if num == 0:
        return -SI_SDR_CLAMP
    return float(np.clip(10 * np.log10(num / den), -SI_SDR_CLAMP, SI_SDR_CLAMP))


# synthetic data ---------------------------------------------------------------


def synth_clean(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    f0 = rng.uniform(80.0, 300.0)
    n_harm = int(rng.integers(3, 7))
    clean = np.zeros(n_samples)
    for h in range(1, n_harm + 1):
        if h * f0 >= 0.45 * sample_rate:
            break
        amp = rng.uniform(0.3, 1.0) / h
        clean += amp * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    knot_step = 0.1
    n_knots = max(int(np.ceil(t[-1] / knot_step)) + 2, 2)
    knots_t = np.arange(n_knots) * knot_step
    envelope = PchipInterpolator(knots_t, rng.uniform(0.1, 1.0, size=n_knots))(t)
    clean *= envelope
    return 0.1 * clean / np.sqrt(np.mean(clean**2) + 1e-12)


def synth_noise(rng: np.random.Generator, n_samples: int, sample_rate: int) -> np.ndarray:
    cutoff = rng.uniform(800.0, 3000.0)
    sos = scipy.signal.butter(2, cutoff, btype="low", fs=sample_rate, output="sos")
    white = rng.standard_normal(n_samples + 256)
    return scipy.signal.sosfilt(sos, white)[256:]


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale ``noise`` so the clean/noise energy ratio equals ``snr_db``; returns (noisy, scaled noise)."""
    e_clean = np.dot(clean, clean)
    e_noise = np.dot(noise, noise)
    scaled = noise * np.sqrt(e_clean / (e_noise * 10 ** (snr_db / 10)))
    return clean + scaled, scaled


def synth_pair(seed, snr_db: float, n_samples: int = 8000, sample_rate: int = 8000):
    """Harmonic clean signal with a smooth envelope plus low-passed noise at ``snr_db``.

    ``seed`` may be an int or a sequence of ints. Returns ``(clean, noisy)``.
    """
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = np.random.default_rng(seed)
    clean = synth_clean(rng, n_samples, sample_rate)
    noise = synth_noise(rng, n_samples, sample_rate)
    noisy, _ = mix_at_snr(clean, noise, snr_db)
    return clean, noisy


def measured_snr(clean, noisy) -> float:
    noise = np.asarray(noisy) - np.asarray(clean)
    return float(10 * np.log10(np.dot(clean, clean) / np.dot(noise, noise)))


def compressed_stats(clean_specs, noise_specs) -> tuple[float, float]:
    """Pooled variance of compressed clean and noise spectra (real and imag channels together)."""
    return float(np.var(np.asarray(clean_specs))), float(np.var(np.asarray(noise_specs)))


# WAV ------------------------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono PCM16 or float32 WAV -> (float64 samples in [-1, 1], sample rate)."""
    sr, data = scipy.io.wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0, sr
    if data.dtype == np.float32:
        return data.astype(np.float64), sr
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, samples, sample_rate: int, fmt: str = "float32"):
    samples = np.asarray(samples, dtype=np.float64)
    if fmt == "float32":
        data = samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    scipy.io.wavfile.write(path, sample_rate, data)


def read_wav_dir(directory) -> list[tuple[str, np.ndarray, int]]:
    """All ``*.wav`` files of a directory, sorted by name."""
    return [(p.name, *read_wav(p)) for p in sorted(Path(directory).glob("*.wav"))]
