import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edm2se.signal import (
    StftConfig,
    compress,
    compressed_stats,
    decompress,
    istft,
    istft_adjoint,
    measured_snr,
    model_to_wav,
    read_wav,
    si_sdr,
    stft,
    synth_pair,
    wav_to_model,
    write_wav,
)

CFG = StftConfig()


def test_compress_examples():
    np.testing.assert_allclose(compress(np.array([[4.0 + 0j]]))[..., 0, 0, 0], 0.3)
    np.testing.assert_array_equal(compress(np.zeros((2, 3), complex)), 0)
    np.testing.assert_array_equal(decompress(np.zeros((2, 2, 3))), 0)


def test_compress_round_trip():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
    np.testing.assert_allclose(decompress(compress(z)), z, rtol=1e-6)
    # phase is preserved
    np.testing.assert_allclose(np.angle(decompress(compress(z))), np.angle(z), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(4 * 128, 3000), seed=st.integers(0, 2**16))
def test_stft_round_trip(n, seed):
    w = np.random.default_rng(seed).standard_normal(n)
    out = istft(stft(w, CFG), CFG, length=n)
    assert out.shape == w.shape
    assert np.max(np.abs(out - w)) <= 1e-6 * np.max(np.abs(w))


def test_stft_white_noise_4096():
    w = np.random.default_rng(1).standard_normal(4096)
    assert np.max(np.abs(istft(stft(w), length=4096) - w)) < 1e-5


def test_stft_bin_centered_sinusoid():
    n = np.arange(2048)
    w = np.cos(2 * np.pi * 10 * n / CFG.n_fft)
    e = np.abs(stft(w, CFG))[:, 4:-4] ** 2  # interior frames, away from the zero padding
    # a periodic Hann window splits a bin-centred tone 1/4 : 1/2 : 1/4 in amplitude,
    # so the centre row holds exactly 2/3 of the energy and the main lobe all of it
    assert e[10].sum() / e.sum() == pytest.approx(2 / 3, rel=1e-9)
    assert e[9:12].sum() / e.sum() >= 0.9


def test_stft_zero_and_short():
    np.testing.assert_array_equal(stft(np.zeros(1000)), 0)
    with pytest.raises(ValueError):
        stft(np.zeros(100))


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(n_fft=128, hop=48)


def test_istft_adjoint_dot_product():
    rng = np.random.default_rng(2)
    n_frames = 20
    s = rng.standard_normal((65, n_frames)) + 1j * rng.standard_normal((65, n_frames))
    s[0].imag = 0
    s[-1].imag = 0
    g = rng.standard_normal(32 * (n_frames - 1))
    lhs = np.dot(g, istft(s, CFG))
    adj = istft_adjoint(g, CFG, n_frames)
    rhs = np.sum(adj.real * s.real + adj.imag * s.imag)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_model_space_round_trip():
    clean, _ = synth_pair(3, 5.0, n_samples=2000)
    spec = wav_to_model(clean, CFG)
    assert spec.shape == (2, 64, 1 + 2000 // 32)
    # the Nyquist bin carries no energy for these signals, so the loss is negligible
    assert si_sdr(clean, model_to_wav(spec, CFG, 2000)) > 40


def test_si_sdr_examples():
    s = np.random.default_rng(3).standard_normal(1000)
    assert si_sdr(s, 2 * s) == 60.0
    assert si_sdr(np.array([1.0, 0.0]), np.array([1.0, 1.0]), zero_mean=False) == pytest.approx(0.0, abs=1e-12)
    e = np.random.default_rng(4).standard_normal(1000)
    e -= np.dot(e - e.mean(), s - s.mean()) / np.dot(s - s.mean(), s - s.mean()) * (s - s.mean())
    assert si_sdr(s, e) < -40
    with pytest.raises(ValueError):
        si_sdr(np.zeros(10), s[:10])
    with pytest.raises(ValueError):
        si_sdr(s, s[:10])


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_si_sdr_scale_invariance(a, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(500)
    e = s + 0.5 * rng.standard_normal(500)
    assert si_sdr(s, a * e) == pytest.approx(si_sdr(s, e), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(snr=st.floats(-10, 30), seed=st.integers(0, 10_000))
def test_synth_pair_snr(snr, seed):
    clean, noisy = synth_pair(seed, snr)
    assert abs(measured_snr(clean, noisy) - snr) < 0.01


def test_synth_pair_deterministic_and_limits():
    a = synth_pair(7, 5.0)
    b = synth_pair(7, 5.0)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    clean, noisy = synth_pair(7, 60.0)
    assert si_sdr(clean, noisy) == pytest.approx(60, abs=0.5)
    with pytest.raises(ValueError):
        synth_pair(7, float("inf"))


def test_compressed_stats_stable_across_seeds():
    from edm2se.config import DataConfig
    from edm2se.trainer import TrainingData

    vals = [TrainingData.build(DataConfig(seed=s), CFG).stats for s in (1, 2)]
    for v in vals:
        assert v.sigma_x2 > 0 and v.sigma_n2 > 0
    assert vals[0].sigma_x2 == pytest.approx(vals[1].sigma_x2, rel=0.05)
    assert vals[0].sigma_n2 == pytest.approx(vals[1].sigma_n2, rel=0.05)


def test_compressed_stats_pooled_variance():
    x = np.array([[1.0, -1.0], [3.0, -3.0]])
    assert compressed_stats(x, 2 * x) == (5.0, 20.0)


@pytest.mark.parametrize("fmt,tol", [("float32", 1e-7), ("pcm16", 1 / 32768)])
def test_wav_round_trip(tmp_path, fmt, tol):
    w = 0.5 * np.sin(np.arange(800) / 7)
    path = tmp_path / "a.wav"
    write_wav(path, w, 8000, fmt=fmt)
    back, sr = read_wav(path)
    assert sr == 8000
    np.testing.assert_allclose(back, w, atol=tol)
