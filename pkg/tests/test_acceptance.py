"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The last criterion trains the default toy configuration in both skip modes
(roughly 25 minutes each on one CPU core).
"""

import dataclasses
import time

import numpy as np
import pytest
from conftest import record_criterion
from scipy import integrate

from edm2se.cli import main
from edm2se.config import RunConfig, SamplerConfig, TrainConfig
from edm2se.ema import EmaTrace, reconstruct, reconstruct_profile, response_profile, snapshot_profile
from edm2se.evaluate import enhance_batch, enhancement_scores, held_out_mixtures
from edm2se.mpnet import DenoiserNet, NetConfig, grad_check, mp_add
from edm2se.mpnet import tensor as T
from edm2se.precond import SignalStats, SkipMode, f_target, precondition
from edm2se.sampler import enhance_spec
from edm2se.schedule import BridgeSchedule, sample_marginal, schedule_coefficients
from edm2se.signal import compress, decompress, istft, measured_snr, si_sdr, stft, synth_pair
from edm2se.trainer import Trainer, TrainingData, train

SCHED = BridgeSchedule()
STATS = SignalStats()


def verdict(number, name, ok, detail):
    record_criterion(number, name, bool(ok), detail)
    assert ok, detail


def test_criterion_1_schedule_exactness():
    t0 = time.perf_counter()
    ts = np.random.default_rng(100).uniform(0, 1, 100)
    worst = 0.0
    for t in ts:
        ref, _ = integrate.quad(lambda s: SCHED.c * SCHED.k ** (2 * s), 0.0, t, epsabs=0, epsrel=1e-13)
        worst = max(worst, abs(SCHED.var_fwd(t) - ref) / ref)
    c0, c1 = schedule_coefficients(SCHED, 0.0), schedule_coefficients(SCHED, 1.0)
    exact = c0.w_x == 1.0 and c1.w_y == 1.0 and c0.var_marg == 0.0 and c1.var_marg == 0.0
    secs = time.perf_counter() - t0
    verdict(1, "schedule exactness", worst < 1e-8 and exact and secs < 1.0, f"max rel error {worst:.1e}, boundaries exact={exact}, {secs:.2f} s")


def test_criterion_2_preconditioning_unit_variance():
    t0 = time.perf_counter()
    n = 100_000
    se = np.sqrt(2.0 / (n - 1))
    rng = np.random.default_rng(2)
    worst, lam_err = 0.0, 0.0
    for mode in SkipMode:
        for t in np.linspace(0.02, 0.98, 20):
            x0 = rng.normal(0, np.sqrt(STATS.sigma_x2), n)
            y = x0 + rng.normal(0, np.sqrt(STATS.sigma_n2), n)
            x_t = sample_marginal(SCHED, x0, y, t, rng.standard_normal(n))
            pre = precondition(SCHED, STATS, mode, t)
            for v in (np.var(pre.c_in * x_t), np.var(f_target(x0, x_t, pre))):
                worst = max(worst, abs(v - 1.0) / se)
            lam_err = max(lam_err, abs(pre.lam * pre.c_out**2 - 1.0))
    secs = time.perf_counter() - t0
    ok = worst < 3.0 and lam_err < 1e-12 and secs < 10.0
    verdict(2, "preconditioning unit variance", ok, f"max {worst:.2f} standard errors, lambda c_out^2 error {lam_err:.1e}, {secs:.2f} s")


def test_criterion_3_gaussian_oracle_sampler():
    t0 = time.perf_counter()
    k = STATS.sigma_x2 / (STATS.sigma_x2 + STATS.sigma_n2)
    v = STATS.sigma_x2 * STATS.sigma_n2 / (STATS.sigma_x2 + STATS.sigma_n2)

    def oracle(x_t, y, t):
        co = schedule_coefficients(SCHED, t)
        den = co.w_x**2 * v + co.var_marg
        gain = 0.0 if den == 0 else co.w_x * v / den
        return k * y + gain * (x_t - (co.w_x * k + co.w_y) * y)

    y = np.random.default_rng(3).normal(size=(2, 2, 16, 16))
    worst = 0.0
    for n_steps in (1, 10, 50):
        out = enhance_spec(y, oracle, SCHED, SamplerConfig(n_steps=n_steps))
        worst = max(worst, float(np.max(np.abs(out - k * y))))
    secs = time.perf_counter() - t0
    verdict(3, "gaussian oracle sampler", worst < 1e-10 and secs < 1.0, f"max abs error {worst:.1e}, {secs:.2f} s")


def test_criterion_4_gradient_correctness():
    t0 = time.perf_counter()
    net = DenoiserNet(NetConfig(widths=(8, 16), freq_bins=16, emb_dim=16, seed=11), dtype=np.float64)
    rng = np.random.default_rng(12)
    for p in net.params.values():
        if p.data.ndim == 0:
            p.data[...] = rng.normal(0, 0.5)
    x, c, tgt = (rng.standard_normal((2, 2, 16, 8)) for _ in range(3))
    t = np.array([0.2, 0.7])
    worst = grad_check(net, lambda n: T.square(n(x, c, t) - tgt), n_coords=200, seed=13)
    secs = time.perf_counter() - t0
    verdict(4, "gradient correctness", worst < 1e-4 and secs < 60.0, f"max rel error {worst:.1e} over 200 coordinates, {secs:.1f} s")


def test_criterion_5_magnitude_preservation():
    run = RunConfig(
        net=NetConfig(widths=(8, 16), emb_dim=16),
        data=dataclasses.replace(RunConfig().data, n_train=4, item_samples=1000, segment_frames=8),
        train=TrainConfig(batch_size=2, total_steps=5),
    )
    data = TrainingData.build(run.data, run.stft)
    tr = Trainer(run, data.stats, data)
    worst = [0.0]

    def after_step(trainer, res):
        for p in trainer.net.mp_parameters():
            norms = np.linalg.norm(p.data.reshape(p.data.shape[0], -1).astype(np.float64), axis=1)
            worst[0] = max(worst[0], float(np.max(np.abs(norms - np.sqrt(p.fan_in)) / np.sqrt(p.fan_in))))

    tr.fit(5, on_step=after_step)
    n = 100_000
    rng = np.random.default_rng(14)
    dev = 0.0
    for tau in (0.1, 0.5, 0.9):
        v = np.var(mp_add(rng.standard_normal(n), rng.standard_normal(n), np.log(tau / (1 - tau))))
        dev = max(dev, abs(v - 1.0) / np.sqrt(2.0 / (n - 1)))
    # float32 weights: the norm is held to 1e-6 relative to sqrt(fan_in)
    ok = worst[0] < 1e-6 and dev < 3.0
    verdict(5, "magnitude preservation", ok, f"max relative norm error {worst[0]:.1e} over 5 steps, mp_add {dev:.2f} standard errors")


class _Store:
    def __init__(self):
        self.records, self.values = [], {}

    def ema_records(self):
        return [r for r in self.records if not r.is_raw]

    def select(self):
        return list(self.records)

    def load(self, rec):
        return self.values[(rec.trace, rec.step)]


def test_criterion_6_ema_machinery():
    from edm2se.store import SnapshotRecord

    t0 = time.perf_counter()
    n = 1024
    i = np.arange(1, n + 1)
    theta = np.sin(i / 40.0) + i / 500.0
    gammas = (16.97, 6.94)
    traces = {g: EmaTrace(gamma=g) for g in gammas}
    store = _Store()
    for step in range(n):
        for g, tr in traces.items():
            tr.update({"p": np.array(theta[step])})
            if (step + 1) % 128 == 0:
                rec = SnapshotRecord(step + 1, g, "")
                store.records.append(rec)
                store.values[(g, step + 1)] = {"p": tr.value["p"].copy()}
    seq = max(abs(float(tr.value["p"]) - response_profile(n, g).weights @ theta) for g, tr in traces.items())
    rec = reconstruct(store, 0.05, n)
    exact = response_profile(n, rec.gamma).weights @ theta
    rel = abs(float(rec.params["p"]) - exact) / abs(exact)
    member = store.records[7]
    span = reconstruct_profile(store, snapshot_profile(member, n))
    span_err = abs(float(span.params["p"]) - float(store.values[(member.trace, member.step)]["p"]))
    secs = time.perf_counter() - t0
    ok = len(store.records) == 16 and seq < 1e-12 and rel < 1e-2 and span_err < 1e-10 and secs < 10.0
    verdict(6, "EMA machinery", ok, f"sequential {seq:.1e}, sigma_rel=0.05 rel error {rel:.1e}, in-span {span_err:.1e}, {secs:.2f} s")


def test_criterion_7_signal_chain():
    rng = np.random.default_rng(15)
    w = rng.standard_normal(8000)
    rt = np.max(np.abs(istft(stft(w), length=w.size) - w)) / np.max(np.abs(w))
    z = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    cr = np.max(np.abs(decompress(compress(z)) - z) / np.abs(z))
    s, e = rng.standard_normal(2000), rng.standard_normal(2000)
    e = s + 0.5 * e
    inv = max(abs(si_sdr(s, e) - si_sdr(s, a * e)) for a in (0.01, 3.0, 250.0))
    snr = max(abs(measured_snr(*synth_pair(seed, req)) - req) for seed, req in ((1, -5.0), (2, 0.0), (3, 5.0), (4, 20.0)))
    ok = rt < 1e-6 and cr < 1e-6 and inv < 1e-9 and snr < 0.01
    verdict(7, "signal chain", ok, f"stft {rt:.1e}, compression {cr:.1e}, si_sdr scale {inv:.1e} dB, snr {snr:.1e} dB")


# criterion 8 ---------------------------------------------------------------------------------


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = {}
    for mode in ("noise", "clean"):
        run = RunConfig(train=TrainConfig(skip_mode=mode))
        res = train(run, root / mode)
        out[mode] = (run, res)
    return out


@pytest.fixture(scope="session")
def test_mixtures():
    return held_out_mixtures(RunConfig(), 32, 5.0, 4000)


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["noise", "clean"])
def test_criterion_8_end_to_end(trained, test_mixtures, mode):
    run, res = trained[mode]
    sc = enhancement_scores(res.net, run, res.stats, test_mixtures)
    ok = sc["improvement"] > 3.0 and res.seconds < 1800
    verdict(
        8, f"end-to-end ({mode} mode)", ok,
        f"SI-SDR {sc['si_sdr_in']:.2f} -> {sc['si_sdr']:.2f} dB, improvement {sc['improvement']:.2f} dB, trained in {res.seconds / 60:.1f} min",
    )


@pytest.mark.slow
def test_criterion_8_ema_sweep(trained, tmp_path):
    store_dir = trained["noise"][1].out_dir
    out = tmp_path / "sweep.csv"
    code = main(["ema-sweep", "--store", str(store_dir), "--grid", "0.001,0.05,0.1,0.15,0.2,0.25", "--out", str(out)])
    rows = [line.split(",") for line in out.read_text().strip().splitlines()[1:]] if code == 0 else []
    finite = all(np.isfinite(float(v)) for r in rows for v in r)
    ok = code == 0 and len(rows) == 6 and finite
    verdict(8, "ema-sweep over 6 sigma_rel values", ok, f"exit {code}, {len(rows)} rows, all finite={finite}")


@pytest.mark.slow
def test_sampler_refinement_stability(trained, test_mixtures):
    run, res = trained["noise"]
    noisy = test_mixtures.noisy[:8]
    a = enhance_batch(res.net, run, res.stats, noisy, n_steps=50)
    b = enhance_batch(res.net, run, res.stats, noisy, n_steps=100)
    rel = float(np.linalg.norm(a - b) / np.linalg.norm(b))
    assert rel < 0.05, f"50 vs 100 steps differ by {rel:.3f}"

