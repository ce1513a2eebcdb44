"""Invariant suite behind ``edm2se selftest``.

Each check returns ``(passed, detail)``. Checks that need the schedule build
it from the supplied constants, so a corrupted constant surfaces as a
failure of the schedule checks rather than a crash.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .config import SamplerConfig
from .ema import EmaTrace, reconstruct, reconstruct_profile, response_profile, snapshot_profile
from .mpnet import DenoiserNet, NetConfig, grad_check, mp_add
from .mpnet import tensor as T
from .precond import SignalStats, SkipMode, f_target, precondition
from .sampler import enhance_spec
from .schedule import BridgeSchedule, sample_marginal, schedule_coefficients
from .signal import compress, decompress, istft, measured_snr, si_sdr, stft, synth_pair
from .store import SnapshotRecord


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def check_schedule_quadrature(sched: BridgeSchedule):
    rng = np.random.default_rng(1)
    ts = rng.uniform(0.0, 1.0, 100)
    worst = 0.0
    for t in ts:
        ref, _ = integrate.quad(lambda s: sched.g(s) ** 2, 0.0, t, epsabs=0, epsrel=1e-13)
        worst = max(worst, abs(sched.var_fwd(t) - ref) / ref)
    return worst < 1e-8, f"max relative error vs quadrature {worst:.2e}"


def check_schedule_boundaries(sched: BridgeSchedule):
    c0 = schedule_coefficients(sched, 0.0)
    c1 = schedule_coefficients(sched, 1.0)
    ok = c0.w_x == 1.0 and c1.w_y == 1.0 and c0.var_marg == 0.0 and c1.var_marg == 0.0
    ts = np.linspace(0, 1, 101)
    co = schedule_coefficients(sched, ts)
    ok = ok and np.allclose(co.w_x + co.w_y, 1.0, atol=1e-14) and np.all(co.var_marg >= 0)
    return bool(ok), f"w_x(0)={c0.w_x}, w_y(1)={c1.w_y}, var(0)={c0.var_marg}, var(1)={c1.var_marg}"


def check_precond_variance(sched: BridgeSchedule, n: int = 100_000):
    stats = SignalStats()
    rng = np.random.default_rng(2)
    ts = np.linspace(0.02, 0.98, 20)
    worst = 0.0
    for mode in SkipMode:
        for t in ts:
            x0 = rng.normal(0, np.sqrt(stats.sigma_x2), n)
            y = x0 + rng.normal(0, np.sqrt(stats.sigma_n2), n)
            x_t = sample_marginal(sched, x0, y, t, rng.standard_normal(n))
            pre = precondition(sched, stats, mode, t)
            for v in (np.var(pre.c_in * x_t), np.var(f_target(x0, x_t, pre))):
                # standard error of a sample variance of a Gaussian with variance 1
                worst = max(worst, abs(v - 1.0) / np.sqrt(2.0 / (n - 1)))
            if abs(pre.lam * pre.c_out**2 - 1.0) > 1e-12:
                return False, f"lambda * c_out^2 != 1 at t={t}"
    return worst < 3.0, f"max deviation {worst:.2f} standard errors"


def _oracle_denoiser(sched, sx2, sn2):
    k = sx2 / (sx2 + sn2)
    v = sx2 * sn2 / (sx2 + sn2)

    def fn(x_t, y, t):
        co = schedule_coefficients(sched, t)
        den = co.w_x**2 * v + co.var_marg
        gain = 0.0 if den == 0 else co.w_x * v / den
        return k * y + gain * (x_t - co.w_x * k * y - co.w_y * y)

    return fn


def check_sampler_oracle(sched: BridgeSchedule):
    stats = SignalStats()
    den = _oracle_denoiser(sched, stats.sigma_x2, stats.sigma_n2)
    y = np.random.default_rng(3).normal(0, 1, (2, 2, 8, 8))
    want = stats.sigma_x2 / (stats.sigma_x2 + stats.sigma_n2) * y
    worst = 0.0
    for n_steps in (1, 10, 50):
        out = enhance_spec(y, den, sched, SamplerConfig(n_steps=n_steps, t_eps=sched.t_eps))
        worst = max(worst, float(np.max(np.abs(out - want))))
    return worst < 1e-10, f"max abs deviation from posterior mean {worst:.2e}"


def check_gradients():
    net = DenoiserNet(NetConfig(widths=(8, 16), freq_bins=8, emb_dim=16, seed=5), dtype=np.float64)
    rng = np.random.default_rng(4)
    for name, p in net.params.items():
        if p.data.ndim == 0:
            p.data[...] = rng.normal(0, 0.5)
    x = rng.standard_normal((2, 2, 8, 8))
    c = rng.standard_normal((2, 2, 8, 8))
    tgt = rng.standard_normal((2, 2, 8, 8))
    t = np.array([0.3, 0.8])

    def loss(n):
        return T.square(n(x, c, t) - tgt)

    worst = grad_check(net, loss, n_coords=200)
    return worst < 1e-4, f"max relative error {worst:.2e} over 200 coordinates"


def check_magnitude_preservation():
    from .mpnet.layers import force_norm

    net = DenoiserNet(NetConfig(widths=(8, 16), freq_bins=8, emb_dim=16, seed=6))
    rng = np.random.default_rng(5)
    for p in net.mp_parameters():
        p.data += rng.normal(0, 0.3, p.data.shape).astype(p.data.dtype)
        force_norm(p)
    worst = 0.0
    for p in net.mp_parameters():
        norms = np.linalg.norm(p.data.reshape(p.data.shape[0], -1).astype(np.float64), axis=1)
        worst = max(worst, float(np.max(np.abs(norms - np.sqrt(p.fan_in)))))
    n = 100_000
    dev = 0.0
    for tau in (0.1, 0.5, 0.9):
        raw = np.log(tau / (1 - tau))
        v = np.var(mp_add(rng.standard_normal(n), rng.standard_normal(n), raw))
        dev = max(dev, abs(v - 1) / np.sqrt(2.0 / (n - 1)))
    return worst < 1e-6 and dev < 3.0, f"weight norm error {worst:.1e}; mp_add variance {dev:.2f} standard errors"


class _MemoryStore:
    def __init__(self, records, values):
        self.records = records
        self.values = values

    def ema_records(self):
        return [r for r in self.records if not r.is_raw]

    def select(self):
        return list(self.records)

    def load(self, rec):
        return self.values[(rec.trace, rec.step)]


def check_ema():
    rng = np.random.default_rng(6)
    n = 1024
    theta = np.cumsum(rng.standard_normal(n))
    gammas = (16.97, 6.94)
    seq_err = 0.0
    records, values, traces = [], {}, {g: EmaTrace(gamma=g) for g in gammas}
    for i in range(n):
        for g, tr in traces.items():
            tr.update({"p": np.array(theta[i])})
            if (i + 1) % 64 == 0:
                records.append(SnapshotRecord(i + 1, g, ""))
                values[(g, i + 1)] = {"p": tr.value["p"].copy()}
    for g, tr in traces.items():
        seq_err = max(seq_err, abs(float(tr.value["p"]) - response_profile(n, g).weights @ theta))
    store = _MemoryStore(records, values)
    # exact full-history power-law EMA at sigma_rel = 0.05
    rec = reconstruct(store, 0.05, n)
    exact = response_profile(n, rec.gamma).weights @ theta
    rel = abs(float(rec.params["p"]) - exact) / abs(exact)
    member = records[5]
    span = reconstruct_profile(store, snapshot_profile(member, n))
    span_err = abs(float(span.params["p"]) - float(values[(member.trace, member.step)]["p"]))
    ok = seq_err < 1e-12 * max(1.0, np.max(np.abs(theta))) and rel < 1e-2 and span_err < 1e-10
    return bool(ok), f"sequential vs profile {seq_err:.1e}; reconstruction relative error {rel:.1e}; in-span {span_err:.1e}"


def check_signal_chain():
    rng = np.random.default_rng(7)
    w = rng.standard_normal(4096)
    rt = np.max(np.abs(istft(stft(w), length=w.size) - w)) / np.max(np.abs(w))
    z = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    cr = np.max(np.abs(decompress(compress(z)) - z) / np.abs(z))
    s = rng.standard_normal(1000)
    e = s + 0.3 * rng.standard_normal(1000)
    inv = abs(si_sdr(s, e) - si_sdr(s, 7.5 * e))
    clean, noisy = synth_pair(11, 5.0)
    snr_err = abs(measured_snr(clean, noisy) - 5.0)
    ok = rt < 1e-6 and cr < 1e-6 and inv < 1e-9 and snr_err < 0.01
    return bool(ok), f"stft {rt:.1e}, compression {cr:.1e}, si_sdr scale {inv:.1e}, snr {snr_err:.1e} dB"


def run_checks(schedule_c: float = 0.4, schedule_k: float = 2.6, t_eps: float = 0.02) -> list[CheckResult]:
    def sched():
        return BridgeSchedule(c=schedule_c, k=schedule_k, t_eps=t_eps)

    checks = [
        ("schedule_quadrature", lambda: check_schedule_quadrature(sched())),
        ("schedule_boundaries", lambda: check_schedule_boundaries(sched())),
        ("precond_unit_variance", lambda: check_precond_variance(sched())),
        ("sampler_gaussian_oracle", lambda: check_sampler_oracle(sched())),
        ("gradient_check", check_gradients),
        ("magnitude_preservation", check_magnitude_preservation),
        ("ema_profiles", check_ema),
        ("signal_chain", check_signal_chain),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - reported as a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
