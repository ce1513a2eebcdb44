import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edm2se.mpnet import DenoiserNet, NetConfig, Parameter, Tensor, force_norm, grad_check, mp_add, no_grad, normalize_weight
from edm2se.mpnet import tensor as T
from edm2se.mpnet.layers import mp_cat, mp_silu, mp_sum

SMALL = NetConfig(widths=(8, 16), freq_bins=8, emb_dim=16, seed=3)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_normalize_weight_examples():
    np.testing.assert_allclose(normalize_weight([3.0, 4.0], eps=0), [0.6, 0.8])
    np.testing.assert_array_equal(normalize_weight([0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_allclose(normalize_weight([1.0, 1.0, 1.0, 1.0], eps=0), 0.5)


def test_force_norm_examples():
    p = Parameter(np.array([[3.0, 4.0]]), mp_normalized=True)
    force_norm(p)
    np.testing.assert_allclose(p.data, [[0.8485, 1.1314]], atol=1e-4)
    assert np.linalg.norm(p.data) == pytest.approx(math.sqrt(2))
    before = p.data.copy()
    np.testing.assert_allclose(force_norm(p).data, before, rtol=1e-15)
    z = Parameter(np.zeros((1, 2)), mp_normalized=True)
    np.testing.assert_array_equal(force_norm(z).data, 0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 3)),
                  elements=st.floats(-1e3, 1e3)))
def test_force_norm_property(w):
    p = force_norm(Parameter(w.copy(), mp_normalized=True))
    norms = np.linalg.norm(p.data.reshape(p.data.shape[0], -1), axis=1)
    orig = np.linalg.norm(w.reshape(w.shape[0], -1), axis=1)
    target = math.sqrt(p.fan_in)
    for n_new, n_old in zip(norms, orig):
        if n_old > 1e-150:
            assert n_new == pytest.approx(target, rel=1e-6)


def test_mp_add_examples():
    a, b = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    np.testing.assert_allclose(mp_add(a, b, 0.0), (a + b) / math.sqrt(2))
    np.testing.assert_allclose(mp_add(a, b, -40.0), a, atol=1e-12)
    with pytest.raises(ValueError):
        mp_add(np.zeros(2), np.zeros(3), 0.0)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
def test_mp_add_unit_variance(tau):
    rng = np.random.default_rng(int(tau * 10))
    n = 100_000
    out = mp_add(rng.standard_normal(n), rng.standard_normal(n), math.log(tau / (1 - tau)))
    assert abs(np.var(out) - 1) < 3 * math.sqrt(2 / (n - 1))


def test_mp_add_gradient_closed_form():
    rng = np.random.default_rng(0)
    a, b, g = rng.standard_normal((3, 6))
    raw = 0.7
    at, bt, rt = Tensor(a, True), Tensor(b, True), Tensor(np.array(raw), True)
    T.sum_all(mp_add(at, bt, rt) * g).backward()
    f = lambda r: float(np.sum(mp_add(a, b, float(r)) * g))
    num = (f(raw + 1e-6) - f(raw - 1e-6)) / 2e-6
    assert float(rt.grad) == pytest.approx(num, rel=1e-6)
    tau = 1 / (1 + math.exp(-raw))
    s = math.sqrt((1 - tau) ** 2 + tau**2)
    np.testing.assert_allclose(at.grad, g * (1 - tau) / s, rtol=1e-12)


def test_mp_helpers_keep_magnitude():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((4000, 8)))
    b = Tensor(rng.standard_normal((4000, 24)))
    assert np.var(mp_cat(a, b).data) == pytest.approx(1, abs=0.05)
    c = Tensor(rng.standard_normal((4000, 8)))
    assert np.var(mp_sum(a, c, 0.3).data) == pytest.approx(1, abs=0.05)
    # the gain normalizes the second moment (silu has a nonzero mean)
    assert np.mean(np.square(mp_silu(Tensor(rng.standard_normal(200_000))).data)) == pytest.approx(1, abs=0.02)


OPS = {
    "conv3": lambda x, w: T.conv2d(x, w),
    "pool": lambda x, w: T.avg_pool2(x) * 1.5,
    "up": lambda x, w: T.upsample2(x),
    "pixnorm": lambda x, w: T.pixel_norm(x),
    "silu": lambda x, w: T.silu(x),
    "normw": lambda x, w: T.conv2d(x, normalize_weight(w)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal((5, 3, 3, 3))
    g = None

    def f(xa, wa):
        out = OPS[name](Tensor(xa), Tensor(wa))
        nonlocal g
        if g is None:
            g = np.random.default_rng(9).standard_normal(out.shape)
        return float(np.sum(out.data * g))

    f(x, w)
    xt, wt = Tensor(x, True), Tensor(w, True)
    T.sum_all(OPS[name](xt, wt) * g).backward()
    np.testing.assert_allclose(xt.grad, numeric_grad(lambda v: f(v, w), x), rtol=1e-6, atol=1e-8)
    if wt.grad is not None:
        np.testing.assert_allclose(wt.grad, numeric_grad(lambda v: f(x, v), w), rtol=1e-6, atol=1e-8)


def test_net_gradient_check():
    net = DenoiserNet(SMALL, dtype=np.float64)
    rng = np.random.default_rng(4)
    for p in net.params.values():
        if p.data.ndim == 0:
            p.data[...] = rng.normal(0, 0.5)
    x, c, tgt = rng.standard_normal((3, 2, 2, 8, 8))
    t = np.array([0.2, 0.9])
    worst = grad_check(net, lambda n: T.square(n(x, c, t) - tgt), n_coords=200)
    assert worst < 1e-4


def test_constant_loss_has_zero_gradient():
    net = DenoiserNet(SMALL, dtype=np.float64)
    out = net(np.ones((1, 2, 8, 8)), np.ones((1, 2, 8, 8)), 0.5)
    T.sum_all(out * 0.0).backward()
    assert all(p.grad is None or not np.any(p.grad) for p in net.params.values())


def test_init_activation_scale():
    net = DenoiserNet(NetConfig())
    rng = np.random.default_rng(5)
    rec = []
    with no_grad():
        net(rng.standard_normal((2, 2, 64, 16)), rng.standard_normal((2, 2, 64, 16)), np.array([0.3, 0.7]), record=rec)
    stds = [s for _, s in rec]
    assert len(stds) == 8
    assert all(0.5 <= s <= 2.0 for s in stds), rec


def test_forward_determinism_and_zero_input():
    net = DenoiserNet(SMALL)
    rng = np.random.default_rng(6)
    x, c = rng.standard_normal((2, 3, 2, 8, 8)).astype(np.float32)
    with no_grad():
        a = net(x, c, 0.4).data
        b = net(x, c, 0.4).data
        z = net(np.zeros_like(x), np.zeros_like(c), 0.4).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
    assert np.all(np.isfinite(z))


def test_weight_rescaling_invariance():
    cfg = NetConfig(widths=(8, 16), freq_bins=8, emb_dim=16, seed=3, mp_eps=0.0)
    net = DenoiserNet(cfg, dtype=np.float64)
    rng = np.random.default_rng(7)
    for p in net.params.values():
        if p.data.ndim == 0:
            p.data[...] = 0.5
    x, c = rng.standard_normal((2, 2, 2, 8, 8))
    ref = net(x, c, 0.3).data
    for p in net.mp_parameters():
        p.data = p.data * rng.uniform(0.1, 10.0, size=(p.data.shape[0],) + (1,) * (p.data.ndim - 1))
    np.testing.assert_allclose(net(x, c, 0.3).data, ref, rtol=1e-10, atol=1e-12)


def test_bad_shapes():
    with pytest.raises(ValueError):
        NetConfig(freq_bins=63)
    net = DenoiserNet(SMALL)
    with pytest.raises(ValueError):
        net(np.zeros((1, 2, 8, 7)), np.zeros((1, 2, 8, 7)), 0.5)
    with pytest.raises(ValueError):
        net(np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 8, 6)), 0.5)


def test_state_dict_round_trip():
    a, b = DenoiserNet(SMALL), DenoiserNet(NetConfig(widths=(8, 16), freq_bins=8, emb_dim=16, seed=4))
    b.load_state_dict(a.state_dict())
    x = np.ones((1, 2, 8, 8), np.float32)
    with no_grad():
        np.testing.assert_array_equal(a(x, x, 0.5).data, DenoiserNet(SMALL)(x, x, 0.5).data)
    with pytest.raises(KeyError):
        a.load_state_dict({})
