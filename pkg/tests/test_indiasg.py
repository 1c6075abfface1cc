import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specsplat.indiasg import (
    N_LOBES,
    SHARPNESS_CAP,
    IndiAsg,
    PredictorNet,
    asg_backward,
    asg_eval,
    build_lobe_bank,
    encode_inputs,
    feature_dim,
    ide_attenuation,
    ide_bands,
    integrated_directional_encoding,
    params_from_raw,
    positional_encoding,
    predict_lobe_params,
    rotation_to_normal,
    to_tangent_space,
)

from .conftest import unit

coord = st.floats(-1.0, 1.0, allow_nan=False)
direction = st.tuples(coord, coord, coord).filter(lambda v: np.linalg.norm(v) > 1e-2)


@pytest.fixture(scope="module")
def bank():
    return build_lobe_bank()


def one_lobe(j, a=(1.0, 1.0, 1.0), lam=0.0, mu=0.0, n=1):
    amp = np.zeros((n, N_LOBES, 3))
    amp[:, j] = a
    lam_ = np.zeros((n, N_LOBES))
    mu_ = np.zeros((n, N_LOBES))
    lam_[:, j], mu_[:, j] = lam, mu
    return amp, lam_, mu_


def test_bank_layout(bank):
    assert bank.axis.shape == (33, 3) == (1 + 4 * 8, 3)
    assert np.all(bank.axis[:, 2] >= -1e-12)
    assert np.max(np.abs(np.sum(bank.axis * bank.tangent, axis=1))) < 1e-6
    assert np.max(np.abs(np.sum(bank.axis * bank.bitangent, axis=1))) < 1e-6
    assert np.max(np.abs(np.sum(bank.tangent * bank.bitangent, axis=1))) < 1e-6
    # outermost ring sits on the horizon
    np.testing.assert_allclose(bank.axis[-8:, 2], 0.0, atol=1e-12)


def test_bank_is_constant():
    a, b = build_lobe_bank(), build_lobe_bank()
    assert np.array_equal(a.axis, b.axis) and np.array_equal(a.tangent, b.tangent)


def test_single_lobe_peak(bank):
    for j in (0, 5, 20):
        amp, lam, mu = one_lobe(j, a=(0.3, 0.6, 0.9), lam=4.0, mu=7.0)
        np.testing.assert_allclose(asg_eval(bank, amp, lam, mu, bank.axis[j][None]), [[0.3, 0.6, 0.9]], atol=1e-12)


def test_lobe_hemisphere_clamp(bank):
    amp = np.ones((1, N_LOBES, 3))
    lam = mu = np.zeros((1, N_LOBES))
    out = asg_eval(bank, amp, lam, mu, np.array([[0.0, 0.0, -1.0]]))
    np.testing.assert_array_equal(out, 0.0)


def test_zenith_lobe_hand_value(bank):
    amp, lam, mu = one_lobe(0, lam=2.0, mu=0.0)
    w = np.array([[np.sin(np.pi / 4), 0.0, np.cos(np.pi / 4)]])
    # the zenith lobe's lambda axis falls back to +x
    assert np.allclose(bank.tangent[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(asg_eval(bank, amp, lam, mu, w), [[0.7071 * 0.3679] * 3], atol=1e-4)


@settings(max_examples=50)
@given(direction, st.floats(0, 50), st.floats(0, 50))
def test_asg_non_negative(d, lam, mu):
    bank = build_lobe_bank()
    rng = np.random.default_rng(0)
    amp = rng.random((1, N_LOBES, 3))
    out = asg_eval(bank, amp, np.full((1, N_LOBES), lam), np.full((1, N_LOBES), mu), unit(d)[None])
    assert np.all(out >= 0)


def test_asg_continuous_at_clamp(bank):
    amp, lam, mu = one_lobe(0)
    eps = 1e-7
    w = unit(np.array([[1.0, 0.0, eps], [1.0, 0.0, -eps]]))
    assert np.all(asg_eval(bank, np.repeat(amp, 2, 0), np.repeat(lam, 2, 0), np.repeat(mu, 2, 0), w) < 1e-6)


def test_sharpness_decreases_lobe(bank):
    w = unit(np.array([[0.3, 0.1, 0.9]]))
    vals = [asg_eval(bank, *one_lobe(0, lam=l), w)[0, 0] for l in (0.0, 1.0, 5.0, 20.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_positional_encoding():
    z = positional_encoding(np.zeros((1, 3)))
    assert z.shape == (1, 39) == (1, 3 * 2 * 6 + 3)
    np.testing.assert_array_equal(z[0, :36].reshape(3, 12)[:, :6], 0.0)
    np.testing.assert_array_equal(z[0, :36].reshape(3, 12)[:, 6:], 1.0)
    rng = np.random.default_rng(1)
    p = rng.uniform(-1, 1, (20, 3))
    h = 1e-5
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        slope = np.abs(positional_encoding(p + e) - positional_encoding(p)) / h
        assert slope.max() <= 2 ** 5 * np.pi + 1e-3


def test_ide_attenuation_limits():
    ls = np.array([l for l, _ in ide_bands()])
    np.testing.assert_allclose(ide_attenuation(np.array([1e-6]))[0], 1.0, atol=1e-9)
    att = ide_attenuation(np.array([1.0]))[0]
    assert np.all(att[ls >= 4] < 1e-2)


def test_ide_band_one_is_linear():
    # band-1 features are a fixed linear map of the direction, so they rotate with it
    bands = ide_bands()
    cols = [i for i, (l, _) in enumerate(bands) if l == 1]
    n = len(bands)

    def band1(w):
        e = integrated_directional_encoding(w, np.zeros(len(w)))
        return np.concatenate([e[:, cols], e[:, [n + c for c in cols]]], axis=1)

    basis = band1(np.eye(3))  # rows: features of e_x, e_y, e_z
    rng = np.random.default_rng(2)
    w = unit(rng.normal(size=(10, 3)))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    np.testing.assert_allclose(band1(w @ q.T), (w @ q.T) @ basis, atol=1e-12)


def test_feature_dim_matches_encoding():
    rng = np.random.default_rng(3)
    x = encode_inputs(rng.random((4, 3)), unit(rng.normal(size=(4, 3))), rng.random(4), rng.random((4, 3)))
    assert x.shape == (4, feature_dim())


def test_zero_init_amplitude():
    net = PredictorNet(seed=0)
    rng = np.random.default_rng(4)
    amp, lam, mu = predict_lobe_params(net, rng.random((5, 3)), unit(rng.normal(size=(5, 3))), rng.random(5),
                                       rng.random((5, 3)))
    np.testing.assert_allclose(amp, np.log(2.0))
    assert amp.shape == (5, 33, 3) and lam.shape == mu.shape == (5, 33)
    raw = net.forward(encode_inputs(rng.random((2, 3)), unit(rng.normal(size=(2, 3))), rng.random(2), rng.random((2, 3))))
    assert raw.shape == (2, 33 * 5)


def test_sharpness_cap():
    raw = np.full((1, N_LOBES * 5), 1e4)
    _, lam, mu = params_from_raw(raw)
    assert np.all(lam <= SHARPNESS_CAP) and np.all(mu <= SHARPNESS_CAP)


def test_net_deterministic():
    x = np.random.default_rng(5).normal(size=(3, feature_dim()))
    a = PredictorNet(seed=9, zero_last=False)
    b = PredictorNet(seed=9, zero_last=False)
    assert np.array_equal(a.forward(x), b.forward(x))
    assert np.array_equal(a.forward(x), a.forward(x))


def _net_loss(net, x, w):
    return np.sum(net.forward(x) * w)


def test_net_backward_finite_differences():
    rng = np.random.default_rng(6)
    net = PredictorNet(in_dim=7, hidden=16, depth=2, seed=1, out_dim=5, zero_last=False)
    x = rng.normal(size=(6, 7))
    w = rng.normal(size=(6, 5))
    net.forward(x)
    grads, _ = net.backward(w)
    params = net.params
    for _ in range(10):
        k = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[k].shape)
        old = params[k][idx]
        h = 1e-4
        params[k][idx] = old + h
        up = _net_loss(net, x, w)
        params[k][idx] = old - h
        dn = _net_loss(net, x, w)
        params[k][idx] = old
        fd = (up - dn) / (2 * h)
        assert abs(fd - grads[k][idx]) <= 1e-4 * max(abs(fd), 1e-6)


def test_net_backward_linear_and_zero():
    rng = np.random.default_rng(7)
    net = PredictorNet(in_dim=4, hidden=8, depth=2, seed=2, out_dim=3, zero_last=False)
    x = rng.normal(size=(5, 4))
    net.forward(x)
    zero, _ = net.backward(np.zeros((5, 3)))
    assert all(not g.any() for g in zero)
    g_all, _ = net.backward(np.ones((5, 3)))
    total = [np.zeros_like(p) for p in net.params]
    for i in range(5):
        net.forward(x[i:i + 1])
        gi, _ = net.backward(np.ones((1, 3)))
        total = [t + g for t, g in zip(total, gi)]
    for a, b in zip(g_all, total):
        np.testing.assert_allclose(a, b, atol=1e-10)
    with pytest.raises(RuntimeError):
        PredictorNet(in_dim=2, hidden=2, depth=1).backward(np.zeros((1, 165)))


def test_asg_backward_finite_differences(bank):
    rng = np.random.default_rng(8)
    amp = rng.random((3, N_LOBES, 3))
    lam = rng.uniform(0, 5, (3, N_LOBES))
    mu = rng.uniform(0, 5, (3, N_LOBES))
    w = unit(rng.normal(size=(3, 3)) + [0, 0, 1.5])
    g = rng.normal(size=(3, 3))
    g_amp, g_lam, g_mu = asg_backward(bank, amp, lam, mu, w, g)
    h = 1e-6
    for arr, grad in ((amp, g_amp), (lam, g_lam), (mu, g_mu)):
        for idx in [(0, 0), (1, 7), (2, 20)]:
            full = idx + (1,) if arr.ndim == 3 else idx
            old = arr[full]
            arr[full] = old + h
            up = np.sum(asg_eval(bank, amp, lam, mu, w) * g)
            arr[full] = old - h
            dn = np.sum(asg_eval(bank, amp, lam, mu, w) * g)
            arr[full] = old
            assert grad[full] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-9)


def test_end_to_end_chain_finite_differences():
    rng = np.random.default_rng(9)
    model = IndiAsg(seed=3, hidden=16, depth=2)
    for w in model.net.weights:
        w[...] = rng.normal(scale=0.3, size=w.shape)
    p = rng.uniform(-0.5, 0.5, (4, 3))
    n = unit(rng.normal(size=(4, 3)))
    wr = unit(n + 0.5 * rng.normal(size=(4, 3)))
    r = rng.uniform(0.1, 0.9, 4)
    c = rng.random((4, 3))
    g = rng.normal(size=(4, 3))
    model.forward(p, n, wr, r, c)
    grads = model.backward(g)
    params = model.net.params
    for _ in range(10):
        k = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[k].shape)
        old = params[k][idx]
        h = 1e-5
        params[k][idx] = old + h
        up = np.sum(model.forward(p, n, wr, r, c) * g)
        params[k][idx] = old - h
        dn = np.sum(model.forward(p, n, wr, r, c) * g)
        params[k][idx] = old
        fd = (up - dn) / (2 * h)
        assert abs(fd - grads[k][idx]) <= 1e-3 * max(abs(fd), 1e-6)


@given(direction)
def test_rotation_to_normal(d):
    n = unit(d)[None]
    rot = rotation_to_normal(n)[0]
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(rot @ [0, 0, 1.0], n[0], atol=1e-9)
    np.testing.assert_allclose(to_tangent_space(n, n), [[0, 0, 1.0]], atol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    net = PredictorNet(in_dim=5, hidden=4, depth=2, seed=3, out_dim=6, zero_last=False)
    net.save(tmp_path / "net.bin")
    back = PredictorNet.load(tmp_path / "net.bin")
    x = np.random.default_rng(0).normal(size=(2, 5))
    np.testing.assert_allclose(back.forward(x), net.forward(x), rtol=1e-5, atol=1e-6)
    (tmp_path / "bad.bin").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        PredictorNet.load(tmp_path / "bad.bin")
