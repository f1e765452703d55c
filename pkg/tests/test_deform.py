import numpy as np
import pytest

from shearsplat.deform import (HEAD_WIDTH, SCALE_FLOOR, DeformNet, EncodingConfig, apply_deformation,
                               apply_deformation_vjp, deform_backward, deform_forward, encode, encode_vjp,
                               encoded_dim)
from shearsplat.errors import ConfigurationError


def live_net(rng, hidden=(64, 64, 64), num_anchors=6, encoding=None):
    net = DeformNet.create(num_anchors, hidden=hidden, encoding=encoding, rng=rng, zero_head=False)
    for i in range(len(hidden)):
        net.params[f"g{i}"] = rng.uniform(0.5, 1.5, hidden[i])
        net.params[f"o{i}"] = rng.normal(scale=0.1, size=hidden[i])
    return net


def inputs(rng, n=5, num_anchors=6, shared=True):
    vel = rng.normal(size=3 * num_anchors) if shared else rng.normal(size=(n, 3 * num_anchors))
    return rng.normal(size=(n, 3)), rng.uniform(0, 1, n), 0.37, vel


def test_encoding_layout():
    x = np.array([[0.3, -1.0]])
    e = encode(x, 2)
    assert e.shape == (1, encoded_dim(2, 2)) == (1, 10)
    assert np.array_equal(e[:, :2], x)
    assert np.allclose(e[:, 2:4], np.sin(x))
    assert np.allclose(e[:, 4:6], np.cos(x))
    assert np.allclose(e[:, 6:8], np.sin(2 * x))
    assert np.array_equal(encode(x, 0), x)


def test_encoding_vjp(rng):
    x = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, encoded_dim(3, 5)))
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += 1e-6
        xm[i] -= 1e-6
        num[i] = (np.sum(g * encode(xp, 5)) - np.sum(g * encode(xm, 5))) / 2e-6
    assert np.allclose(encode_vjp(x, 5, g), num, atol=1e-7)


def test_default_input_width():
    # 3*(2*6+1) + (2*4+1) + (2*4+1) + 18*(2*0+1)
    assert EncodingConfig().input_dim(6) == 39 + 9 + 9 + 18


def test_negative_bands_rejected():
    with pytest.raises(ConfigurationError):
        EncodingConfig(L_mu3=-1)


def test_zero_head_outputs_exact_zeros(rng):
    net = DeformNet.create(6, rng=rng)
    ds, dq, dqr, _ = deform_forward(net, *inputs(rng))
    for r in (ds, dq, dqr):
        assert r.shape == (5, 4)
        assert np.array_equal(r, np.zeros((5, 4)))


def test_layer_norm_normalizes_hidden_preactivations(rng):
    net = DeformNet.create(6, rng=rng)
    _, _, _, cache = deform_forward(net, *inputs(rng))
    for _, nrm, _, _ in cache["layers"]:
        assert np.allclose(nrm.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(nrm.var(axis=-1), 1.0, atol=1e-3)


def test_inconsistent_parameters_rejected(rng):
    net = DeformNet.create(6, hidden=(8, 8), rng=rng)
    params = dict(net.params)
    params["w1"] = np.zeros((7, 8))
    with pytest.raises(ConfigurationError):
        DeformNet(params, net.encoding, 6)
    params = dict(net.params)
    params["w_head"] = np.zeros((8, HEAD_WIDTH + 1))
    with pytest.raises(ConfigurationError):
        DeformNet(params, net.encoding, 6)


def test_wrong_velocity_feature_width(rng):
    net = DeformNet.create(6, rng=rng)
    mu3, mut, tq, _ = inputs(rng)
    with pytest.raises(ConfigurationError):
        deform_forward(net, mu3, mut, tq, np.zeros(12))


def _objective(net, args, w):
    ds, dq, dqr, _ = deform_forward(net, *args)
    return np.sum(w[0] * ds) + np.sum(w[1] * dq) + np.sum(w[2] * dqr)


@pytest.mark.parametrize("shared", [True, False])
def test_network_gradients_match_finite_differences(rng, shared):
    net = live_net(rng, encoding=EncodingConfig(L_vel=1))
    args = inputs(rng, shared=shared)
    w = rng.normal(size=(3, 5, 4))
    _, _, _, cache = deform_forward(net, *args)
    pg, ig = deform_backward(net, cache, *w)
    h = 1e-6
    for name, arr in net.params.items():
        idx = [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(12)]
        for i in idx:
            old = arr[i]
            arr[i] = old + h
            fp = _objective(net, args, w)
            arr[i] = old - h
            fm = _objective(net, args, w)
            arr[i] = old
            num = (fp - fm) / (2 * h)
            assert abs(pg[name][i] - num) <= 1e-4 * max(abs(num), 1e-3), name
    mu3, mut, tq, vel = args
    for key, arr in (("mu3", mu3), ("mu_t", mut), ("vel_feat", vel)):
        for i in list(np.ndindex(arr.shape))[:10]:
            old = arr[i]
            arr[i] = old + h
            fp = _objective(net, args, w)
            arr[i] = old - h
            fm = _objective(net, args, w)
            arr[i] = old
            num = (fp - fm) / (2 * h)
            assert abs(ig[key][i] - num) <= 1e-4 * max(abs(num), 1e-3), key


def test_apply_deformation_identity(rng):
    s = rng.uniform(0.1, 1, (3, 4))
    ql, qr = rng.normal(size=(2, 3, 4))
    z = np.zeros((3, 4))
    s2, ql2, qr2 = apply_deformation(s, ql, qr, z, z, z)
    assert np.array_equal(s2, s) and np.array_equal(ql2, ql) and np.array_equal(qr2, qr)


def test_apply_deformation_floors_scales():
    s, _, _ = apply_deformation(np.full((1, 4), 0.1), np.eye(4)[:1], np.eye(4)[:1], np.full((1, 4), -5.0),
                                np.zeros((1, 4)), np.zeros((1, 4)))
    assert np.array_equal(s, np.full((1, 4), SCALE_FLOOR))


def test_apply_deformation_vjp(rng):
    vals = [rng.uniform(0.2, 1, 4), rng.normal(size=4), rng.normal(size=4),
            rng.normal(scale=0.05, size=4), rng.normal(size=4), rng.normal(size=4)]
    g = rng.normal(size=(3, 4))

    def f(v):
        out = apply_deformation(*v)
        return sum(np.sum(gi * oi) for gi, oi in zip(g, out))

    grads = apply_deformation_vjp(*vals, *g)
    for k in range(6):
        num = np.zeros(4)
        for i in range(4):
            vp = [x.copy() for x in vals]
            vm = [x.copy() for x in vals]
            vp[k][i] += 1e-6
            vm[k][i] -= 1e-6
            num[i] = (f(vp) - f(vm)) / 2e-6
        assert np.allclose(grads[k], num, atol=1e-7)
