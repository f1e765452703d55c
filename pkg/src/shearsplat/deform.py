"""Geometric deformation network.

An MLP maps the positional encodings of a Gaussian's canonical center, its
temporal center, the query time and the flattened velocity anchors to
residuals for the four scales and for the two rotation quaternions.
Hidden layers are Linear -> LayerNorm -> ReLU; the 12-wide linear head is
zero-initialized so that a fresh network leaves every Gaussian unchanged.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .linalg import IDENTITY_QUAT, quat_mul, quat_mul_vjp

HEAD_WIDTH = 12
LN_EPS = 1e-5
SCALE_FLOOR = 1e-4


@dataclass(frozen=True)
class EncodingConfig:
    L_mu3: int = 6
    L_mut: int = 4
    L_tq: int = 4
    L_vel: int = 0

    def __post_init__(self):
        for name in ("L_mu3", "L_mut", "L_tq", "L_vel"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError("frequency bands must be >= 0", name)

    def input_dim(self, num_anchors):
        return (encoded_dim(3, self.L_mu3) + encoded_dim(1, self.L_mut)
                + encoded_dim(1, self.L_tq) + encoded_dim(3 * num_anchors, self.L_vel))


def encoded_dim(d, L):
    return d * (2 * L + 1)


def encode(x, L):
    """``[x, sin(x), cos(x), sin(2x), cos(2x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]``.

    ``x`` has shape ``(..., d)``; the components of ``x`` stay contiguous inside
    each term.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for i in range(L):
        fx = (2.0 ** i) * x
        parts.append(np.sin(fx))
        parts.append(np.cos(fx))
    return np.concatenate(parts, axis=-1)


def encode_vjp(x, L, g):
    d = x.shape[-1]
    out = g[..., :d].copy()
    for i in range(L):
        f = 2.0 ** i
        gs = g[..., d * (1 + 2 * i):d * (2 + 2 * i)]
        gc = g[..., d * (2 + 2 * i):d * (3 + 2 * i)]
        out += f * (gs * np.cos(f * x) - gc * np.sin(f * x))
    return out


class DeformNet:
    """Parameters of the deformation MLP, stored by name in ``params``."""

    def __init__(self, params, encoding, num_anchors):
        self.params = params
        self.encoding = encoding
        self.num_anchors = int(num_anchors)
        self._check()

    @classmethod
    def create(cls, num_anchors, hidden=(64, 64, 64), encoding=None, rng=None, zero_head=True):
        encoding = encoding or EncodingConfig()
        rng = np.random.default_rng(0) if rng is None else rng
        params = {}
        width = encoding.input_dim(num_anchors)
        for i, h in enumerate(hidden):
            bound = 1.0 / np.sqrt(width)
            params[f"w{i}"] = rng.uniform(-bound, bound, size=(width, h))
            params[f"b{i}"] = rng.uniform(-bound, bound, size=h)
            params[f"g{i}"] = np.ones(h)
            params[f"o{i}"] = np.zeros(h)
            width = h
        if zero_head:
            params["w_head"] = np.zeros((width, HEAD_WIDTH))
            params["b_head"] = np.zeros(HEAD_WIDTH)
        else:
            bound = 1.0 / np.sqrt(width)
            params["w_head"] = rng.uniform(-bound, bound, size=(width, HEAD_WIDTH))
            params["b_head"] = rng.uniform(-bound, bound, size=HEAD_WIDTH)
        return cls(params, encoding, num_anchors)

    @property
    def num_hidden(self):
        return sum(1 for k in self.params if k.startswith("w") and k != "w_head")

    @property
    def hidden(self):
        return tuple(self.params[f"w{i}"].shape[1] for i in range(self.num_hidden))

    def weight_names(self):
        return [k for k in self.params if k.startswith("w")]

    def _check(self):
        width = self.encoding.input_dim(self.num_anchors)
        for i in range(self.num_hidden):
            w = self.params[f"w{i}"]
            h = w.shape[1]
            if w.shape[0] != width or any(self.params[f"{p}{i}"].shape != (h,) for p in "bgo"):
                raise ConfigurationError(f"layer {i} shapes inconsistent with input width {width}", "net")
            width = h
        if self.params["w_head"].shape != (width, HEAD_WIDTH) or self.params["b_head"].shape != (HEAD_WIDTH,):
            raise ConfigurationError("head must map to 12 outputs", "net")

    def copy(self):
        return DeformNet({k: v.copy() for k, v in self.params.items()}, self.encoding, self.num_anchors)


def _inputs(net, mu3, mu_t, t_q, vel_feat):
    mu3 = np.atleast_2d(np.asarray(mu3, dtype=np.float64))
    n = mu3.shape[0]
    mu_t = np.broadcast_to(np.asarray(mu_t, dtype=np.float64), (n,))[:, None]
    t_q = np.broadcast_to(np.asarray(t_q, dtype=np.float64), (n,))[:, None]
    vel_feat = np.asarray(vel_feat, dtype=np.float64)
    if vel_feat.shape[-1] != 3 * net.num_anchors:
        raise ConfigurationError(f"velocity feature must have {3 * net.num_anchors} entries", "vel_feat")
    vel = np.broadcast_to(vel_feat, (n, vel_feat.shape[-1]))
    return mu3, mu_t, t_q, vel


def deform_forward(net, mu3, mu_t, t_q, vel_feat):
    """Evaluate the network for ``N`` Gaussians.

    Returns ``(ds, dq, dq_r, cache)`` with each residual of shape ``(N, 4)``;
    ``cache`` feeds :func:`deform_backward`.
    """
    enc = net.encoding
    mu3, mu_t, t_q, vel = _inputs(net, mu3, mu_t, t_q, vel_feat)
    h = np.concatenate([encode(mu3, enc.L_mu3), encode(mu_t, enc.L_mut),
                        encode(t_q, enc.L_tq), encode(vel, enc.L_vel)], axis=-1)
    layers = []
    p = net.params
    for i in range(net.num_hidden):
        z = h @ p[f"w{i}"] + p[f"b{i}"]
        mu = z.mean(axis=-1, keepdims=True)
        zc = z - mu
        inv = 1.0 / np.sqrt((zc * zc).mean(axis=-1, keepdims=True) + LN_EPS)
        nrm = zc * inv
        y = nrm * p[f"g{i}"] + p[f"o{i}"]
        layers.append((h, nrm, inv, y))
        h = np.maximum(y, 0.0)
    out = h @ p["w_head"] + p["b_head"]
    cache = {"inputs": (mu3, mu_t, t_q, vel), "layers": layers, "last": h,
             "shared_vel": np.ndim(vel_feat) == 1}
    return out[:, 0:4], out[:, 4:8], out[:, 8:12], cache


def deform_backward(net, cache, g_ds, g_dq, g_dqr):
    """Reverse pass.  Returns ``(param_grads, input_grads)``.

    ``input_grads`` has keys ``mu3`` (N, 3), ``mu_t`` (N,) and ``vel_feat``
    (summed over Gaussians when the feature was shared).
    """
    enc = net.encoding
    p = net.params
    g_out = np.concatenate([g_ds, g_dq, g_dqr], axis=-1)
    grads = {"w_head": cache["last"].T @ g_out, "b_head": g_out.sum(axis=0)}
    gh = g_out @ p["w_head"].T
    for i in reversed(range(net.num_hidden)):
        h_in, nrm, inv, y = cache["layers"][i]
        gy = gh * (y > 0)
        grads[f"g{i}"] = (gy * nrm).sum(axis=0)
        grads[f"o{i}"] = gy.sum(axis=0)
        gn = gy * p[f"g{i}"]
        gz = inv * (gn - gn.mean(axis=-1, keepdims=True) - nrm * (gn * nrm).mean(axis=-1, keepdims=True))
        grads[f"w{i}"] = h_in.T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        gh = gz @ p[f"w{i}"].T
    mu3, mu_t, t_q, vel = cache["inputs"]
    sizes = [encoded_dim(3, enc.L_mu3), encoded_dim(1, enc.L_mut), encoded_dim(1, enc.L_tq)]
    cuts = np.cumsum(sizes)
    g_mu3 = encode_vjp(mu3, enc.L_mu3, gh[:, :cuts[0]])
    g_mut = encode_vjp(mu_t, enc.L_mut, gh[:, cuts[0]:cuts[1]])[:, 0]
    g_vel = encode_vjp(vel, enc.L_vel, gh[:, cuts[2]:])
    if cache["shared_vel"]:
        g_vel = g_vel.sum(axis=0)
    grads = {k: grads[k] for k in p}
    return grads, {"mu3": g_mu3, "mu_t": g_mut, "vel_feat": g_vel}


def apply_deformation(scales, q_l, q_r, ds, dq, dq_r):
    """Deformed geometry ``(S + diag(ds), q_l ⊗ Δq, q_r ⊗ Δq_r)``.

    Raw quaternion residuals are offsets from the identity quaternion, so an
    all-zero network output is the identity deformation.  Scales are floored
    at ``SCALE_FLOOR``; the returned quaternions are not normalized.
    """
    s = np.maximum(np.asarray(scales, dtype=np.float64) + ds, SCALE_FLOOR)
    return s, quat_mul(q_l, IDENTITY_QUAT + dq), quat_mul(q_r, IDENTITY_QUAT + dq_r)


def apply_deformation_vjp(scales, q_l, q_r, ds, dq, dq_r, g_s, g_ql, g_qr):
    """Gradients of :func:`apply_deformation` w.r.t. all six inputs."""
    live = (np.asarray(scales) + ds) > SCALE_FLOOR
    g_scale = g_s * live
    gql, gdq = quat_mul_vjp(q_l, IDENTITY_QUAT + dq, g_ql)
    gqr, gdqr = quat_mul_vjp(q_r, IDENTITY_QUAT + dq_r, g_qr)
    return g_scale, gql, gqr, g_scale, gdq, gdqr
