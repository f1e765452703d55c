"""Anchor-parameterized velocity fields and their exact time integral.

A track holds ``N_v`` velocity anchors at equidistant timestamps over
``[t_start, t_end]``.  Velocity between anchors is the linear interpolant and
is clamped to the boundary anchor outside the domain.  Displacements are
integrated exactly with trapezoids, using cumulative per-interval areas
(``prefix``) so that any run of whole intervals costs O(1).

Anchors have shape ``(N_v, D)`` for a track shared by all Gaussians or
``(N, N_v, D)`` for one track per Gaussian; ``D`` is 3 in normal use but any
trailing width works (the gradient code integrates an identity matrix).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .linalg import intrinsic_velocity

DEFAULT_NUM_ANCHORS = 6


def _prefix_from(anchors, dt):
    areas = 0.5 * (anchors[..., :-1, :] + anchors[..., 1:, :]) * dt
    prefix = np.zeros_like(anchors)
    prefix[..., 1:, :] = np.cumsum(areas, axis=-2)
    return prefix


@dataclass
class VelocityTrack:
    anchors: np.ndarray
    t_start: float = 0.0
    t_end: float = 1.0
    prefix: np.ndarray = None

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim not in (2, 3) or self.anchors.shape[-2] < 2:
            raise ConfigurationError("anchors must have shape (N_v>=2, D) or (N, N_v>=2, D)", "anchors")
        if not self.t_end > self.t_start:
            raise ConfigurationError("t_end must exceed t_start", "t_end")
        self.t_start = float(self.t_start)
        self.t_end = float(self.t_end)
        if self.prefix is None:
            self.prefix = _prefix_from(self.anchors, self.dt)

    @classmethod
    def zeros(cls, num_anchors=DEFAULT_NUM_ANCHORS, t_start=0.0, t_end=1.0, num_gaussians=None, dim=3):
        shape = (num_anchors, dim) if num_gaussians is None else (num_gaussians, num_anchors, dim)
        return cls(np.zeros(shape), t_start, t_end)

    @property
    def num_anchors(self):
        return self.anchors.shape[-2]

    @property
    def per_gaussian(self):
        return self.anchors.ndim == 3

    @property
    def dt(self):
        return (self.t_end - self.t_start) / (self.num_anchors - 1)

    @property
    def times(self):
        return self.t_start + self.dt * np.arange(self.num_anchors)

    def anchor_time(self, k):
        return self.t_start + self.dt * k

    def refresh(self):
        """Recompute ``prefix`` in place after the anchors were mutated."""
        self.prefix = _prefix_from(self.anchors, self.dt)
        return self


def rebuild_prefix(track):
    """Return a copy of ``track`` whose prefix sums match its anchors."""
    return VelocityTrack(track.anchors.copy(), track.t_start, track.t_end)


def _gather(arr, k, per_gaussian):
    # arr: (N_v, D) or (N, N_v, D); k: (M,) indices -> (M, D)
    if per_gaussian:
        return np.take_along_axis(arr, k[:, None, None], axis=1)[:, 0, :]
    return arr[k]


def _locate(track, t):
    """Interval index and fractional offset for times already clamped to the domain."""
    u = (t - track.t_start) / track.dt
    k = np.clip(np.floor(u).astype(np.int64), 0, track.num_anchors - 2)
    return k


def _interp(track, t, k, anchors=None):
    anchors = track.anchors if anchors is None else anchors
    per = anchors.ndim == 3
    t0 = track.t_start + track.dt * k
    f = ((t - t0) / track.dt)[:, None]
    return (1.0 - f) * _gather(anchors, k, per) + f * _gather(anchors, k + 1, per)


def _broadcast_times(track, *ts):
    ts = [np.asarray(t, dtype=np.float64) for t in ts]
    scalar = all(t.ndim == 0 for t in ts)
    n = track.anchors.shape[0] if track.per_gaussian else 1
    try:
        shape = np.broadcast_shapes(*(t.shape for t in ts), (n,) if track.per_gaussian else ())
    except ValueError:
        raise ConfigurationError("time arrays do not broadcast against the track", "t") from None
    ts = [np.broadcast_to(t, shape).reshape(-1) for t in ts]
    if track.per_gaussian and len(ts[0]) != n:
        raise ConfigurationError("per-Gaussian track needs one time per Gaussian", "t")
    return ts, shape, scalar and not track.per_gaussian


def velocity_at(track, t):
    """Interpolated velocity at time(s) ``t``, clamped outside the domain."""
    (tt,), shape, scalar = _broadcast_times(track, t)
    tc = np.clip(tt, track.t_start, track.t_end)
    v = _interp(track, tc, _locate(track, tc))
    # exact boundary anchors at and beyond the domain ends
    first = _gather(track.anchors, np.zeros(len(tt), dtype=np.int64), track.per_gaussian)
    last = _gather(track.anchors, np.full(len(tt), track.num_anchors - 1), track.per_gaussian)
    v = np.where((tt <= track.t_start)[:, None], first, np.where((tt >= track.t_end)[:, None], last, v))
    return v[0] if scalar else v.reshape(shape + (v.shape[-1],))


def _inside_intra(track, a, b, k):
    """Single-trapezoid integral for ``a <= b`` within interval ``k``."""
    return 0.5 * (_interp(track, a, k) + _interp(track, b, k)) * (b - a)[:, None]


def _inside_cross(track, a, b, ka, kb):
    """Left trapezoid + whole-interval prefix run + right trapezoid, ``a <= b``."""
    per = track.per_gaussian
    t_next = track.t_start + track.dt * (ka + 1)
    t_last = track.t_start + track.dt * kb
    left = 0.5 * (_interp(track, a, ka) + _gather(track.anchors, ka + 1, per)) * (t_next - a)[:, None]
    middle = _gather(track.prefix, kb, per) - _gather(track.prefix, ka + 1, per)
    right = 0.5 * (_gather(track.anchors, kb, per) + _interp(track, b, kb)) * (b - t_last)[:, None]
    return left + middle + right


def _integrate_sorted(track, lo, hi):
    per = track.per_gaussian
    first = _gather(track.anchors, np.zeros(len(lo), dtype=np.int64), per)
    last = _gather(track.anchors, np.full(len(lo), track.num_anchors - 1), per)
    # clamped tails outside the domain
    below = np.clip(np.minimum(hi, track.t_start) - lo, 0.0, None)
    above = np.clip(hi - np.maximum(lo, track.t_end), 0.0, None)
    out = first * below[:, None] + last * above[:, None]
    a = np.clip(lo, track.t_start, track.t_end)
    b = np.clip(hi, track.t_start, track.t_end)
    ka = _locate(track, a)
    kb = _locate(track, b)
    same = ka == kb
    inner = np.where(same[:, None], _inside_intra(track, a, b, ka), _inside_cross(track, a, b, ka, kb))
    return out + inner


def displacement(track, mu_t, t):
    """Exact integral of the velocity from ``mu_t`` to ``t`` (antisymmetric in the bounds)."""
    (a, b), shape, scalar = _broadcast_times(track, mu_t, t)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    sign = np.where(b >= a, 1.0, -1.0)[:, None]
    out = sign * _integrate_sorted(track, lo, hi)
    return out[0] if scalar else out.reshape(shape + (out.shape[-1],))


def displacement_weights(track, mu_t, t):
    """Per-anchor weights ``w`` with ``displacement = w @ anchors``.

    The integral is linear in the anchors, so integrating the identity matrix
    gives its Jacobian.  Returns shape ``(M, N_v)``.
    """
    mu_t = np.atleast_1d(np.asarray(mu_t, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), mu_t.shape)
    basis = VelocityTrack(np.eye(track.num_anchors), track.t_start, track.t_end)
    return displacement(basis, mu_t, t).reshape(len(mu_t), track.num_anchors)


def total_mean_at(mean4, cov, track, t):
    """Spatial mean at time ``t``: canonical center + track displacement + intrinsic drift."""
    mean4 = np.asarray(mean4, dtype=np.float64)
    tau = np.asarray(t, dtype=np.float64) - mean4[..., 3]
    disp = displacement(track, mean4[..., 3], t)
    return mean4[..., :3] + disp + intrinsic_velocity(cov) * tau[..., None]
