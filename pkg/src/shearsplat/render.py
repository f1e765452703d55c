"""CPU differentiable renderer for sheared 4D Gaussians.

Pipeline for one frame at time ``t``:

1. slice every 4D Gaussian into a 3D Gaussian.  The mean follows the intrinsic
   drift plus the integrated velocity track; the covariance is the temporal
   Schur complement of the (optionally deformed) 4D covariance.  Gaussians
   whose temporal kernel is below ``CULL_THRESHOLD`` are dropped.
2. project the 3D Gaussians with the local perspective Jacobian (EWA).
3. sort by camera depth and alpha-composite front to back.

All stages are vectorized over Gaussians and pixels.  :func:`render_backward`
is the hand-written reverse pass of the same pipeline.
"""

from dataclasses import dataclass, field

import numpy as np

from . import linalg as la
from .deform import (DeformNet, apply_deformation, apply_deformation_vjp, deform_backward,
                     deform_forward, SCALE_FLOOR)
from .errors import ConfigurationError
from .motion import VelocityTrack, displacement, displacement_weights, velocity_at

CULL_THRESHOLD = 0.05
DILATION = 0.3
TRUNCATION_SIGMA = 3.0
ALPHA_MAX = 0.99
MIN_TRANSMITTANCE = 1e-4
TILE_SIZE = 16


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera space.

    Camera space looks down +z with +x right and +y down the image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive", "fx/fy")
        if not self.near > 0:
            raise ConfigurationError("near plane must be positive", "near")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be positive", "width/height")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ConfigurationError("rotation must be orthonormal with det 1", "rotation")
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def look_at(cls, eye, target, width, height, fov_deg=50.0, up=(0.0, 0.0, 1.0), near=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, rot, -rot @ eye, near)

    def world_to_camera(self, x):
        return x @ self.rotation.T + self.translation


@dataclass
class Frame:
    """RGB image, ``rgb`` has shape ``(height, width, 3)`` with values in [0, 1]."""

    rgb: np.ndarray

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]

    @classmethod
    def filled(cls, width, height, color):
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)).copy())

    def to_bytes(self):
        return np.floor(np.clip(self.rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).tobytes()

    def to_ppm(self):
        return b"P6\n%d %d\n255\n" % (self.width, self.height) + self.to_bytes()

    def write_ppm(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_ppm())

    @classmethod
    def from_ppm(cls, data):
        tokens = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ConfigurationError("truncated PPM header", "ppm")
            tokens.append(data[start:pos])
        if tokens[0] != b"P6" or tokens[3] != b"255":
            raise ConfigurationError("only binary P6 with maxval 255 is supported", "ppm")
        w, h = int(tokens[1]), int(tokens[2])
        body = data[pos + 1:pos + 1 + w * h * 3]
        if len(body) != w * h * 3:
            raise ConfigurationError("PPM pixel data truncated", "ppm")
        return cls(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0)

    @classmethod
    def read_ppm(cls, path):
        with open(path, "rb") as fh:
            return cls.from_ppm(fh.read())


@dataclass
class Gaussian4D:
    mean4: np.ndarray
    q_l: np.ndarray
    q_r: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    rgb: np.ndarray

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacity(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))


GAUSSIAN_FIELDS = ("means", "q_l", "q_r", "log_scales", "opacity_logit", "rgb")
_FIELD_WIDTH = {"means": 4, "q_l": 4, "q_r": 4, "log_scales": 4, "opacity_logit": None, "rgb": 3}


class GaussianSet:
    """Structure-of-arrays storage for ``N`` 4D Gaussians."""

    def __init__(self, means, q_l, q_r, log_scales, opacity_logit, rgb):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 4)
        n = len(self.means)
        self.q_l = np.array(q_l, dtype=np.float64).reshape(n, 4)
        self.q_r = np.array(q_r, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 4)
        self.opacity_logit = np.array(opacity_logit, dtype=np.float64).reshape(n)
        self.rgb = np.array(rgb, dtype=np.float64).reshape(n, 3)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, gaussians):
        if not gaussians:
            return cls.empty()
        return cls([g.mean4 for g in gaussians], [g.q_l for g in gaussians], [g.q_r for g in gaussians],
                   [g.log_scales for g in gaussians], [g.opacity_logit for g in gaussians],
                   [g.rgb for g in gaussians])

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        return Gaussian4D(self.means[i].copy(), self.q_l[i].copy(), self.q_r[i].copy(),
                          self.log_scales[i].copy(), float(self.opacity_logit[i]), self.rgb[i].copy())

    def arrays(self):
        return {name: getattr(self, name) for name in GAUSSIAN_FIELDS}

    def subset(self, idx):
        return GaussianSet(*(getattr(self, f)[idx] for f in GAUSSIAN_FIELDS))

    def copy(self):
        return GaussianSet(*(getattr(self, f).copy() for f in GAUSSIAN_FIELDS))

    @property
    def opacity(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))


@dataclass
class SceneModel:
    """Complete learnable state: Gaussians, velocity track and deformation net."""

    gaussians: GaussianSet
    track: VelocityTrack
    net: DeformNet
    use_velocity: bool = True
    use_net: bool = True
    modulate_opacity: bool = True
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.track.per_gaussian and self.track.anchors.shape[0] != len(self.gaussians):
            raise ConfigurationError("per-Gaussian track count differs from Gaussian count", "track")
        if self.net.num_anchors != self.track.num_anchors:
            raise ConfigurationError("network velocity feature does not match anchor count", "net")

    def __len__(self):
        return len(self.gaussians)

    def parameters(self):
        """Named views of every learnable array (mutating them mutates the model)."""
        params = self.gaussians.arrays()
        params["anchors"] = self.track.anchors
        for k, v in self.net.params.items():
            params["net." + k] = v
        return params

    def copy(self):
        track = VelocityTrack(self.track.anchors.copy(), self.track.t_start, self.track.t_end)
        return SceneModel(self.gaussians.copy(), track, self.net.copy(), self.use_velocity,
                          self.use_net, self.modulate_opacity, self.background.copy())

    def velocity_feature(self, track=None):
        track = self.track if track is None else track
        if track.per_gaussian:
            return track.anchors.reshape(track.anchors.shape[0], -1)
        return track.anchors.reshape(-1)


# --------------------------------------------------------------------------
# slicing
# --------------------------------------------------------------------------

@dataclass
class Slices:
    """Sliced 3D Gaussians at one time; ``index`` refers back into the model."""

    index: np.ndarray
    mean3: np.ndarray
    cov3: np.ndarray
    opacity: np.ndarray
    rgb: np.ndarray
    cache: dict = None


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def slice_gaussians(model, t, track=None, net_track=None):
    """Slice all Gaussians of ``model`` at time ``t``.

    ``track`` overrides the velocity track used for motion and ``net_track`` the
    one fed to the deformation network (default: the model's own track for both).
    """
    gs = model.gaussians
    track = model.track if track is None else track
    net_track = track if net_track is None else net_track
    t = float(t)
    s_floor = np.maximum(np.exp(gs.log_scales), SCALE_FLOOR)
    rot0 = la.quat_pair_to_rot4(gs.q_l, gs.q_r) if len(gs) else np.zeros((0, 4, 4))
    cov0 = la.cov4_from_rot(rot0, s_floor)
    d0 = cov0[:, 3, 3]
    if np.any(~(d0 > la.TEMPORAL_EPS)):
        raise la.DegenerateTemporalError("temporal variance must exceed %g" % la.TEMPORAL_EPS)
    tau = t - gs.means[:, 3]
    kernel = np.exp(-0.5 * tau * tau / d0)
    idx = np.nonzero(kernel >= CULL_THRESHOLD)[0]

    mu = gs.means[idx]
    c0 = cov0[idx]
    v0 = la.intrinsic_velocity(c0)
    mean3 = mu[:, :3]
    if model.use_velocity:
        sub_track = _subset_track(track, idx)
        mean3 = mean3 + displacement(sub_track, mu[:, 3], np.full(len(idx), t))
    mean3 = mean3 + v0 * tau[idx, None]

    cache = {"t": t, "idx": idx, "rot0": rot0[idx], "s_floor": s_floor[idx], "cov0": c0,
             "kernel": kernel[idx], "tau": tau[idx], "track": track, "net_track": net_track}
    if model.use_net and len(idx):
        feat = model.velocity_feature(net_track)
        if net_track.per_gaussian:
            feat = feat[idx]
        ds, dq, dqr, net_cache = deform_forward(model.net, mu[:, :3], mu[:, 3], t, feat)
        s_def, ql_def, qr_def = apply_deformation(s_floor[idx], gs.q_l[idx], gs.q_r[idx], ds, dq, dqr)
        rot_def = la.quat_pair_to_rot4(ql_def, qr_def)
        cov_def = la.cov4_from_rot(rot_def, s_def)
        cache.update(net_cache=net_cache, residuals=(ds, dq, dqr), deformed=(s_def, ql_def, qr_def, rot_def),
                     cov_def=cov_def)
    else:
        cov_def = c0
    cov3 = la.schur_tt(cov_def) if len(idx) else np.zeros((0, 3, 3))
    base_op = _sigmoid(gs.opacity_logit[idx])
    opacity = base_op * kernel[idx] if model.modulate_opacity else base_op
    rgb = np.clip(gs.rgb[idx], 0.0, 1.0)
    return Slices(idx, mean3, cov3, opacity, rgb, cache)


def _subset_track(track, idx):
    if not track.per_gaussian:
        return track
    return VelocityTrack(track.anchors[idx], track.t_start, track.t_end, track.prefix[idx])


def slice_gaussian(g, track, net, t, use_velocity=True, modulate_opacity=True):
    """Slice one Gaussian; returns ``(mean3, cov3, eff_opacity, rgb)`` or ``None`` if culled.

    ``net`` may be ``None`` to disable the deformation network.  A per-Gaussian
    ``track`` must hold exactly one track.
    """
    net_ = net if net is not None else DeformNet.create(track.num_anchors, hidden=(1,))
    model = SceneModel(GaussianSet.from_list([g]), track, net_, use_velocity, net is not None, modulate_opacity)
    sl = slice_gaussians(model, t)
    if len(sl.index) == 0:
        return None
    return sl.mean3[0], sl.cov3[0], float(sl.opacity[0]), sl.rgb[0]


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

@dataclass
class Splats:
    """Projected 2D Gaussians, ``index`` refers into the slice arrays."""

    index: np.ndarray
    mean2: np.ndarray
    cov2: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    rgb: np.ndarray
    cache: dict = None


def project_splats(mean3, cov3, cam, opacity=None, rgb=None):
    """EWA projection of ``M`` 3D Gaussians; Gaussians closer than ``near`` are dropped."""
    m = len(mean3)
    xc = cam.world_to_camera(mean3) if m else np.zeros((0, 3))
    keep = np.nonzero(xc[:, 2] >= cam.near)[0]
    xc = xc[keep]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    inv_z = 1.0 / z
    mean2 = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=-1)
    jac = np.zeros((len(keep), 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * y * inv_z * inv_z
    w = cam.rotation
    cov_cam = w @ cov3[keep] @ w.T
    cov2 = jac @ cov_cam @ np.swapaxes(jac, -1, -2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, -1, -2))
    cov2[:, 0, 0] += DILATION
    cov2[:, 1, 1] += DILATION
    op = None if opacity is None else opacity[keep]
    col = None if rgb is None else rgb[keep]
    return Splats(keep, mean2, cov2, z, op, col, {"xc": xc, "jac": jac, "cov_cam": cov_cam})


def project(mean3, cov3, cam):
    """Project one 3D Gaussian; returns ``(mean2, cov2, depth)`` or ``None`` if behind ``near``."""
    sp = project_splats(np.asarray(mean3, dtype=np.float64)[None], np.asarray(cov3, dtype=np.float64)[None], cam)
    if len(sp.index) == 0:
        return None
    return sp.mean2[0], sp.cov2[0], float(sp.depth[0])


def _project_vjp(sp, cam, g_mean2, g_cov2):
    xc, jac, cov_cam = sp.cache["xc"], sp.cache["jac"], sp.cache["cov_cam"]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    fx, fy = cam.fx, cam.fy
    g2 = 0.5 * (g_cov2 + np.swapaxes(g_cov2, -1, -2))
    g_cam = np.swapaxes(jac, -1, -2) @ g2 @ jac
    g_jac = 2.0 * g2 @ jac @ cov_cam
    iz = 1.0 / z
    iz2 = iz * iz
    g_xc = np.einsum("nij,ni->nj", jac, g_mean2)
    g_xc[:, 0] += g_jac[:, 0, 2] * (-fx * iz2)
    g_xc[:, 1] += g_jac[:, 1, 2] * (-fy * iz2)
    g_xc[:, 2] += (g_jac[:, 0, 0] * (-fx * iz2) + g_jac[:, 0, 2] * (2 * fx * x * iz2 * iz)
                   + g_jac[:, 1, 1] * (-fy * iz2) + g_jac[:, 1, 2] * (2 * fy * y * iz2 * iz))
    w = cam.rotation
    return g_xc @ w, w.T @ g_cam @ w


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------

def _conic(cov2):
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det


def splat_radius(cov2, sigma=TRUNCATION_SIGMA):
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    return sigma * np.sqrt(lam)


def _tiles(cam, size=TILE_SIZE):
    for y0 in range(0, cam.height, size):
        for x0 in range(0, cam.width, size):
            yield x0, y0, min(x0 + size, cam.width), min(y0 + size, cam.height)


def rasterize(splats, cam, background, truncation=TRUNCATION_SIGMA):
    """Front-to-back alpha compositing of depth-sorted splats.

    Returns ``(frame, cache)``.  Each splat only touches pixels inside the
    ``truncation``-sigma box around its center; a pixel stops accumulating once
    its transmittance falls below ``MIN_TRANSMITTANCE``.  Work is split into
    square pixel tiles, each seeing only the splats whose box overlaps it.
    """
    background = np.asarray(background, dtype=np.float64)
    order = np.argsort(splats.depth, kind="stable")
    mean2 = splats.mean2[order]
    cov2 = splats.cov2[order]
    op = splats.opacity[order]
    rgb = splats.rgb[order]
    conic = _conic(cov2)
    radius = splat_radius(cov2, truncation)
    lo = mean2 - radius[:, None]
    hi = mean2 + radius[:, None]
    color = np.empty((cam.height, cam.width, 3))
    tiles = []
    for x0, y0, x1, y1 in _tiles(cam):
        # pixel centers span [x0 + 0.5, x1 - 0.5]
        sel = np.nonzero((hi[:, 0] >= x0 + 0.5) & (lo[:, 0] <= x1 - 0.5)
                         & (hi[:, 1] >= y0 + 0.5) & (lo[:, 1] <= y1 - 0.5))[0]
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs.reshape(-1) + 0.5
        py = ys.reshape(-1) + 0.5
        tile = _composite_tile(sel, px, py, mean2, conic, radius, op, rgb, background)
        color[y0:y1, x0:x1] = tile.pop("color").reshape(y1 - y0, x1 - x0, 3)
        tile["rect"] = (x0, y0, x1, y1)
        tiles.append(tile)
    cache = {"order": order, "tiles": tiles, "rgb": rgb, "op": op, "conic": conic, "count": len(op)}
    return Frame(color), cache


def _composite_tile(sel, px, py, mean2, conic, radius, op, rgb, background):
    ca, cb, cc = (c[sel][:, None] for c in conic)
    dx = px[None, :] - mean2[sel, 0:1]
    dy = py[None, :] - mean2[sel, 1:2]
    r = radius[sel][:, None]
    box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    quad = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    gauss = np.exp(-0.5 * quad) * box
    raw = op[sel][:, None] * gauss
    capped = raw > ALPHA_MAX
    alpha = np.where(capped, ALPHA_MAX, raw)
    ones = np.ones((1, len(px)))
    trans = np.cumprod(1.0 - alpha, axis=0)
    before = np.vstack([ones, trans[:-1]])
    live = before >= MIN_TRANSMITTANCE
    alpha = alpha * live
    trans = np.cumprod(1.0 - alpha, axis=0)
    before = np.vstack([ones, trans[:-1]])
    weight = alpha * before
    final = trans[-1] if len(sel) else ones[0]
    color = weight.T @ rgb[sel] + final[:, None] * background[None, :]
    return {"sel": sel, "dx": dx, "dy": dy, "gauss": gauss, "capped": capped, "alpha": alpha,
            "before": before, "live": live, "weight": weight, "final": final, "box": box, "color": color}


def _rasterize_vjp(cache, background, g_color):
    """Gradients w.r.t. sorted-order ``mean2``, ``cov2``, ``opacity`` and ``rgb``.

    ``g_color`` has shape ``(height, width, 3)``.
    """
    n = cache["count"]
    g_mean2 = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_op = np.zeros(n)
    g_rgb = np.zeros((n, 3))
    for tile in cache["tiles"]:
        sel = tile["sel"]
        if len(sel) == 0:
            continue
        x0, y0, x1, y1 = tile["rect"]
        gc = g_color[y0:y1, x0:x1].reshape(-1, 3)
        alpha, before, weight = tile["alpha"], tile["before"], tile["weight"]
        rgb = cache["rgb"][sel]
        g_rgb[sel] += weight @ gc
        cg = rgb @ gc.T                                         # (M, P)
        tail = np.cumsum((cg * weight)[::-1], axis=0)[::-1]
        after = np.vstack([tail[1:], np.zeros((1, tail.shape[1]))]) + tile["final"] * (gc @ background)
        g_alpha = (before * cg - after / (1.0 - alpha)) * tile["live"]
        g_raw = g_alpha * ~tile["capped"]
        g_op[sel] += np.sum(g_raw * tile["gauss"], axis=1)
        g_quad = -0.5 * g_raw * cache["op"][sel][:, None] * tile["gauss"]
        ca, cb, cc = (c[sel][:, None] for c in cache["conic"])
        dx, dy = tile["dx"], tile["dy"]
        g_mean2[sel, 0] -= np.sum(g_quad * 2.0 * (ca * dx + cb * dy), axis=1)
        g_mean2[sel, 1] -= np.sum(g_quad * 2.0 * (cb * dx + cc * dy), axis=1)
        g_conic[sel, 0, 0] += np.sum(g_quad * dx * dx, axis=1)
        g_conic[sel, 1, 1] += np.sum(g_quad * dy * dy, axis=1)
        g_conic[sel, 0, 1] += np.sum(g_quad * dx * dy, axis=1)
    g_conic[:, 1, 0] = g_conic[:, 0, 1]
    ca, cb, cc = cache["conic"]
    conic = np.stack([np.stack([ca, cb], -1), np.stack([cb, cc], -1)], -2)
    g_cov2 = -conic @ g_conic @ conic
    return g_mean2, g_cov2, g_op, g_rgb


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------

def render_forward(model, cam, t, background=None, truncation=TRUNCATION_SIGMA):
    """Render and keep every intermediate needed by :func:`render_backward`."""
    background = model.background if background is None else np.asarray(background, dtype=np.float64)
    sl = slice_gaussians(model, t)
    sp = project_splats(sl.mean3, sl.cov3, cam, sl.opacity, sl.rgb)
    frame, rc = rasterize(sp, cam, background, truncation)
    return frame, {"slices": sl, "splats": sp, "raster": rc, "cam": cam, "background": background}


def render(model, cam, t, background=None):
    return render_forward(model, cam, t, background)[0]


def structure_signature(cache):
    """Discrete decisions of a forward pass (culling, sort order, boxes, caps, termination)."""
    sl, sp, rc = cache["slices"], cache["splats"], cache["raster"]
    parts = [sl.index.tobytes(), sp.index.tobytes(), rc["order"].tobytes()]
    for tile in rc["tiles"]:
        parts += [tile["sel"].tobytes(), tile["box"].tobytes(), tile["capped"].tobytes(), tile["live"].tobytes()]
    return tuple(parts)


def zero_grads(model):
    return {k: np.zeros_like(v) for k, v in model.parameters().items()}


def render_backward(model, cam, t, g_frame, cache=None):
    """Gradients of ``sum(g_frame * render(model, cam, t))`` for every model parameter.

    Returns a dict keyed like :meth:`SceneModel.parameters`.
    """
    if cache is None:
        cache = render_forward(model, cam, t)[1]
    grads = zero_grads(model)
    sl, sp, rc = cache["slices"], cache["splats"], cache["raster"]
    if len(sp.index) == 0:
        return grads
    g_color = np.asarray(g_frame, dtype=np.float64).reshape(cam.height, cam.width, 3)
    g_m2, g_c2, g_op, g_rgb = _rasterize_vjp(rc, cache["background"], g_color)
    # undo the depth sort
    inv = np.empty_like(rc["order"])
    inv[rc["order"]] = np.arange(len(inv))
    g_m2, g_c2, g_op, g_rgb = g_m2[inv], g_c2[inv], g_op[inv], g_rgb[inv]
    g_mean3_k, g_cov3_k = _project_vjp(sp, cam, g_m2, g_c2)
    # scatter from projected subset to slice subset
    m = len(sl.index)
    g_mean3 = np.zeros((m, 3))
    g_cov3 = np.zeros((m, 3, 3))
    g_eff = np.zeros(m)
    g_col = np.zeros((m, 3))
    g_mean3[sp.index] = g_mean3_k
    g_cov3[sp.index] = g_cov3_k
    g_eff[sp.index] = g_op
    g_col[sp.index] = g_rgb
    _slice_vjp(model, sl, g_mean3, g_cov3, g_eff, g_col, grads)
    return grads


def _schur_vjp(cov, g3):
    """Gradient of ``<g3, schur_tt(cov)>`` as a dense 4x4 array."""
    b = cov[:, :3, 3]
    d = cov[:, 3, 3]
    out = np.zeros(cov.shape)
    out[:, :3, :3] = g3
    gsym = g3 + np.swapaxes(g3, -1, -2)
    out[:, :3, 3] = -np.einsum("nij,nj->ni", gsym, b) / d[:, None]
    out[:, 3, 3] = np.einsum("ni,nij,nj->n", b, g3, b) / (d * d)
    return out


def _slice_vjp(model, sl, g_mean3, g_cov3, g_eff, g_col, grads):
    gs = model.gaussians
    c = sl.cache
    idx, t, tau = c["idx"], c["t"], c["tau"]
    mu = gs.means[idx]
    cov0, kernel = c["cov0"], c["kernel"]
    d0 = cov0[:, 3, 3]
    b0 = cov0[:, :3, 3]
    g_means = np.zeros((len(idx), 4))
    g_cov0 = np.zeros(cov0.shape)

    # color (clamped) and opacity
    rgb = gs.rgb[idx]
    grads["rgb"][idx] += g_col * ((rgb >= 0.0) & (rgb <= 1.0))
    base = _sigmoid(gs.opacity_logit[idx])
    if model.modulate_opacity:
        grads["opacity_logit"][idx] += g_eff * kernel * base * (1.0 - base)
        g_k = g_eff * base
        g_cov0[:, 3, 3] += g_k * kernel * 0.5 * tau * tau / (d0 * d0)
        g_means[:, 3] += g_k * kernel * tau / d0
    else:
        grads["opacity_logit"][idx] += g_eff * base * (1.0 - base)

    # mean: mu3 + displacement + v0 * tau
    g_means[:, :3] += g_mean3
    v0 = b0 / d0[:, None]
    g_means[:, 3] -= np.sum(g_mean3 * v0, axis=1)
    g_v0 = g_mean3 * tau[:, None]
    g_cov0[:, :3, 3] += g_v0 / d0[:, None]
    g_cov0[:, 3, 3] -= np.sum(g_v0 * b0, axis=1) / (d0 * d0)
    if model.use_velocity:
        track = c["track"]
        sub = _subset_track(track, idx)
        g_means[:, 3] -= np.sum(g_mean3 * velocity_at(sub, mu[:, 3]).reshape(len(idx), 3), axis=1)
        w = displacement_weights(track, mu[:, 3], np.full(len(idx), t))
        if track.per_gaussian:
            if track is model.track:
                grads["anchors"][idx] += w[:, :, None] * g_mean3[:, None, :]
        elif track is model.track:
            grads["anchors"] += w.T @ g_mean3

    # covariance: through the deformation network when enabled
    if model.use_net:
        s_def, ql_def, qr_def, rot_def = c["deformed"]
        g_cov_def = _schur_vjp(c["cov_def"], g_cov3)
        g_rot_def, g_s_def = la.cov4_vjp(rot_def, s_def, g_cov_def)
        g_ql_def, g_qr_def = la.rot4_vjp(ql_def, qr_def, g_rot_def)
        ds, dq, dqr = c["residuals"]
        g_s, g_ql, g_qr, g_ds, g_dq, g_dqr = apply_deformation_vjp(
            c["s_floor"], gs.q_l[idx], gs.q_r[idx], ds, dq, dqr, g_s_def, g_ql_def, g_qr_def)
        net_grads, in_grads = deform_backward(model.net, c["net_cache"], g_ds, g_dq, g_dqr)
        for k, v in net_grads.items():
            grads["net." + k] += v
        g_means[:, :3] += in_grads["mu3"]
        g_means[:, 3] += in_grads["mu_t"]
        net_track = c["net_track"]
        if net_track is model.track:
            if net_track.per_gaussian:
                grads["anchors"][idx] += in_grads["vel_feat"].reshape(len(idx), -1, 3)
            else:
                grads["anchors"] += in_grads["vel_feat"].reshape(-1, 3)
        grads["q_l"][idx] += g_ql
        grads["q_r"][idx] += g_qr
    else:
        g_cov0 += _schur_vjp(cov0, g_cov3)
        g_s = 0.0

    g_rot0, g_s0 = la.cov4_vjp(c["rot0"], c["s_floor"], g_cov0)
    g_ql0, g_qr0 = la.rot4_vjp(gs.q_l[idx], gs.q_r[idx], g_rot0)
    grads["q_l"][idx] += g_ql0
    grads["q_r"][idx] += g_qr0
    scales = np.exp(gs.log_scales[idx])
    grads["log_scales"][idx] += (g_s0 + g_s) * scales * (scales > SCALE_FLOOR)
    grads["means"][idx] += g_means


# --------------------------------------------------------------------------
# reference renderer (oracle)
# --------------------------------------------------------------------------

def composite_reference(mean2, cov2, depth, opacity, rgb, cam, background):
    """Per-pixel compositing without box truncation or early termination."""
    background = np.asarray(background, dtype=np.float64)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    pix = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)
    color = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    for i in np.argsort(depth, kind="stable"):
        d = pix - mean2[i]
        prec = np.linalg.inv(cov2[i])
        m = np.einsum("hwi,ij,hwj->hw", d, prec, d)
        a = np.minimum(opacity[i] * np.exp(-0.5 * m), ALPHA_MAX)
        color += (trans * a)[..., None] * rgb[i]
        trans = trans * (1.0 - a)
    color += trans[..., None] * background
    return Frame(color)


def render_reference(model, cam, t, background=None):
    """Truncation-free reference rendering of ``model`` (slow, used as an oracle)."""
    background = model.background if background is None else background
    sl = slice_gaussians(model, t)
    sp = project_splats(sl.mean3, sl.cov3, cam, sl.opacity, sl.rgb)
    return composite_reference(sp.mean2, sp.cov2, sp.depth, sp.opacity, sp.rgb, cam, background)
