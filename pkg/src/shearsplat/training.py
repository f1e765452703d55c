"""Image losses, metrics, Adam and the fitting loop."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg as la
from .deform import SCALE_FLOOR
from .errors import ConfigurationError, DivergenceError
from .render import (CULL_THRESHOLD, GAUSSIAN_FIELDS, GaussianSet, SceneModel, render_backward,
                     render_forward)
from .motion import VelocityTrack

METRICS_HEADER = "iteration\tseconds\ttrain_loss\tpsnr\tssim\tgaussians"


# --------------------------------------------------------------------------
# metrics and losses
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.8
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must lie in [0, 1]", "lam")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigurationError("SSIM window must be odd and >= 3", "ssim_window")


def _pixels(frame):
    return np.asarray(getattr(frame, "rgb", frame), dtype=np.float64)


def _same_shape(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"frame shapes differ: {a.shape} vs {b.shape}", "frame")
    return a, b


def l1_loss(a, b):
    """Mean absolute difference over all channel values."""
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b):
    """PSNR in dB on unit range, capped at 100 dB."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * np.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter(x, k):
    n = len(k)
    y = np.lib.stride_tricks.sliding_window_view(x, n, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(y, n, axis=1) @ k


def _filter_t(y, k):
    # adjoint of the valid-mode filter: full convolution with the (symmetric) window
    n = len(k) - 1
    return _filter(np.pad(y, ((n, n), (n, n), (0, 0))), k[::-1])


def _ssim_terms(a, b, cfg):
    k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    mu_a, mu_b = _filter(a, k), _filter(b, k)
    var_a = _filter(a * a, k) - mu_a * mu_a
    var_b = _filter(b * b, k) - mu_b * mu_b
    cov = _filter(a * b, k) - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + cfg.ssim_c1
    a2 = 2 * cov + cfg.ssim_c2
    b1 = mu_a * mu_a + mu_b * mu_b + cfg.ssim_c1
    b2 = var_a + var_b + cfg.ssim_c2
    return k, mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b, cfg=None):
    """Mean SSIM with a Gaussian window (valid positions only), averaged over channels."""
    cfg = cfg or LossConfig()
    a, b = _same_shape(a, b)
    if min(a.shape[:2]) < cfg.ssim_window:
        raise ConfigurationError("image smaller than the SSIM window", "ssim_window")
    _, _, _, a1, a2, b1, b2 = _ssim_terms(a, b, cfg)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_grad(a, b, cfg=None):
    """SSIM value and its gradient with respect to ``a``."""
    cfg = cfg or LossConfig()
    a, b = _same_shape(a, b)
    if min(a.shape[:2]) < cfg.ssim_window:
        raise ConfigurationError("image smaller than the SSIM window", "ssim_window")
    k, mu_a, mu_b, a1, a2, b1, b2 = _ssim_terms(a, b, cfg)
    den = b1 * b2
    s = a1 * a2 / den
    scale = 1.0 / s.size
    d_mu = (2 * mu_b * a2 / den - s * 2 * mu_a / b1) * scale
    d_var = -s / b2 * scale
    d_cov = 2 * a1 / den * scale
    d_mu_total = d_mu - 2 * mu_a * d_var - mu_b * d_cov
    grad = _filter_t(d_mu_total, k) + 2 * a * _filter_t(d_var, k) + b * _filter_t(d_cov, k)
    return float(np.mean(s)), grad


def loss_and_grad(a, b, cfg=None):
    """``lam * L1 + (1 - lam) * (1 - SSIM)`` and its gradient w.r.t. ``a``."""
    cfg = cfg or LossConfig()
    a, b = _same_shape(a, b)
    diff = a - b
    l1 = float(np.mean(np.abs(diff)))
    g = cfg.lam * np.sign(diff) / diff.size
    value = cfg.lam * l1
    if cfg.lam < 1.0:
        s, gs = ssim_grad(a, b, cfg)
        value += (1.0 - cfg.lam) * (1.0 - s)
        g = g - (1.0 - cfg.lam) * gs
    return value, g


def loss(a, b, cfg=None):
    return loss_and_grad(a, b, cfg)[0]


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

PARAM_GROUPS = {
    "means": "position", "log_scales": "scales", "q_l": "rotation", "q_r": "rotation",
    "opacity_logit": "opacity", "rgb": "rgb", "anchors": "velocity",
}


def param_group(name):
    return "network" if name.startswith("net.") else PARAM_GROUPS[name]


@dataclass
class OptimConfig:
    position: float = 1.6e-4
    scales: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    rgb: float = 2.5e-3
    velocity: float = 2e-3
    network: float = 8e-4
    network_final: float = 1.6e-6
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    total_steps: int = 1


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    config: OptimConfig = field(default_factory=OptimConfig)
    frozen: frozenset = frozenset()

    def learning_rate(self, group, step=None):
        cfg = self.config
        step = self.step if step is None else step
        if group == "network":
            r = min(max(step / max(cfg.total_steps, 1), 0.0), 1.0)
            return float(np.exp(np.log(cfg.network) * (1 - r) + np.log(cfg.network_final) * r))
        return getattr(cfg, group)


def adam_step(state, params, grads):
    """One in-place Adam update of ``params`` (bias-corrected, decoupled decay on net weights)."""
    cfg = state.config
    lrs = {}
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    for name, p in params.items():
        group = param_group(name)
        if group in state.frozen or name not in grads:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape}", name)
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        lr = lrs.setdefault(group, state.learning_rate(group, state.step - 1))
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if group == "network" and name.startswith("net.w"):
            update = update + cfg.weight_decay * p
        p -= lr * update
    return state


def reindex_state(state, keep, clone=None):
    """Carry Adam moments through a prune (``keep`` indices) and clone (appended zero rows)."""
    n_new = 0 if clone is None else len(clone)
    for name in list(state.m):
        if name in GAUSSIAN_FIELDS or (name == "anchors" and state.m[name].ndim == 3):
            for buf in (state.m, state.v):
                arr = buf[name][keep]
                buf[name] = np.concatenate([arr, np.zeros((n_new,) + arr.shape[1:])])


# --------------------------------------------------------------------------
# densification
# --------------------------------------------------------------------------

@dataclass
class DensifyStats:
    grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def add(self, grads, visible):
        self.grad_sum[visible] += np.linalg.norm(grads["means"][visible, :3], axis=1)
        self.count[visible] += 1

    def mean(self):
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyConfig:
    every: int = 100
    start: int = 200
    grad_threshold: float = 2e-3
    min_opacity: float = 0.005
    max_gaussians: int = 500


def visible_any(gaussians, times):
    """True for Gaussians whose temporal kernel reaches the cull threshold at some time."""
    if len(gaussians) == 0:
        return np.zeros(0, dtype=bool)
    s = np.maximum(np.exp(gaussians.log_scales), SCALE_FLOOR)
    cov = la.cov4_from_rot(la.quat_pair_to_rot4(gaussians.q_l, gaussians.q_r), s)
    d = cov[:, 3, 3]
    tau = np.asarray(times)[None, :] - gaussians.means[:, 3:4]
    return np.any(np.exp(-0.5 * tau * tau / d[:, None]) >= CULL_THRESHOLD, axis=1)


def densify_prune(model, stats, times, cfg=None, state=None):
    """Prune faint or never-visible Gaussians and clone high-gradient ones.

    Clones split along the largest spatial axis: two copies offset by half that
    scale, scales shrunk by 0.8 and opacity lowered so the stacked pair keeps
    roughly the original alpha.  Returns ``(model, keep, n_cloned)``.
    """
    cfg = cfg or DensifyConfig()
    gs = model.gaussians
    keep_mask = (gs.opacity >= cfg.min_opacity) & visible_any(gs, times)
    grad = stats.mean()
    cand = np.nonzero(keep_mask & (grad > cfg.grad_threshold))[0]
    room = max(cfg.max_gaussians - int(keep_mask.sum()), 0)
    cand = cand[np.argsort(-grad[cand], kind="stable")][:room]
    keep = np.nonzero(keep_mask)[0]
    if len(keep) == 0:
        # never leave the model empty
        keep = np.array([int(np.argmax(gs.opacity))])
    new = gs.subset(keep)
    anchors = model.track.anchors[keep] if model.track.per_gaussian else model.track.anchors
    if len(cand):
        src = gs.subset(cand)
        s = np.maximum(np.exp(src.log_scales), SCALE_FLOOR)
        rot = la.quat_pair_to_rot4(src.q_l, src.q_r)
        axis = np.argmax(s[:, :3], axis=1)
        direction = rot[np.arange(len(cand)), :, axis]
        offset = 0.5 * s[np.arange(len(cand)), axis][:, None] * direction
        op = src.opacity
        split_op = 1.0 - np.sqrt(1.0 - op)
        logit = np.log(split_op) - np.log1p(-split_op)
        # first copy replaces the source in place, second copy is appended
        pos = np.searchsorted(keep, cand)
        new.means[pos] = src.means + offset
        new.log_scales[pos] = src.log_scales + np.log(0.8)
        new.opacity_logit[pos] = logit
        extra = GaussianSet(src.means - offset, src.q_l, src.q_r, src.log_scales + np.log(0.8), logit, src.rgb)
        new = GaussianSet(*(np.concatenate([getattr(new, f), getattr(extra, f)]) for f in GAUSSIAN_FIELDS))
        if model.track.per_gaussian:
            anchors = np.concatenate([anchors, model.track.anchors[cand]])
    track = VelocityTrack(anchors.copy(), model.track.t_start, model.track.t_end)
    out = SceneModel(new, track, model.net, model.use_velocity, model.use_net, model.modulate_opacity,
                     model.background)
    if state is not None:
        reindex_state(state, keep, cand)
    return out, keep, len(cand)


# --------------------------------------------------------------------------
# fitting loop
# --------------------------------------------------------------------------

@dataclass
class FitConfig:
    iterations: int = 3000
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    densify_enabled: bool = True
    eval_every: int = 500
    eval_time_stride: int = 4
    log_wallclock: bool = True
    frozen: tuple = ()


@dataclass
class FitState:
    """Everything the loop needs to resume bit-exactly."""

    iteration: int
    optim: OptimState
    rng: np.random.Generator
    stats: DensifyStats
    pending_loss: list = field(default_factory=list)


@dataclass
class FitResult:
    model: SceneModel
    state: FitState
    losses: list
    records: list


def frozen_groups(model, cfg):
    frozen = set(cfg.frozen)
    if not model.use_velocity:
        frozen.add("velocity")
    if not model.use_net:
        frozen.add("network")
    return frozenset(frozen)


def new_fit_state(model, cfg, seed=0):
    optim_cfg = OptimConfig(**{**cfg.optim.__dict__, "total_steps": cfg.iterations})
    return FitState(0, OptimState(config=optim_cfg, frozen=frozen_groups(model, cfg)),
                    np.random.default_rng(seed), DensifyStats.zeros(len(model)))


def evaluate(model, views, loss_cfg=None):
    """Mean PSNR and SSIM of ``model`` over ``(camera, t, frame)`` views."""
    if not views:
        return float("nan"), float("nan")
    ps, ss = [], []
    for cam, t, gt in views:
        frame = render_forward(model, cam, t)[0]
        ps.append(psnr(frame, gt))
        ss.append(ssim(frame, gt, loss_cfg))
    return float(np.mean(ps)), float(np.mean(ss))


def format_record(iteration, seconds, train_loss, p, s, count):
    return f"{iteration}\t{seconds:.3f}\t{train_loss:.8f}\t{p:.4f}\t{s:.6f}\t{count}"


def fit(model, train_views, cfg=None, test_views=(), state=None, log=None, times=None,
        on_divergence=None, seed=0, until=None, on_checkpoint=None, checkpoint_every=0):
    """Fit ``model`` to ``(camera, t, frame)`` training views.

    Runs until ``cfg.iterations`` total iterations (resuming from ``state`` if
    given).  ``log`` is a writable text stream receiving the metrics header (on
    a fresh start) and one tab-separated record per evaluation.  ``on_divergence``
    is called with ``(model, state)`` before a :class:`DivergenceError` is raised.
    ``until`` stops early (the schedules still span ``cfg.iterations``), and
    ``on_checkpoint(model, state)`` runs every ``checkpoint_every`` iterations.
    """
    cfg = cfg or FitConfig()
    if not train_views:
        raise ConfigurationError("at least one training frame is required", "dataset")
    fresh = state is None
    state = new_fit_state(model, cfg, seed) if fresh else state
    state.optim.config.total_steps = cfg.iterations
    times = np.unique([t for _, t, _ in train_views]) if times is None else np.asarray(times)
    test_subset = list(test_views)
    if cfg.eval_time_stride > 1 and test_subset:
        test_subset = test_subset[::cfg.eval_time_stride]
    if log is not None and fresh:
        log.write(METRICS_HEADER + "\n")
    losses, records = [], []
    start = time.perf_counter()
    stop = cfg.iterations if until is None else min(int(until), cfg.iterations)
    while state.iteration < stop:
        it = state.iteration
        cam, t, gt = train_views[int(state.rng.integers(len(train_views)))]
        frame, cache = render_forward(model, cam, t)
        value, g_img = loss_and_grad(frame, gt, cfg.loss)
        grads = render_backward(model, cam, t, g_img, cache)
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            if on_divergence is not None:
                on_divergence(model, state)
            raise DivergenceError(f"non-finite loss or gradient at iteration {it}", iteration=it)
        adam_step(state.optim, model.parameters(), grads)
        model.track.refresh()
        visible = cache["slices"].index
        state.stats.add(grads, visible)
        losses.append(value)
        state.pending_loss.append(value)
        state.iteration += 1
        done = state.iteration
        if (cfg.densify_enabled and done % cfg.densify.every == 0 and cfg.densify.start <= done
                and done <= cfg.iterations // 2):
            model, _, _ = densify_prune(model, state.stats, times, cfg.densify, state.optim)
            state.stats = DensifyStats.zeros(len(model))
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            p, s = evaluate(model, test_subset, cfg.loss)
            seconds = time.perf_counter() - start if cfg.log_wallclock else 0.0
            rec = format_record(done, seconds, float(np.mean(state.pending_loss)), p, s, len(model))
            state.pending_loss = []
            records.append(rec)
            if log is not None:
                log.write(rec + "\n")
                log.flush()
        if on_checkpoint is not None and checkpoint_every and done % checkpoint_every == 0:
            on_checkpoint(model, state)
    return FitResult(model, state, losses, records)
