import numpy as np
import pytest

from shearsplat import linalg as la
from shearsplat.deform import DeformNet
from shearsplat.errors import ConfigurationError
from shearsplat.motion import VelocityTrack, displacement_weights
from shearsplat.render import (ALPHA_MAX, CULL_THRESHOLD, Camera, Frame, Gaussian4D, GaussianSet, SceneModel,
                               composite_reference, project, project_splats, rasterize, render, render_backward,
                               render_forward, render_reference, slice_gaussian, slice_gaussians, splat_radius)

from conftest import fd_render_check, small_camera, small_model


def front_camera(size=16, fov=60.0):
    # looks down +y from y=-4; world x -> image right, world z -> image up
    return Camera.look_at([0.0, -4.0, 0.0], [0.0, 0.0, 0.0], size, size, fov_deg=fov)


def iso_gaussian(pos, t=0.5, scale=0.2, opacity=0.9, rgb=(1.0, 0.0, 0.0), tscale=1.0):
    logit = np.log(opacity / (1 - opacity))
    return Gaussian4D(np.r_[pos, t], la.IDENTITY_QUAT.copy(), la.IDENTITY_QUAT.copy(),
                      np.log([scale, scale, scale, tscale]), logit, np.array(rgb, dtype=float))


def model_of(gaussians, net=False, background=(0.0, 0.0, 0.0), **kw):
    gs = GaussianSet.from_list(gaussians)
    return SceneModel(gs, VelocityTrack.zeros(6), DeformNet.create(6, hidden=(8,)), use_net=net,
                      background=np.array(background), **kw)


# --------------------------------------------------------------------------
# cameras and frames
# --------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(fx=0.0), dict(near=0.0), dict(width=0), dict(rotation=np.diag([1.0, 1.0, -1.0])),
                                dict(rotation=2 * np.eye(3))])
def test_camera_validation(kw):
    args = dict(fx=10.0, fy=10.0, cx=8.0, cy=8.0, width=16, height=16)
    args.update(kw)
    with pytest.raises(ConfigurationError):
        Camera(**args)


def test_look_at_target_projects_to_image_center():
    cam = small_camera(32)
    m2, _, depth = project(np.zeros(3), 0.01 * np.eye(3), cam)
    assert np.allclose(m2, [16.0, 16.0], atol=1e-12)
    assert np.isclose(depth, np.linalg.norm([0.0, -3.0, 0.3]))


def test_image_axes_orientation():
    cam = front_camera(32)
    right, _, _ = project(np.array([0.5, 0.0, 0.0]), 0.01 * np.eye(3), cam)
    up, _, _ = project(np.array([0.0, 0.0, 0.5]), 0.01 * np.eye(3), cam)
    assert right[0] > 16 and np.isclose(right[1], 16)
    assert up[1] < 16 and np.isclose(up[0], 16)


def test_behind_camera_is_dropped():
    cam = front_camera()
    assert project(np.array([0.0, -5.0, 0.0]), np.eye(3), cam) is None


def test_projected_covariance_includes_dilation():
    cam = front_camera(32)
    _, c2, _ = project(np.zeros(3), np.zeros((3, 3)), cam)
    assert np.allclose(c2, 0.3 * np.eye(2))


def test_ppm_round_trip_and_rounding(tmp_path):
    rgb = np.array([[[0.0, 1.0, 0.5], [2.0, -1.0, 0.5 / 255]]])
    frame = Frame(rgb)
    data = frame.to_ppm()
    assert data.startswith(b"P6\n2 1\n255\n")
    assert data[-6:] == bytes([0, 255, 128, 255, 0, 1])
    path = tmp_path / "f.ppm"
    frame.write_ppm(path)
    back = Frame.read_ppm(path)
    assert back.to_ppm() == data


@pytest.mark.parametrize("data", [b"P3\n1 1\n255\n\x00\x00\x00", b"P6\n2 2\n255\n\x00", b"P6\n1", b""])
def test_bad_ppm_rejected(data):
    with pytest.raises(ConfigurationError):
        Frame.from_ppm(data)


def test_ppm_header_comment_is_skipped():
    f = Frame.from_ppm(b"P6\n# made by hand\n1 1\n255\n\x0a\x14\x1e")
    assert np.allclose(f.rgb[0, 0] * 255, [10, 20, 30])


# --------------------------------------------------------------------------
# compositing
# --------------------------------------------------------------------------

def test_empty_model_renders_background():
    m = SceneModel(GaussianSet.empty(), VelocityTrack.zeros(6), DeformNet.create(6, hidden=(4,)),
                   background=np.array([0.1, 0.2, 0.3]))
    frame = render(m, front_camera(), 0.5)
    assert np.array_equal(frame.rgb, np.broadcast_to([0.1, 0.2, 0.3], (16, 16, 3)))
    grads = render_backward(m, front_camera(), 0.5, np.ones((16, 16, 3)))
    assert all(np.all(g == 0) for g in grads.values())


def test_single_splat_center_pixel_hand_value():
    # odd image size puts a pixel center exactly on the projected mean
    cam = Camera(20.0, 20.0, 3.5, 3.5, 7, 7, np.eye(3), np.array([0.0, 0.0, 4.0]))
    m = model_of([iso_gaussian([0.0, 0.0, 0.0], opacity=0.6, rgb=(0.2, 0.4, 0.8))], background=(1.0, 1.0, 1.0))
    out = render(m, cam, 0.5).rgb[3, 3]
    assert np.allclose(out, 0.6 * np.array([0.2, 0.4, 0.8]) + 0.4 * np.ones(3), atol=1e-12)


def test_two_overlapping_splats_front_half_alpha():
    cam = Camera(20.0, 20.0, 3.5, 3.5, 7, 7, np.eye(3), np.array([0.0, 0.0, 4.0]))
    front = iso_gaussian([0.0, 0.0, -1.0], opacity=0.5, rgb=(1.0, 0.0, 0.0))
    back = iso_gaussian([0.0, 0.0, 1.0], opacity=0.7, rgb=(0.0, 0.0, 1.0))
    bg = np.array([0.0, 1.0, 0.0])
    rest = render(model_of([back], background=bg), cam, 0.5).rgb[3, 3]
    both = render(model_of([back, front], background=bg), cam, 0.5).rgb[3, 3]
    assert np.allclose(both, 0.5 * np.array([1.0, 0.0, 0.0]) + 0.5 * rest, atol=1e-12)


def test_alpha_is_capped():
    cam = Camera(20.0, 20.0, 3.5, 3.5, 7, 7, np.eye(3), np.array([0.0, 0.0, 4.0]))
    m = model_of([iso_gaussian([0.0, 0.0, 0.0], opacity=0.9999, rgb=(0.0, 0.0, 0.0))], background=(1.0, 1.0, 1.0))
    assert np.allclose(render(m, cam, 0.5).rgb[3, 3], 1.0 - ALPHA_MAX)


def test_input_order_does_not_matter():
    g = [iso_gaussian([0.3 * k - 0.3, 0.2 * k, 0.1], rgb=np.eye(3)[k], opacity=0.7) for k in range(3)]
    a = render(model_of(g), front_camera(), 0.5).rgb
    b = render(model_of(g[::-1]), front_camera(), 0.5).rgb
    assert np.allclose(a, b, atol=1e-15)


def test_culled_gaussian_is_invisible():
    g = iso_gaussian([0.0, 0.0, 0.0], t=0.5, tscale=0.05)
    m = model_of([g], background=(0.3, 0.3, 0.3))
    assert not np.allclose(render(m, front_camera(), 0.5).rgb, 0.3)
    # kernel exp(-0.5 * (0.2/0.05)^2) is far below the threshold
    assert np.array_equal(render(m, front_camera(), 0.7).rgb, np.full((16, 16, 3), 0.3))
    assert slice_gaussian(g, VelocityTrack.zeros(6), None, 0.7) is None


def test_cull_threshold_boundary():
    g = iso_gaussian([0.0, 0.0, 0.0], t=0.0, tscale=1.0)
    tau = np.sqrt(-2 * np.log(CULL_THRESHOLD))
    assert slice_gaussian(g, VelocityTrack.zeros(6), None, tau * 0.999) is not None
    assert slice_gaussian(g, VelocityTrack.zeros(6), None, tau * 1.001) is None


def test_opacity_modulation_flag():
    g = iso_gaussian([0.0, 0.0, 0.0], t=0.0, opacity=0.8)
    tr = VelocityTrack.zeros(6)
    _, _, mod, _ = slice_gaussian(g, tr, None, 1.0)
    _, _, flat, _ = slice_gaussian(g, tr, None, 1.0, modulate_opacity=False)
    assert np.isclose(flat, 0.8)
    assert np.isclose(mod, 0.8 * np.exp(-0.5))


def test_tiled_renderer_matches_reference():
    for seed in range(3):
        m = small_model(seed, n=6)
        cam = small_camera(40)
        fast = render(m, cam, 0.5).rgb
        ref = render_reference(m, cam, 0.5).rgb
        # remaining differences come from 3-sigma truncation and early termination
        assert np.max(np.abs(fast - ref)) < 0.05
        sl = slice_gaussians(m, 0.5)
        sp = project_splats(sl.mean3, sl.cov3, cam, sl.opacity, sl.rgb)
        wide = rasterize(sp, cam, m.background, truncation=40.0)[0].rgb
        ref2 = composite_reference(sp.mean2, sp.cov2, sp.depth, sp.opacity, sp.rgb, cam, m.background).rgb
        assert np.max(np.abs(wide - ref2)) < 1e-3


def test_splat_radius_uses_largest_eigenvalue():
    cov2 = np.array([[[4.0, 0.0], [0.0, 1.0]], [[2.0, 1.0], [1.0, 2.0]]])
    assert np.allclose(splat_radius(cov2), [6.0, 3.0 * np.sqrt(3.0)])


# --------------------------------------------------------------------------
# slicing, identity at init and decoupling
# --------------------------------------------------------------------------

def test_batch_slice_matches_single_wrapper():
    m = small_model(3, n=4, zero_head=True)
    sl = slice_gaussians(m, 0.45)
    for k, i in enumerate(sl.index):
        mean3, cov3, op, rgb = slice_gaussian(m.gaussians[i], m.track, m.net, 0.45)
        assert np.allclose(mean3, sl.mean3[k], atol=1e-14)
        assert np.allclose(cov3, sl.cov3[k], atol=1e-14)
        assert np.isclose(op, sl.opacity[k])


def test_zero_initialized_network_is_bit_identical():
    for seed in range(3):
        m = small_model(seed, n=5, zero_head=True, hidden=(64, 64, 64))
        off = SceneModel(m.gaussians, m.track, m.net, use_net=False, background=m.background)
        for t in (0.2, 0.5, 0.8):
            assert np.array_equal(render(m, small_camera(), t).rgb, render(off, small_camera(), t).rgb)


def test_velocity_perturbation_moves_means_only():
    m = small_model(7, n=5, zero_head=False)
    other = VelocityTrack(m.track.anchors + 0.3, m.track.t_start, m.track.t_end)
    for t in np.linspace(0.3, 0.7, 5):
        a = slice_gaussians(m, t)
        b = slice_gaussians(m, t, track=other, net_track=m.track)
        assert np.array_equal(a.index, b.index)
        assert np.array_equal(a.cov3, b.cov3)
        assert np.array_equal(a.opacity, b.opacity)
        assert not np.allclose(a.mean3, b.mean3)


def test_velocity_disabled_ignores_track():
    m = small_model(2, n=3)
    m.use_velocity = False
    a = slice_gaussians(m, 0.6, net_track=m.track)
    b = slice_gaussians(m, 0.6, track=VelocityTrack(m.track.anchors + 1.0), net_track=m.track)
    assert np.array_equal(a.mean3, b.mean3)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

@pytest.mark.parametrize("seed,per", [(0, False), (1, False), (2, True)])
def test_renderer_gradients_match_finite_differences(seed, per):
    m = small_model(seed, per_gaussian=per)
    cam = small_camera()
    g = np.random.default_rng(100 + seed).normal(size=(16, 16, 3))
    frame, cache = render_forward(m, cam, 0.5)
    grads = render_backward(m, cam, 0.5, g, cache)
    errs = fd_render_check(m, cam, 0.5, g, grads)
    assert max(errs.values()) < 1e-3, errs


def test_zero_upstream_gradient_gives_zero_grads():
    m = small_model(0)
    cam = small_camera()
    g = np.zeros((16, 16, 3))
    grads = render_backward(m, cam, 0.5, g)
    assert all(np.all(v == 0) for v in grads.values())


def test_anchor_gradient_follows_trapezoid_weights():
    # a loss that depends on one Gaussian only through its x-position
    g = iso_gaussian([0.1, 0.0, 0.05], t=0.23)
    m = model_of([g])
    cam = front_camera()
    upstream = np.zeros((16, 16, 3))
    upstream[:, 9:, 0] = 1.0
    grads = render_backward(m, cam, 0.71, upstream)
    w = displacement_weights(m.track, 0.23, 0.71).ravel()
    ga = grads["anchors"]
    assert np.abs(ga[:, 0]).max() > 0
    assert np.allclose(ga[:, 0], w * (ga[:, 0] @ w) / (w @ w), rtol=1e-12, atol=1e-15)
