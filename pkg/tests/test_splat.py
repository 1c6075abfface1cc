import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specsplat.camera import look_at
from specsplat.splat import (
    CH_DEPTH,
    CH_DIFF,
    MAX_ALPHA,
    MIN_ALPHA,
    T_EPS,
    DensifyConfig,
    GaussianCloud,
    densify_and_prune,
    project,
    quat_to_rot,
    rasterize,
    rasterize_backward,
)


def axis_view(size=9):
    # camera at z = -3 looking at the origin; odd size puts a pixel center on the axis
    return look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3), up=(0.0, -1.0, 0.0), width=size, height=size, fov_deg=40)


def random_cloud(rng, n, spread=0.3, size=0.15):
    return GaussianCloud.create(rng.normal(size=(n, 3)) * spread, np.exp(rng.normal(size=(n, 3)) * 0.3) * size,
                                quats=rng.normal(size=(n, 4)), opacity=rng.uniform(0.2, 0.95, n),
                                c_diff=rng.uniform(size=(n, 3)), f0=rng.uniform(size=(n, 3)),
                                roughness=rng.uniform(0.1, 0.9, n))


def brute_force(cloud, view):
    """Direct front-to-back evaluation of the blend at every pixel."""
    p = project(cloud, view)
    h, w = view.height, view.width
    out = np.zeros((h, w, p.feat.shape[1]))
    alpha = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            T = 1.0
            for g in p.order:
                r = p.radius[g]
                dx, dy = px - p.mean2d[g, 0], py - p.mean2d[g, 1]
                if abs(dx) > r or abs(dy) > r:
                    continue
                a_, b_, c_ = p.conic[g]
                power = -0.5 * (a_ * dx * dx + c_ * dy * dy) - b_ * dx * dy
                if power > 0:
                    continue
                a = min(MAX_ALPHA, p.opacity[g] * np.exp(power))
                if a < MIN_ALPHA:
                    continue
                if T * (1 - a) < T_EPS:
                    break
                out[py, px] += p.feat[g] * a * T
                T *= 1 - a
            alpha[py, px] = 1 - T
    return out, alpha


def test_single_gaussian_centre_pixel():
    view = axis_view()
    cloud = GaussianCloud.create([[0.0, 0.0, 0.0]], [0.2, 0.2, 0.02], opacity=0.6, c_diff=[0.2, 0.5, 0.8])
    gb = rasterize(cloud, view)
    np.testing.assert_allclose(gb.alpha[4, 4], 0.6, atol=1e-12)
    np.testing.assert_allclose(gb.c_diff[4, 4], 0.6 * np.array([0.2, 0.5, 0.8]), atol=1e-12)


def test_two_gaussians_blend():
    view = axis_view()
    cloud = GaussianCloud.create([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]], [0.2, 0.2, 0.02], opacity=[0.6, 0.5],
                                 c_diff=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    gb = rasterize(cloud, view)
    expect = 0.6 * np.array([1.0, 0.0, 0.0]) + 0.5 * 0.4 * np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(gb.c_diff[4, 4], expect, atol=1e-12)


def test_empty_cloud():
    gb = rasterize(GaussianCloud.empty(), axis_view())
    assert not gb.buf.any() and not gb.alpha.any()
    _, ctx = rasterize(GaussianCloud.empty(), axis_view(), return_context=True)
    grads = rasterize_backward(GaussianCloud.empty(), ctx, np.ones((9, 9, 11)))
    assert all(g.size == 0 for g in grads.values())


def test_opaque_depth_matches_centre_depth():
    view = axis_view()
    cloud = GaussianCloud.create([[0.0, 0.0, 0.25]], [0.5, 0.5, 0.01], opacity=0.999999)
    gb = rasterize(cloud, view)
    assert gb.expected_depth()[4, 4] == pytest.approx(3.25, abs=1e-4)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n)
    view = look_at(np.array([0.3, -2.0, 0.4]), np.zeros(3), width=12, height=10, fov_deg=40)
    ref_buf, ref_alpha = brute_force(cloud, view)
    for tiled in (True, False):
        gb = rasterize(cloud, view, tiled=tiled)
        np.testing.assert_allclose(gb.buf, ref_buf, atol=1e-12)
        np.testing.assert_allclose(gb.alpha, ref_alpha, atol=1e-12)


def test_tiled_equals_reference_bitwise():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 300, spread=0.4, size=0.05)
    view = look_at(np.array([1.0, -2.0, 0.8]), np.zeros(3), width=40, height=33)
    a = rasterize(cloud, view, tiled=True)
    b = rasterize(cloud, view, tiled=False)
    assert np.array_equal(a.buf, b.buf) and np.array_equal(a.alpha, b.alpha)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_alpha_bounded_and_monotone(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 6)
    view = look_at(np.array([0.0, -2.5, 0.5]), np.zeros(3), width=16, height=16)
    a = rasterize(cloud, view).alpha
    assert np.all((a >= 0) & (a <= 1))
    more = cloud.concat(random_cloud(rng, 1))
    # early termination can cut a tail that is below T_EPS
    assert np.all(rasterize(more, view).alpha >= a - T_EPS)


def _loss_fn(cloud, view, w_buf, w_a):
    gb = rasterize(cloud, view)
    return float(np.sum(gb.buf * w_buf) + np.sum(gb.alpha * w_a))


def test_backward_finite_differences_all_params():
    rng = np.random.default_rng(3)
    view = look_at(np.array([0.0, -2.0, 0.3]), np.zeros(3), width=8, height=8, fov_deg=35)
    cloud = random_cloud(rng, 3, spread=0.1)
    w_buf, w_a = rng.normal(size=(8, 8, 11)), rng.normal(size=(8, 8))
    _, ctx = rasterize(cloud, view, return_context=True)
    grads = rasterize_backward(cloud, ctx, w_buf, w_a)
    h = 1e-5
    for key in cloud.PARAMS:
        arr = getattr(cloud, key)
        for flat in range(arr.size):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = _loss_fn(cloud, view, w_buf, w_a)
            arr[idx] = old - h
            dn = _loss_fn(cloud, view, w_buf, w_a)
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            g = grads[key][idx]
            assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-5), (key, idx, fd, g)


def test_backward_directional_derivative():
    rng = np.random.default_rng(4)
    view = look_at(np.array([0.5, -2.0, 0.3]), np.zeros(3), width=16, height=16)
    cloud = random_cloud(rng, 8, spread=0.2)
    w_buf, w_a = rng.normal(size=(16, 16, 11)), rng.normal(size=(16, 16))
    _, ctx = rasterize(cloud, view, return_context=True)
    grads = rasterize_backward(cloud, ctx, w_buf, w_a)
    v = {k: rng.normal(size=a.shape) for k, a in cloud.arrays().items()}
    h = 1e-6

    def shifted(s):
        return GaussianCloud(**{k: a + s * v[k] for k, a in cloud.arrays().items()})

    fd = (_loss_fn(shifted(h), view, w_buf, w_a) - _loss_fn(shifted(-h), view, w_buf, w_a)) / (2 * h)
    an = sum(np.sum(grads[k] * v[k]) for k in cloud.PARAMS)
    assert an == pytest.approx(fd, rel=1e-3)


def test_backward_linear_and_local():
    rng = np.random.default_rng(5)
    view = axis_view(16)
    cloud = GaussianCloud.create([[0.0, 0.0, 0.0]], [0.05, 0.05, 0.01], opacity=0.8)
    _, ctx = rasterize(cloud, view, return_context=True)
    g_far = np.zeros((16, 16, 11))
    g_far[0, 0] = 1.0  # pixel the Gaussian does not reach
    assert all(not g.any() for g in rasterize_backward(cloud, ctx, g_far).values())
    w = rng.normal(size=(16, 16, 11))
    g1 = rasterize_backward(cloud, ctx, w)
    g2 = rasterize_backward(cloud, ctx, 2 * w)
    for k in cloud.PARAMS:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_tiled_backward_matches_reference():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 60, spread=0.3, size=0.08)
    view = look_at(np.array([1.0, -2.0, 0.8]), np.zeros(3), width=24, height=20)
    w = rng.normal(size=(20, 24, 11))
    _, ctx_t = rasterize(cloud, view, return_context=True, tiled=True)
    _, ctx_r = rasterize(cloud, view, return_context=True, tiled=False)
    gt, gr = rasterize_backward(cloud, ctx_t, w), rasterize_backward(cloud, ctx_r, w)
    for k in cloud.PARAMS:
        np.testing.assert_allclose(gt[k], gr[k], rtol=1e-10, atol=1e-12)


def test_normals_face_camera():
    view = axis_view()
    q = np.array([[np.cos(0.3), np.sin(0.3), 0.0, 0.0]])
    cloud = GaussianCloud.create([[0.0, 0.0, 0.0]], [0.3, 0.3, 0.01], quats=q, opacity=0.9)
    gb = rasterize(cloud, view)
    n = gb.normal[4, 4]
    assert n @ (view.center - 0.0) > 0
    np.testing.assert_allclose(np.linalg.norm(n), 1.0)


def test_quat_to_rot_orthonormal():
    rng = np.random.default_rng(7)
    R = quat_to_rot(rng.normal(size=(20, 4)))
    np.testing.assert_allclose(R @ np.transpose(R, (0, 2, 1)), np.broadcast_to(np.eye(3), (20, 3, 3)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0)


def test_densify_no_hot_gaussians_only_prunes():
    rng = np.random.default_rng(8)
    cloud = random_cloud(rng, 10)
    cloud.opacity_logit[:3] = -10.0
    out = densify_and_prune(cloud, np.zeros(10), np.ones(10), DensifyConfig(), rng)
    assert len(out) == 7
    np.testing.assert_array_equal(out.means, cloud.means[3:])


def test_densify_split_and_clone():
    rng = np.random.default_rng(9)
    cloud = GaussianCloud.create([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [[0.2, 0.1, 0.05], [0.001, 0.001, 0.001]],
                                 opacity=0.5)
    cfg = DensifyConfig(grad_threshold=1e-3)
    out = densify_and_prune(cloud, np.array([1.0, 1.0]), np.array([1, 1]), cfg, rng)
    # big one splits into two children, small one is cloned
    assert len(out) == 4
    children = out.means[np.linalg.norm(out.means - [1.0, 0.0, 0.0], axis=1) > 0.5]
    assert len(children) == 2
    assert np.all(np.abs(children) < 4 * np.array([0.2, 0.1, 0.05]) + 1e-12)
    np.testing.assert_allclose(np.exp(out.log_scales[-1]), np.array([0.2, 0.1, 0.05]) / cfg.split_scale)


def test_densify_prunes_exact_set():
    rng = np.random.default_rng(10)
    cloud = random_cloud(rng, 50)
    cloud.opacity_logit[:] = rng.normal(scale=6, size=50)
    keep = cloud.opacity >= 0.005
    out = densify_and_prune(cloud, np.zeros(50), np.zeros(50), DensifyConfig(), rng)
    np.testing.assert_array_equal(out.means, cloud.means[keep])


def test_cloud_roundtrip(tmp_path):
    cloud = random_cloud(np.random.default_rng(11), 5)
    cloud.save(tmp_path / "cloud.txt")
    back = GaussianCloud.load(tmp_path / "cloud.txt")
    for k in cloud.PARAMS:
        np.testing.assert_allclose(getattr(back, k), getattr(cloud, k), rtol=1e-7, atol=1e-9)


def test_depth_channel_is_ray_distance():
    view = look_at(np.array([0.0, -3.0, 0.0]), np.zeros(3), width=33, height=33, fov_deg=50)
    p = np.array([[0.4, 0.0, 0.3]])
    cloud = GaussianCloud.create(p, [0.3, 0.01, 0.3], opacity=0.999999)
    gb = rasterize(cloud, view)
    xy, _ = view.project(p)
    px, py = np.round(xy[0]).astype(int)
    # the channel carries the center's distance to the camera
    assert gb.buf[py, px, CH_DEPTH] / gb.alpha[py, px] == pytest.approx(np.linalg.norm(p[0] - view.center), abs=1e-9)
    assert gb.c_diff.shape == (33, 33, 3) and CH_DIFF == slice(0, 3)
