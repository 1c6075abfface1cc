import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specsplat import oracle
from specsplat.camera import PosedView, look_at
from specsplat.priors import (
    Frame,
    PriorBundle,
    RsMap,
    align_depth_least_squares,
    backproject,
    confidence_weights,
    depth_to_normal,
    normal_prior_loss,
    reflection_score,
    rs_weighted_photometric_loss,
    synthesize_prior_bundle,
    visibility_indicator,
    vggt_prior_loss,
)

from .conftest import unit


def identity_view(w=32, h=24, f=30.0):
    return PosedView(f, f, (w - 1) / 2, (h - 1) / 2, np.eye(3), np.zeros(3), w, h)


def plane_depth(view, normal, offset):
    """Ray distance to the plane n.x = offset for every pixel (0 where missed)."""
    rays = view.world_rays()
    denom = rays @ normal
    t = (offset - view.center @ normal) / np.where(np.abs(denom) > 1e-12, denom, np.nan)
    return np.where(np.isfinite(t) & (t > 0), t, 0.0)


def test_backproject_principal_point():
    v = identity_view()
    p = backproject(np.array([v.cx, v.cy]), 2.5, v)
    np.testing.assert_allclose(p, [0.0, 0.0, 2.5], atol=1e-12)
    with pytest.raises(ValueError):
        backproject(np.array([1.0, 1.0]), 0.0, v)


@settings(max_examples=40)
@given(st.floats(0, 31), st.floats(0, 23), st.floats(0.2, 10))
def test_backproject_roundtrip(x, y, d):
    v = look_at(np.array([1.0, -2.0, 0.5]), np.zeros(3), width=32, height=24)
    xy, _ = v.project(backproject(np.array([x, y]), d, v))
    np.testing.assert_allclose(xy, [x, y], atol=1e-4)


def test_backproject_depth_scaling():
    v = look_at(np.array([1.0, -2.0, 0.5]), np.zeros(3), width=32, height=24)
    xy = np.array([[3.0, 4.0], [20.0, 10.0]])
    a = backproject(xy, np.array([1.0, 2.0]), v)
    b = backproject(xy, np.array([3.0, 6.0]), v)
    np.testing.assert_allclose(np.linalg.norm(b - v.center, axis=1), 3 * np.linalg.norm(a - v.center, axis=1))


def test_visibility_indicator_cases():
    v = identity_view()
    n = np.array([0.0, 0.0, 1.0])
    depth = plane_depth(v, n, 2.0)
    on = backproject(np.array([10.0, 7.0]), depth[7, 10], v)
    assert visibility_indicator(on, v, depth) == 1
    assert visibility_indicator(np.array([0.0, 0.0, -1.0]), v, depth) == 0
    # a nearer occluder 0.5 in front of the point
    near = plane_depth(v, n, 1.5)
    assert visibility_indicator(on, v, near) == 0


@settings(max_examples=30)
@given(st.floats(0.01, 0.5), st.floats(0.0, 0.5))
def test_visibility_monotone_in_tau(tau, extra):
    v = identity_view()
    depth = plane_depth(v, np.array([0.0, 0.0, 1.0]), 2.0)
    rng = np.random.default_rng(0)
    pts = backproject(rng.uniform(0, 20, (50, 2)), rng.uniform(1.5, 2.5, 50), v)
    a = visibility_indicator(pts, v, depth, tau)
    b = visibility_indicator(pts, v, depth, tau + extra)
    assert np.all(b >= a)


def _lambertian_frames(n_views=6, size=20):
    """Textured ground plane seen from cameras above; every view agrees photometrically."""
    views = [look_at(np.array([0.6 * np.cos(a), 0.6 * np.sin(a), 2.0]), np.zeros(3), width=size, height=size,
                     fov_deg=40) for a in np.linspace(0, 2 * np.pi, n_views, endpoint=False)]
    frames = []
    for v in views:
        depth = plane_depth(v, np.array([0.0, 0.0, 1.0]), 0.0)
        pts = v.center + depth[..., None] * v.world_rays()
        img = np.stack([0.5 + 0.2 * pts[..., 0], 0.5 + 0.2 * pts[..., 1], np.full(depth.shape, 0.3)], -1)
        frames.append(Frame(v, img, depth))
    return frames


def test_rs_consistent_scene_near_zero():
    frames = _lambertian_frames()
    rs = reflection_score(frames[0], frames[1:])
    assert rs.valid.mean() > 0.5
    assert rs.score[rs.valid].max() < 1e-2


def test_rs_single_outlier_view():
    v = identity_view(12, 12)
    depth = np.full((12, 12), 2.0)
    img = np.random.default_rng(0).uniform(0.2, 0.6, (12, 12, 3))
    ref = Frame(v, img, depth)
    sources = [Frame(v, img.copy(), depth) for _ in range(4)] + [Frame(v, img + 0.2, depth)]
    rs = reflection_score(ref, sources)
    assert rs.valid.all()
    np.testing.assert_allclose(rs.score, 0.12, atol=1e-12)
    few = reflection_score(ref, sources[:3])
    assert not few.valid.any()
    same = reflection_score(ref, sources[:4] + [sources[0]])
    np.testing.assert_allclose(same.score, 0.0, atol=1e-12)


def test_rs_matches_naive_loops():
    frames = _lambertian_frames(6, 14)
    rng = np.random.default_rng(1)
    for f in frames:
        f.image = f.image + rng.uniform(0, 0.1, f.image.shape)  # view-dependent deviations
    fast = reflection_score(frames[0], frames[1:], k_min=3)
    slow_score, slow_valid = oracle.naive_reflection_score(frames[0], frames[1:], k_min=3)
    assert slow_valid.any()
    np.testing.assert_array_equal(fast.valid, slow_valid)
    np.testing.assert_allclose(fast.score, slow_score, atol=1e-6)


def test_rs_weighted_loss_properties():
    rng = np.random.default_rng(2)
    render, gt = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    plain, g_plain = rs_weighted_photometric_loss(render, gt, None)
    const = RsMap(np.full((8, 8), 0.01), np.ones((8, 8), bool), np.full((8, 8), 5))
    scaled, g_scaled = rs_weighted_photometric_loss(render, gt, const)
    assert scaled == pytest.approx(plain / 0.01)
    np.testing.assert_allclose(g_scaled, g_plain / 0.01)
    assert rs_weighted_photometric_loss(gt, gt, const)[0] == 0.0
    # doubling RS at one pixel halves its contribution
    rs = RsMap(np.full((8, 8), 0.1), np.ones((8, 8), bool), np.full((8, 8), 5))
    base, _ = rs_weighted_photometric_loss(render, gt, rs)
    rs.score[3, 4] = 0.2
    half, _ = rs_weighted_photometric_loss(render, gt, rs)
    pix = np.abs(render[3, 4] - gt[3, 4]).sum() / 0.1 / 64
    assert base - half == pytest.approx(0.5 * pix)
    # invalid pixels are neutral
    rs.valid[:] = False
    assert rs_weighted_photometric_loss(render, gt, rs)[0] == pytest.approx(plain)



def test_rs_weighted_loss_normalized():
    rng = np.random.default_rng(4)
    render, gt = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    plain, _ = rs_weighted_photometric_loss(render, gt, None)
    const = RsMap(np.full((8, 8), 0.3), np.ones((8, 8), bool), np.full((8, 8), 5))
    assert rs_weighted_photometric_loss(render, gt, const, normalize=True)[0] == pytest.approx(plain)
    rs = RsMap(rng.uniform(0.05, 0.5, (8, 8)), rng.random((8, 8)) > 0.3, np.full((8, 8), 5))
    _, g = rs_weighted_photometric_loss(render, gt, rs, normalize=True)
    w = np.abs(g[..., 0]) * 64
    assert w[rs.valid].mean() == pytest.approx(1.0)
    np.testing.assert_allclose(w[~rs.valid], 1.0)
    # relative weights among valid pixels are those of the raw loss
    _, g_raw = rs_weighted_photometric_loss(render, gt, rs)
    ratio = g_raw[..., 0][rs.valid] / g[..., 0][rs.valid]
    np.testing.assert_allclose(ratio, ratio[0])

def test_align_examples():
    rng = np.random.default_rng(3)
    d = rng.uniform(1, 3, (64, 64))
    s, b, res, degen = align_depth_least_squares(d, d)
    assert (s, b) == pytest.approx((1.0, 0.0)) and res == pytest.approx(0.0, abs=1e-20) and not degen
    s, b, res, _ = align_depth_least_squares(d, 2 * d + 1)
    assert s == pytest.approx(2.0, abs=1e-12) and b == pytest.approx(1.0, abs=1e-12) and res < 1e-20
    s, b, _, _ = align_depth_least_squares(d, d + rng.normal(scale=0.01, size=d.shape))
    assert abs(s - 1) < 0.01 and abs(b) < 0.01
    assert align_depth_least_squares(np.full(5, 2.0), np.full(5, 3.0))[3]
    with pytest.raises(ValueError):
        align_depth_least_squares(d, d, np.zeros(d.shape, bool))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from([(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]))
def test_align_is_optimal(seed, delta):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.5, 3, 200)
    p = rng.uniform(0.5, 2) * d + rng.normal(size=200) * 0.1
    s, b, res, _ = align_depth_least_squares(d, p)
    res2 = np.mean(((s + delta[0]) * d + b + delta[1] - p) ** 2)
    assert res2 >= res


def test_depth_to_normal_fronto_plane():
    v = identity_view()
    depth = plane_depth(v, np.array([0.0, 0.0, 1.0]), 2.0)
    n, m = depth_to_normal(depth, v)
    np.testing.assert_allclose(n[m], np.broadcast_to([0.0, 0.0, -1.0], n[m].shape), atol=1e-9)
    assert m[1:-1, 1:-1].all() and not m[0].any()


def test_depth_to_normal_tilted_plane_and_unit_length():
    v = look_at(np.array([0.3, -2.0, 1.0]), np.zeros(3), width=48, height=48)
    normal = unit([0.2, -0.3, 1.0])
    depth = plane_depth(v, normal, 0.0)
    n, m = depth_to_normal(depth, v)
    expect = v.R @ normal
    expect = expect if expect @ (v.R @ (np.zeros(3) - v.center)) < 0 else -expect
    ang = np.degrees(np.arccos(np.clip(n[m] @ expect, -1, 1)))
    assert ang.max() < 1.0
    np.testing.assert_allclose(np.linalg.norm(n[m], axis=-1), 1.0, atol=1e-6)


def test_depth_to_normal_sphere():
    v = look_at(np.array([0.0, -2.5, 0.0]), np.zeros(3), width=64, height=64, fov_deg=30)
    mat = oracle.Material(np.full(3, 0.5), np.full(3, 0.04), 0.5)
    sc = oracle.AnalyticScene([oracle.Sphere(np.zeros(3), 0.5, mat)], oracle.AnalyticEnv(np.full(3, 0.5)))
    o = np.broadcast_to(v.center, (64 * 64, 3))
    t, nrm, _ = sc.intersect(o, v.world_rays().reshape(-1, 3))
    depth = np.where(np.isfinite(t), t, 0.0).reshape(64, 64)
    n, m = depth_to_normal(depth, v)
    gt = (nrm.reshape(64, 64, 3) @ v.R.T)
    # stay away from the silhouette, where the stencil straddles the edge
    hit = depth > 0
    interior = m & np.all([np.roll(hit, s, a) for s in (-2, 2) for a in (0, 1)], axis=0)
    ang = np.degrees(np.arccos(np.clip(np.sum(n * gt, -1)[interior], -1, 1)))
    assert ang.max() < 3.0


def test_normal_prior_loss_examples():
    rng = np.random.default_rng(4)
    p = unit(rng.normal(size=(5, 5, 3)))
    assert normal_prior_loss(p, p)[0] == pytest.approx(0.0, abs=1e-15)
    lam = 0.5
    anti, _ = normal_prior_loss(-p, p, lam)
    assert anti == pytest.approx(np.mean(np.abs(2 * p).sum(-1)) + 2 * lam)
    z, x = np.array([[[0.0, 0, 1]]]), np.array([[[1.0, 0, 0]]])
    l90, _ = normal_prior_loss(x, z, lam)
    assert l90 - 2.0 == pytest.approx(lam * 1.0)


def test_normal_prior_loss_gradient():
    rng = np.random.default_rng(5)
    nrm = rng.normal(size=(4, 4, 3))
    prior = unit(rng.normal(size=(4, 4, 3)))
    w = rng.random((4, 4))
    _, g = normal_prior_loss(nrm, prior, weight=w)
    h = 1e-7
    for idx in [(0, 0, 0), (1, 2, 1), (3, 3, 2)]:
        nrm[idx] += h
        up = normal_prior_loss(nrm, prior, weight=w)[0]
        nrm[idx] -= 2 * h
        dn = normal_prior_loss(nrm, prior, weight=w)[0]
        nrm[idx] += h
        assert g[idx] == pytest.approx((up - dn) / (2 * h), rel=1e-5)


def test_confidence_weights():
    np.testing.assert_allclose(confidence_weights(np.array([0.0, np.e - 1])), [0.0, 1.0])
    np.testing.assert_array_equal(confidence_weights(np.full(4, 3.0)), 1.0)
    c = np.sort(np.random.default_rng(6).uniform(0, 10, 50))
    assert np.all(np.diff(confidence_weights(c)) >= 0)


@pytest.fixture
def plane_bundle():
    v = look_at(np.array([0.3, -2.0, 1.0]), np.zeros(3), width=32, height=32)
    depth = plane_depth(v, unit([0.1, 0.2, 1.0]), 0.0)
    conf = np.random.default_rng(7).uniform(0.5, 2.0, depth.shape)
    return v, depth, PriorBundle.from_depth_conf(depth, conf, v)


def test_vggt_loss_zero_cases(plane_bundle):
    v, depth, b = plane_bundle
    normals = b.world_normals(v)
    loss, gd, gn, _ = vggt_prior_loss(depth, normals, b, v)
    assert loss == pytest.approx(0.0, abs=1e-15) and not np.any(np.abs(gd) > 1e-12)
    zero_w = PriorBundle(b.depth, b.conf, b.normal, b.normal_mask, np.zeros_like(b.weight))
    noisy = depth * 1.1 + np.random.default_rng(0).normal(scale=0.05, size=depth.shape) * (depth > 0)
    assert vggt_prior_loss(noisy, -normals, zero_w, v)[0] == 0.0


def test_vggt_loss_linear_in_weights(plane_bundle):
    v, depth, b = plane_bundle
    rng = np.random.default_rng(8)
    noisy = np.where(depth > 0, depth + rng.normal(scale=0.05, size=depth.shape), 0.0)
    normals = unit(b.world_normals(v) + rng.normal(scale=0.1, size=(32, 32, 3)))
    base = vggt_prior_loss(noisy, normals, b, v)[0]
    scaled = PriorBundle(b.depth, b.conf, b.normal, b.normal_mask, 3.0 * b.weight)
    assert vggt_prior_loss(noisy, normals, scaled, v)[0] == pytest.approx(3.0 * base)


def test_vggt_depth_gradient(plane_bundle):
    v, depth, b = plane_bundle
    rng = np.random.default_rng(9)
    d = np.where(depth > 0, depth + rng.normal(scale=0.05, size=depth.shape), 0.0)
    n = b.world_normals(v)
    _, gd, _, _ = vggt_prior_loss(d, n, b, v, normal_weight=0.0)
    # the fitted scale/shift are constants: compare against a fixed-fit residual
    s, t, _, _ = align_depth_least_squares(d, b.depth, (d > 0) & (b.depth > 0))
    valid = (d > 0) & (b.depth > 0)
    expect = np.where(valid, b.weight * 2 * (s * d + t - b.depth) * s / valid.sum(), 0.0)
    np.testing.assert_allclose(gd, expect, atol=1e-15)


def test_synthesized_prior_inverts_exactly():
    v = look_at(np.array([0.3, -2.0, 1.0]), np.zeros(3), width=32, height=32)
    gt = plane_depth(v, unit([0.1, 0.2, 1.0]), 0.0)
    bundle, s, t = synthesize_prior_bundle(gt, v, 0.0, np.random.default_rng(10))
    m = gt > 0
    w, b, _, _ = align_depth_least_squares(bundle.depth, gt, m)
    assert w == pytest.approx(1 / s, rel=1e-10) and b == pytest.approx(-t / s, rel=1e-8, abs=1e-10)
    plane_n = v.R @ unit([0.1, 0.2, 1.0])
    ang = np.degrees(np.arccos(np.clip(np.abs(bundle.normal[bundle.normal_mask] @ plane_n), -1, 1)))
    assert ang.max() < 1e-4
    again, s2, t2 = synthesize_prior_bundle(gt, v, 0.01, np.random.default_rng(10))
    third, s3, t3 = synthesize_prior_bundle(gt, v, 0.01, np.random.default_rng(10))
    assert (s2, t2) == (s3, t3) and np.array_equal(again.depth, third.depth)


def test_bundle_roundtrip(tmp_path, plane_bundle):
    v, depth, b = plane_bundle
    b.save(tmp_path, 3)
    back = PriorBundle.load(tmp_path, 3, v)
    np.testing.assert_allclose(back.depth, b.depth, rtol=1e-6)
    with pytest.raises(FileNotFoundError):
        PriorBundle.load(tmp_path, 4, v)
