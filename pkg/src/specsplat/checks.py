"""Named oracle comparisons with pass/fail thresholds (``specsplat oracle <name>``)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .camera import look_at


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured {self.measured:.4g} (threshold {self.threshold:g}, {self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _rel(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# --- split-sum / LUT ---------------------------------------------------------------------------

@_timed
def split_sum(seed: int = 0, res: int = 128, mc_samples: int = 100_000, prefilter_samples: int = 1024) -> CheckResult:
    """Prefiltered trilinear lookup vs Monte Carlo lobe integral, SH-band-2 environment."""
    from .envmap import MipCubemap, roughness_to_level, sample_trilinear

    rng = np.random.default_rng(seed)
    env_fn = oracle.random_sh2_env(rng)
    env = MipCubemap.from_base(env_fn.to_cubemap(res, supersample=2), l_max=4, samples=prefilter_samples)
    dirs = rng.normal(size=(32, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    worst = 0.0
    per_r = {}
    for r in (0.2, 0.4, 0.6, 0.8):
        lvl = roughness_to_level(r, env.l_max)
        got = sample_trilinear(env, dirs, np.full(len(dirs), lvl))
        errs = []
        for i, d in enumerate(dirs):
            mean, _ = oracle.mc_specular_integral(env_fn, d, d, r, mc_samples, seed=seed * 1000 + i)
            errs.append(np.max(np.abs(got[i] - mean) / mean))
        per_r[r] = float(np.max(errs))
        worst = max(worst, per_r[r])
    return CheckResult("split-sum", worst < 0.05, worst, 0.05, details={"per_roughness": per_r})


@_timed
def brdf_lut(samples: int = 1_000_000, grid: int = 16, seed: int = 0) -> CheckResult:
    """F0*A + B from the LUT vs a Monte Carlo M_spec estimate on a grid of (n.v, r)."""
    from .pbr import build_brdf_lut

    lut = build_brdf_lut(1024, 64)
    f0 = np.array([0.04, 0.5, 0.95])
    worst, where = 0.0, None
    for i in range(grid):
        nov = (i + 0.5) / grid
        for j in range(grid):
            r = (j + 0.5) / grid
            mc = oracle.mc_m_spec(f0, nov, r, samples, seed=seed + i * grid + j)
            got = lut.m_spec(f0, np.array([nov]), np.array([r]))[0]
            err = float(np.max(np.abs(got - mc)))
            if err > worst:
                worst, where = err, (nov, r)
    return CheckResult("brdf-lut", worst < 0.02, worst, 0.02, details={"worst_at": where})


# --- gradients -----------------------------------------------------------------------------------

def _fd_check(loss, param, grad, rng, count, h):
    worst = 0.0
    for _ in range(count):
        idx = tuple(rng.integers(s) for s in param.shape)
        old = param[idx]
        param[idx] = old + h
        lp = loss()
        param[idx] = old - h
        lm = loss()
        param[idx] = old
        worst = max(worst, float(_rel((lp - lm) / (2 * h), grad[idx], 1e-6)))
    return worst


@_timed
def gradients(seed: int = 0) -> CheckResult:
    """Analytic backward passes vs central differences (rasterizer, env lookup, MLP, IndiASG chain)."""
    from .envmap import MipCubemap, sample_trilinear, sample_trilinear_backward
    from .indiasg import IndiAsg, PredictorNet
    from .splat import GaussianCloud, rasterize, rasterize_backward

    rng = np.random.default_rng(seed)
    out = {}
    # rasterizer: 3 Gaussians, 8x8
    view = look_at(np.array([0.0, -2.0, 0.3]), np.zeros(3), width=8, height=8, fov_deg=35)
    cloud = GaussianCloud.create(rng.normal(size=(3, 3)) * 0.1, np.exp(rng.normal(size=(3, 3)) * 0.2) * 0.15,
                                 quats=rng.normal(size=(3, 4)), opacity=rng.uniform(0.4, 0.9, 3),
                                 c_diff=rng.uniform(size=(3, 3)), f0=rng.uniform(size=(3, 3)),
                                 roughness=rng.uniform(0.1, 0.9, 3))
    w_buf = rng.normal(size=(8, 8, 11))
    w_a = rng.normal(size=(8, 8))

    def r_loss():
        gb = rasterize(cloud, view)
        return float(np.sum(gb.buf * w_buf) + np.sum(gb.alpha * w_a))

    _, ctx = rasterize(cloud, view, return_context=True)
    grads = rasterize_backward(cloud, ctx, w_buf, w_a)
    out["rasterize"] = max(_fd_check(r_loss, getattr(cloud, k), grads[k], rng, 6, 1e-5) for k in cloud.PARAMS)
    # env texels
    env = MipCubemap([rng.uniform(size=(6, 16 // 4 ** k, 16 // 4 ** k, 3)) for k in range(3)], factor=4)
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lvl = rng.uniform(0, 2, 20)
    w_env = rng.normal(size=(20, 3))
    g_levels = sample_trilinear_backward(env, d, lvl, w_env)
    worst = 0.0
    for k in range(3):
        nz = np.argwhere(g_levels[k] != 0)
        for _ in range(5):
            idx = tuple(nz[rng.integers(len(nz))])
            tex = env.levels[k]
            old = tex[idx]
            tex[idx] = old + 1e-3
            lp = np.sum(sample_trilinear(env, d, lvl) * w_env)
            tex[idx] = old - 1e-3
            lm = np.sum(sample_trilinear(env, d, lvl) * w_env)
            tex[idx] = old
            worst = max(worst, float(_rel((lp - lm) / 2e-3, g_levels[k][idx])))
    out["envmap"] = worst
    # MLP alone
    net = PredictorNet(in_dim=9, hidden=16, depth=3, seed=seed, out_dim=7, zero_last=False)
    x = rng.normal(size=(5, 9))
    w_out = rng.normal(size=(5, 7))
    net.forward(x)
    p_grads, _ = net.backward(w_out)
    out["mlp"] = max(_fd_check(lambda: float(np.sum(net.forward(x) * w_out)), p, g, rng, 10, 1e-4)
                     for p, g in zip(net.params, p_grads))
    # IndiASG chain (random, non-zero last layer so every lobe parameter is live)
    model = IndiAsg(seed=seed, hidden=16, depth=2)
    model.net.weights[-1] = rng.normal(size=model.net.weights[-1].shape) * 0.3
    k = 6
    p = rng.normal(size=(k, 3)) * 0.3
    n = rng.normal(size=(k, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    wr = n + 0.5 * rng.normal(size=(k, 3))
    wr /= np.linalg.norm(wr, axis=1, keepdims=True)
    rough = rng.uniform(0.1, 0.9, k)
    c_res = rng.uniform(size=(k, 3))
    w_rgb = rng.normal(size=(k, 3))
    model.forward(p, n, wr, rough, c_res)
    c_grads = model.backward(w_rgb)
    out["indiasg_chain"] = max(
        _fd_check(lambda: float(np.sum(model.forward(p, n, wr, rough, c_res) * w_rgb)), prm, g, rng, 8, 1e-5)
        for prm, g in zip(model.net.params, c_grads))
    passed = out["mlp"] < 1e-4 and max(out["rasterize"], out["envmap"], out["indiasg_chain"]) < 1e-3
    return CheckResult("gradients", passed, max(out.values()), 1e-3, details=out)


# --- priors -------------------------------------------------------------------------------------------

def _rs_scene():
    lut_free = oracle.Material(np.array([0.5, 0.4, 0.3]), np.zeros(3), 1.0)
    glossy = oracle.Material(np.array([0.2, 0.2, 0.2]), np.array([0.5, 0.5, 0.5]), 0.3)
    env = oracle.random_sh2_env(np.random.default_rng(5))
    return oracle.AnalyticScene([oracle.Sphere(np.zeros(3), 0.5, glossy),
                                 oracle.Plane(np.array([0, 0, -0.5]), np.array([0, 0, 1.0]), lut_free, 1.5)], env)


@_timed
def reflection_score(seed: int = 0) -> CheckResult:
    """Vectorized RS vs the naive per-pixel loop, plus the single-outlier example."""
    from .pbr import build_brdf_lut
    from .priors import Frame, reflection_score as rs_fast

    lut = build_brdf_lut(256, 32)
    scene = _rs_scene()
    # six cameras on an arc so that most pixels are seen by all five sources
    views = []
    for az in np.radians(np.linspace(-50, 50, 6)):
        eye = 3.0 * np.array([np.cos(az) * np.cos(0.8), np.sin(az) * np.cos(0.8), np.sin(0.8)])
        views.append(look_at(eye, np.zeros(3), width=32, height=32, fov_deg=40.0))
    frames = []
    for i, v in enumerate(views):
        img, depth, _, _ = oracle.render_analytic(scene, v, lut, samples=32, seed=seed + i)
        frames.append(Frame(v, img, depth))
    fast = rs_fast(frames[0], frames[1:], k_min=5)
    slow, valid = oracle.naive_reflection_score(frames[0], frames[1:], k_min=5)
    diff = float(np.max(np.abs(fast.score - slow)))
    same_valid = bool(np.array_equal(fast.valid, valid))
    # planted example: constant images, one source brighter by 0.2 per channel
    const = [Frame(f.view, np.full((32, 32, 3), 0.5), f.depth) for f in frames]
    const[3] = Frame(const[3].view, np.full((32, 32, 3), 0.7), const[3].depth)
    planted = rs_fast(const[0], const[1:], k_min=5)
    ex = planted.score[planted.valid]
    example_err = float(np.max(np.abs(ex - 0.12))) if ex.size else float("inf")
    passed = diff < 1e-6 and same_valid and example_err < 1e-12 and int(valid.sum()) > 0
    return CheckResult("rs", passed, max(diff, example_err), 1e-6,
                       details={"max_abs_diff": diff, "valid_pixels": int(valid.sum()), "masks_equal": same_valid,
                                "example_rs": float(ex.mean()) if ex.size else None})


@_timed
def depth_alignment(seed: int = 0) -> CheckResult:
    from .priors import align_depth_least_squares

    rng = np.random.default_rng(seed)
    d = rng.uniform(1.0, 3.0, (64, 64))
    w, b, _, _ = align_depth_least_squares(d, 2 * d + 1)
    exact_err = max(abs(w - 2), abs(b - 1))
    w2, b2, _, _ = align_depth_least_squares(d, d + rng.normal(0, 0.01, d.shape))
    noisy_err = abs(w2 - 1)
    passed = exact_err < 1e-10 and noisy_err < 0.01 and abs(b2) < 0.01
    return CheckResult("depth-align", passed, noisy_err, 0.01,
                       details={"planted_error": exact_err, "noisy_scale": w2, "noisy_shift": b2})


@_timed
def depth_to_normal(seed: int = 0) -> CheckResult:
    from scipy.ndimage import binary_erosion

    from .priors import depth_to_normal as d2n

    view = look_at(np.array([0.3, -3.0, 0.4]), np.zeros(3), width=64, height=64, fov_deg=40)
    rays = view.world_rays().reshape(-1, 3)
    origin = np.broadcast_to(view.center, rays.shape)
    dummy = oracle.Material(np.zeros(3), np.zeros(3), 0.5)
    sph = oracle.Sphere(np.zeros(3), 1.0, dummy)
    t, n_world = sph.intersect(origin, rays)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(64, 64)
    normals, mask = d2n(depth, view)
    interior = binary_erosion(depth > 0, iterations=2) & mask
    n_cam = (n_world @ view.R.T).reshape(64, 64, 3)
    ang = np.degrees(np.arccos(np.clip(np.sum(normals * n_cam, -1), -1, 1)))
    sphere_err = float(ang[interior].max())
    plane_n = np.array([0.3, -0.8, 0.5])
    plane_n /= np.linalg.norm(plane_n)
    plane = oracle.Plane(np.zeros(3), plane_n, dummy)
    t, _ = plane.intersect(origin, rays)
    depth = np.where(np.isfinite(t), t, 0.0).reshape(64, 64)
    normals, mask = d2n(depth, view)
    facing = plane_n if plane_n @ (view.center - 0) > 0 else -plane_n
    ang = np.degrees(np.arccos(np.clip(normals[mask] @ (view.R @ facing), -1, 1)))
    plane_err = float(ang.max())
    passed = sphere_err < 3.0 and plane_err < 1.0
    return CheckResult("depth-normal", passed, sphere_err, 3.0, details={"sphere_max_deg": sphere_err,
                                                                        "plane_max_deg": plane_err})


# --- geometry ---------------------------------------------------------------------------------------

def _brute_hits(tris, origins, dirs):
    """Moller-Trumbore against every triangle, fully vectorized (no acceleration)."""
    v0, e1, e2 = tris[:, 0], tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
    hits = np.zeros(len(origins), dtype=bool)
    for s in range(0, len(origins), 64):
        o = origins[s:s + 64, None, :]
        d = dirs[s:s + 64, None, :]
        p = np.cross(d, e2[None])
        det = np.sum(e1[None] * p, -1)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - v0[None]
        u = np.sum(tv * p, -1) * inv
        q = np.cross(tv, e1[None])
        v = np.sum(d * q, -1) * inv
        t = np.sum(e2[None] * q, -1) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        hits[s:s + 64] = hit.any(axis=1)
    return hits


@_timed
def geometry(seed: int = 0, resolution: int = 64) -> CheckResult:
    """Analytic sphere TSDF -> marching cubes -> radial error, Chamfer, and BVH vs brute force."""
    from .geometry import TsdfVolume, build_bvh, chamfer_distance, marching_cubes, ray_hits, sample_surface

    rng = np.random.default_rng(seed)
    radius = 0.6
    vol = TsdfVolume.create(resolution, (-1, -1, -1), (1, 1, 1), 4.0)
    centers = vol.voxel_centers()
    sdf = np.linalg.norm(centers, axis=-1) - radius
    vol.tsdf = np.clip(sdf / vol.trunc, -1.0, 1.0)
    vol.weight = np.ones_like(vol.tsdf)
    mesh = marching_cubes(vol)
    radial = float(np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - radius)))
    v = rng.normal(size=(100_000, 3))
    truth = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    cd = chamfer_distance(sample_surface(mesh, 100_000, rng), truth)
    bvh = build_bvh(mesh)
    origins = rng.uniform(-1.2, 1.2, (10_000, 3))
    dirs = rng.normal(size=(10_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    fast = ray_hits(bvh, origins, dirs)
    slow = _brute_hits(mesh.triangles(), origins, dirs)
    mismatches = int(np.sum(fast != slow))
    passed = radial < vol.voxel_size and cd < vol.voxel_size and mismatches == 0
    return CheckResult("geometry", passed, radial / vol.voxel_size, 1.0,
                       details={"radial_err": radial, "voxel": vol.voxel_size, "chamfer": cd,
                                "bvh_mismatches": mismatches, "hits": int(slow.sum())})


CHECKS = {
    "split-sum": split_sum,
    "brdf-lut": brdf_lut,
    "gradients": gradients,
    "rs": reflection_score,
    "depth-align": depth_alignment,
    "depth-normal": depth_to_normal,
    "geometry": geometry,
}
