"""Brute-force references and analytic ground truth.

Everything here is deliberately naive, double precision, and written without
reusing the sampling, lookup or scoring code it is used to check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import PosedView

# --- analytic environments ----------------------------------------------------------------

_SH2_NORM = (0.282095, 0.488603, 0.488603, 0.488603, 1.092548, 1.092548, 0.315392, 1.092548, 0.546274)


def sh2_basis(d):
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    c = _SH2_NORM
    return np.stack([np.full_like(x, c[0]), c[1] * y, c[2] * z, c[3] * x, c[4] * x * y, c[5] * y * z,
                     c[6] * (3 * z * z - 1), c[7] * x * z, c[8] * (x * x - y * y)], axis=-1)


@dataclass
class AnalyticEnv:
    """Radiance as a function of direction: constant + SH band <= 2 + exponential lobes."""

    constant: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh: np.ndarray | None = None  # (9, 3)
    lobes: list = field(default_factory=list)  # (direction, sharpness, rgb)

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        out = np.broadcast_to(np.asarray(self.constant, dtype=np.float64), d.shape[:-1] + (3,)).copy()
        if self.sh is not None:
            out += sh2_basis(d) @ self.sh
        for direction, sharp, rgb in self.lobes:
            u = np.asarray(direction, dtype=np.float64)
            u = u / np.linalg.norm(u)
            out += np.exp(sharp * (d @ u - 1.0))[..., None] * np.asarray(rgb, dtype=np.float64)
        return np.maximum(out, 0.0)

    def to_cubemap(self, res: int, supersample: int = 4) -> np.ndarray:
        """Texel averages of the radiance function on a (6, res, res, 3) cube."""
        n = res * supersample
        c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        tc, sc = np.meshgrid(c, c, indexing="ij")
        faces = []
        one = np.ones_like(sc)
        # same face orientation table as the cube lookup (+X, -X, +Y, -Y, +Z, -Z)
        layouts = [
            (one, -tc, -sc), (-one, -tc, sc), (sc, one, tc), (sc, -one, -tc), (sc, -tc, one), (-sc, -tc, -one),
        ]
        for x, y, z in layouts:
            d = np.stack([x, y, z], axis=-1)
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            # solid-angle weight of each subsample: 1 / (1 + s^2 + t^2)^(3/2)
            w = 1.0 / (1.0 + sc ** 2 + tc ** 2) ** 1.5
            v = self(d) * w[..., None]
            v = v.reshape(res, supersample, res, supersample, 3).sum(axis=(1, 3))
            ws = w.reshape(res, supersample, res, supersample).sum(axis=(1, 3))
            faces.append(v / ws[..., None])
        return np.stack(faces)


def random_sh2_env(rng: np.random.Generator, dc: float = 1.0, band1: float = 0.25, band2: float = 0.15) -> AnalyticEnv:
    sh = np.zeros((9, 3))
    sh[0] = dc / _SH2_NORM[0] * rng.uniform(0.8, 1.2, 3)
    sh[1:4] = rng.uniform(-1, 1, (3, 3)) * band1 / _SH2_NORM[1]
    sh[4:9] = rng.uniform(-1, 1, (5, 3)) * band2 / _SH2_NORM[4]
    return AnalyticEnv(sh=sh)


def naive_cube_lookup(cube: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-face bilinear lookup with clamp-to-edge (no cross-face filtering)."""
    d = np.asarray(d, dtype=np.float64)
    res = cube.shape[1]
    out = np.empty(d.shape[:-1] + (cube.shape[-1],))
    flat_d = d.reshape(-1, 3)
    flat_o = out.reshape(-1, cube.shape[-1])
    ax = np.argmax(np.abs(flat_d), axis=1)
    for i, v in enumerate(flat_d):
        a = ax[i]
        m = v[a]
        x, y, z = v / abs(m)
        if a == 0:
            face, s, t = (0, -z, -y) if m > 0 else (1, z, -y)
        elif a == 1:
            face, s, t = (2, x, z) if m > 0 else (3, x, -z)
        else:
            face, s, t = (4, x, -y) if m > 0 else (5, -x, -y)
        px = min(max((s + 1) / 2 * res - 0.5, 0.0), res - 1.0)
        py = min(max((t + 1) / 2 * res - 0.5, 0.0), res - 1.0)
        j0, i0 = min(int(px), res - 2), min(int(py), res - 2)
        fx, fy = px - j0, py - i0
        f = cube[face]
        flat_o[i] = ((1 - fx) * (1 - fy) * f[i0, j0] + fx * (1 - fy) * f[i0, j0 + 1]
                     + (1 - fx) * fy * f[i0 + 1, j0] + fx * fy * f[i0 + 1, j0 + 1])
    return out


def _radiance_fn(env):
    if callable(env):
        return env
    cube = np.asarray(env)
    return lambda d: naive_cube_lookup(cube, d)


def _ggx_half_vectors(rng, count, alpha, n):
    """Half vectors around n with density D(h)(n.h), by inverting the GGX polar CDF."""
    u1, u2 = rng.random(count), rng.random(count)
    tan2 = alpha * alpha * u1 / (1.0 - u1)
    cos_t = 1.0 / np.sqrt(1.0 + tan2)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t ** 2))
    phi = 2 * np.pi * u2
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = helper - n * (helper @ n)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    return (sin_t * np.cos(phi))[:, None] * t + (sin_t * np.sin(phi))[:, None] * b + cos_t[:, None] * n


def mc_specular_integral(env, n, wo, roughness: float, samples: int = 100_000, seed: int = 0,
                         radiance=None):
    """Normalized GGX-lobe lighting integral, estimated as sum(L(l) n.l) / sum(n.l).

    ``env`` is a radiance callable or a (6, H, W, 3) cube. Returns (mean, standard error).
    ``radiance`` optionally overrides env lookup with a function of (directions) for
    occlusion-aware scenes.
    """
    rng = np.random.default_rng(seed)
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    wo = np.asarray(wo, dtype=np.float64)
    wo = wo / np.linalg.norm(wo)
    alpha = max(roughness * roughness, 1e-4)
    fn = radiance or _radiance_fn(env)
    h = _ggx_half_vectors(rng, samples, alpha, n)
    l = 2.0 * (h @ wo)[:, None] * h - wo
    w = np.maximum(l @ n, 0.0)
    vals = np.zeros((samples, 3))
    ok = w > 0
    if ok.any():
        vals[ok] = fn(l[ok] / np.linalg.norm(l[ok], axis=1, keepdims=True))
    sw = w.sum()
    if sw <= 0:
        return np.zeros(3), np.full(3, np.inf)
    mean = (w[:, None] * vals).sum(axis=0) / sw
    # ratio-estimator standard error
    resid = w[:, None] * (vals - mean)
    stderr = np.sqrt((resid ** 2).sum(axis=0)) / sw
    return mean, stderr


def mc_m_spec(f0, nov: float, roughness: float, samples: int = 1_000_000, seed: int = 0, chunk: int = 250_000):
    """Directional specular albedo: integral of f_spec (n.l) over the hemisphere, white light.

    Importance sampled by D(h)(n.h); evaluates D, F, G and the pdf explicitly.
    """
    rng = np.random.default_rng(seed)
    f0 = np.asarray(f0, dtype=np.float64)
    alpha = max(roughness * roughness, 1e-4)
    a2 = alpha * alpha
    v = np.array([np.sqrt(max(0.0, 1 - nov * nov)), 0.0, nov])
    n = np.array([0.0, 0.0, 1.0])
    total = np.zeros(3)
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        h = _ggx_half_vectors(rng, k, alpha, n)
        voh = h @ v
        l = 2.0 * voh[:, None] * h - v
        nol = l[:, 2]
        noh = h[:, 2]
        ok = (nol > 0) & (voh > 0)
        d = a2 / (np.pi * ((noh ** 2) * (a2 - 1) + 1) ** 2)
        pdf = d * noh / (4 * np.maximum(voh, 1e-300))

        def lam(c):
            c = np.clip(c, 1e-12, 1.0)
            return 0.5 * (np.sqrt(1 + a2 * (1 - c * c) / (c * c)) - 1)

        g = 1.0 / (1.0 + lam(nol) + lam(np.full_like(nol, nov)))
        fres = f0[None, :] + (1 - f0[None, :]) * ((1 - np.clip(voh, 0, 1)) ** 5)[:, None]
        f_spec = d[:, None] * fres * g[:, None] / (4 * np.maximum(nol, 1e-300) * nov)[:, None]
        est = np.where(ok[:, None], f_spec * nol[:, None] / np.where(ok, pdf, 1.0)[:, None], 0.0)
        total += est.sum(axis=0)
        done += k
    return total / samples


# --- reflection score -----------------------------------------------------------------------

def naive_reflection_score(ref, sources, k_min: int = 5, tau_occ: float = 0.15):
    """Literal per-pixel, per-view loops. ``ref``/``sources`` carry view, image, depth."""
    h, w = ref.depth.shape
    score = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    rv = ref.view
    for i in range(h):
        for j in range(w):
            d = ref.depth[i, j]
            if not (d > 0):
                continue
            ray = np.array([(j - rv.cx) / rv.fx, (i - rv.cy) / rv.fy, 1.0])
            ray /= np.sqrt(ray @ ray)
            p = rv.R.T @ (d * ray - rv.t)
            devs = []
            for src in sources:
                sv = src.view
                c = sv.R @ p + sv.t
                if c[2] <= 0:
                    continue
                x = sv.fx * c[0] / c[2] + sv.cx
                y = sv.fy * c[1] / c[2] + sv.cy
                if not (0 <= x <= sv.width - 1 and 0 <= y <= sv.height - 1):
                    continue
                ds = src.depth[int(np.floor(y + 0.5)), int(np.floor(x + 0.5))]
                if not (ds > 0):
                    continue
                o = -sv.R.T @ sv.t
                if abs(np.sqrt(np.sum((p - o) ** 2)) - ds) >= tau_occ:
                    continue
                x0, y0 = min(int(np.floor(x)), sv.width - 2), min(int(np.floor(y)), sv.height - 2)
                fx, fy = x - x0, y - y0
                im = src.image
                val = ((1 - fx) * (1 - fy) * im[y0, x0] + fx * (1 - fy) * im[y0, x0 + 1]
                       + (1 - fx) * fy * im[y0 + 1, x0] + fx * fy * im[y0 + 1, x0 + 1])
                devs.append(np.sum(np.abs(val - ref.image[i, j])))
            if len(devs) >= k_min:
                valid[i, j] = True
                score[i, j] = sum(devs) / len(devs)
    return score, valid


# --- analytic scenes ---------------------------------------------------------------------------

@dataclass
class Material:
    c_diff: np.ndarray
    f0: np.ndarray
    roughness: float


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    material: Material

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        n = (p - self.center) / self.radius
        return t, n

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def sample_surface(self, count, rng):
        v = rng.normal(size=(count, 3))
        return self.center + self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    material: Material
    half_extent: float = np.inf

    def intersect(self, o, d):
        n = self.normal / np.linalg.norm(self.normal)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - o) @ n) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-6), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        if np.isfinite(self.half_extent):
            t = np.where(np.max(np.abs(p - self.point), axis=-1) <= self.half_extent, t, np.inf)
        nn = np.broadcast_to(n, p.shape)
        nn = np.where((denom > 0)[..., None], -nn, nn)  # two-sided
        return t, nn

    def sdf(self, p):
        n = self.normal / np.linalg.norm(self.normal)
        return (p - self.point) @ n

    def sample_surface(self, count, rng):
        n = self.normal / np.linalg.norm(self.normal)
        a = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        e = self.half_extent if np.isfinite(self.half_extent) else 1.0
        uv = rng.uniform(-e, e, size=(count, 2))
        return self.point + uv[:, :1] * a + uv[:, 1:] * b


@dataclass
class Box:
    """Axis-aligned box seen from the inside (normals point inward)."""

    lo: np.ndarray
    hi: np.ndarray
    material: Material

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - o) / d
            t2 = (self.hi - o) / d
        t_far = np.min(np.maximum(t1, t2), axis=-1)
        t_near = np.max(np.minimum(t1, t2), axis=-1)
        t = np.where(t_near > 1e-6, t_near, np.where(t_far > 1e-6, t_far, np.inf))
        t = np.where(t_far >= t_near, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        size = self.hi - self.lo
        rel = np.minimum(np.abs(p - self.lo), np.abs(p - self.hi)) / size
        ax = np.argmin(rel, axis=-1)
        n = np.zeros(p.shape)
        idx = np.indices(ax.shape)
        toward_lo = np.abs(np.take_along_axis(p - self.lo, ax[..., None], -1)[..., 0]) < np.abs(
            np.take_along_axis(p - self.hi, ax[..., None], -1)[..., 0])
        n[(*idx, ax)] = np.where(toward_lo, 1.0, -1.0)
        return t, n

    def sdf(self, p):
        return -np.min(np.minimum(p - self.lo, self.hi - p), axis=-1)

    def sample_surface(self, count, rng):
        size = self.hi - self.lo
        areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
        face = rng.choice(6, size=count, p=areas / areas.sum())
        p = self.lo + rng.random((count, 3)) * size
        ax = face % 3
        side = face // 3
        p[np.arange(count), ax] = np.where(side == 0, self.lo[ax], self.hi[ax])
        return p


@dataclass
class AnalyticScene:
    primitives: list
    env: AnalyticEnv

    def intersect(self, o, d):
        """Nearest hit: (t, normal, primitive index or -1)."""
        o = np.asarray(o, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        best_t = np.full(d.shape[:-1], np.inf)
        best_n = np.zeros(d.shape)
        best_i = np.full(d.shape[:-1], -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t, n = prim.intersect(o, d)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_n = np.where(closer[..., None], n, best_n)
            best_i = np.where(closer, i, best_i)
        return best_t, best_n, best_i

    def surface_samples(self, count: int, rng: np.random.Generator, only=None) -> np.ndarray:
        prims = self.primitives if only is None else [self.primitives[k] for k in only]
        per = [count // len(prims)] * len(prims)
        per[0] += count - sum(per)
        return np.concatenate([p.sample_surface(k, rng) for p, k in zip(prims, per)])


def _schlick(f0, cos):
    return f0 + (1 - f0) * (1 - np.clip(cos, 0, 1))[..., None] ** 5


def render_analytic(scene: AnalyticScene, view: PosedView, lut, samples: int = 256, seed: int = 0,
                    chunk: int = 512):
    """Ray-cast GT: image, range depth (0 = miss), world normals, primitive ids.

    Shading is (1 - F) c_diff + M_spec * I_spec with M_spec from ``lut`` and I_spec a
    GGX-lobe Monte Carlo integral in which secondary rays that hit other geometry
    pick up that surface's single-bounce radiance instead of the environment.
    """
    rng = np.random.default_rng(seed)
    rays = view.world_rays().reshape(-1, 3)
    origin = np.broadcast_to(view.center, rays.shape)
    t, n, pid = scene.intersect(origin, rays)
    hit = np.isfinite(t)
    h, w = view.height, view.width
    image = np.zeros((h * w, 3))
    depth = np.where(hit, t, 0.0)
    normals = np.where(hit[:, None], n, 0.0)
    idx = np.nonzero(hit)[0]
    for s in range(0, idx.size, chunk):
        sel = idx[s:s + chunk]
        image[sel] = _shade(scene, origin[sel] + t[sel, None] * rays[sel], n[sel], -rays[sel], pid[sel], lut,
                            samples, rng)
    return image.reshape(h, w, 3), depth.reshape(h, w), normals.reshape(h, w, 3), pid.reshape(h, w)


def _material_arrays(scene, pid):
    c = np.stack([np.asarray(p.material.c_diff, dtype=np.float64) for p in scene.primitives])[pid]
    f = np.stack([np.asarray(p.material.f0, dtype=np.float64) for p in scene.primitives])[pid]
    r = np.array([p.material.roughness for p in scene.primitives])[pid]
    return c, f, r


def _direct_radiance(scene, p, n, wo, pid, lut):
    """Single-bounce radiance leaving secondary hits: diffuse term + mirror env reflection."""
    c, f0, r = _material_arrays(scene, pid)
    cos = np.clip(np.sum(n * wo, axis=-1), 0, 1)
    fres = _schlick(f0, cos)
    refl = 2 * cos[:, None] * n - wo
    m = lut.m_spec(f0, cos, r)
    return (1 - fres) * c + m * scene.env(refl)


def _shade(scene, p, n, wo, pid, lut, samples, rng):
    c, f0, r = _material_arrays(scene, pid)
    cos = np.clip(np.sum(n * wo, axis=-1), 1e-4, 1)
    fres = _schlick(f0, cos)
    m = lut.m_spec(f0, cos, r)
    k = p.shape[0]
    alpha = np.maximum(r * r, 1e-4)
    u1, u2 = rng.random((k, samples)), rng.random((k, samples))
    tan2 = (alpha * alpha)[:, None] * u1 / (1 - u1)
    ct = 1 / np.sqrt(1 + tan2)
    st = np.sqrt(np.maximum(0, 1 - ct * ct))
    phi = 2 * np.pi * u2
    helper = np.where(np.abs(n[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    tx = helper - n * np.sum(helper * n, axis=1, keepdims=True)
    tx /= np.linalg.norm(tx, axis=1, keepdims=True)
    ty = np.cross(n, tx)
    hv = (st * np.cos(phi))[..., None] * tx[:, None] + (st * np.sin(phi))[..., None] * ty[:, None] + ct[..., None] * n[:, None]
    l = 2 * np.sum(hv * wo[:, None], axis=-1, keepdims=True) * hv - wo[:, None]
    l /= np.linalg.norm(l, axis=-1, keepdims=True)
    wgt = np.maximum(np.sum(l * n[:, None], axis=-1), 0)
    o2 = np.broadcast_to((p + 1e-4 * n)[:, None], l.shape)
    t2, n2, pid2 = scene.intersect(o2.reshape(-1, 3), l.reshape(-1, 3))
    rad = scene.env(l.reshape(-1, 3))
    sec = np.isfinite(t2) & (wgt.reshape(-1) > 0)
    if sec.any():
        q = o2.reshape(-1, 3)[sec] + t2[sec, None] * l.reshape(-1, 3)[sec]
        rad[sec] = _direct_radiance(scene, q, n2[sec], -l.reshape(-1, 3)[sec], pid2[sec], lut)
    rad = rad.reshape(k, samples, 3)
    i_spec = np.sum(wgt[..., None] * rad, axis=1) / np.maximum(wgt.sum(axis=1), 1e-12)[:, None]
    return (1 - fres) * c + m * i_spec
