"""Toy-scale differentiable Gaussian splatting into PBR G-buffers.

The compositing kernels are numba loops over pixels and depth-sorted Gaussians
(tile-free reference rasterizer). Projection and its adjoint are vectorized numpy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .camera import PosedView

log = logging.getLogger(__name__)

MIN_ALPHA = 1.0 / 255.0
MAX_ALPHA = 0.99
T_EPS = 1e-4
LOWPASS = 0.3
NEAR = 0.05
CUTOFF_SIGMA = 3.0

# feature channel layout of the raw G-buffer
CH_DIFF = slice(0, 3)
CH_F0 = slice(3, 6)
CH_ROUGH = 6
CH_NORMAL = slice(7, 10)
CH_DEPTH = 10
N_CH = 11


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class GaussianCloud:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray  # (w, x, y, z), normalized on use
    opacity_logit: np.ndarray
    c_diff: np.ndarray
    f0: np.ndarray
    rough_logit: np.ndarray

    PARAMS = ("means", "log_scales", "quats", "opacity_logit", "c_diff", "f0", "rough_logit")

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def create(cls, means, scales, quats=None, opacity=0.5, c_diff=0.5, f0=0.04, roughness=0.5) -> "GaussianCloud":
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = means.shape[0]
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)) if quats is None else np.asarray(quats, dtype=np.float64).reshape(n, 4)
        return cls(
            means.copy(),
            np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))).copy(),
            quats.copy(),
            logit(np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))).copy(),
            np.broadcast_to(np.asarray(c_diff, dtype=np.float64), (n, 3)).copy(),
            np.broadcast_to(np.asarray(f0, dtype=np.float64), (n, 3)).copy(),
            logit(np.broadcast_to(np.asarray(roughness, dtype=np.float64), (n,))).copy(),
        )

    @property
    def opacity(self):
        return sigmoid(self.opacity_logit)

    @property
    def roughness(self):
        return sigmoid(self.rough_logit)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()})

    def select(self, mask) -> "GaussianCloud":
        return GaussianCloud(**{k: v[mask] for k, v in self.arrays().items()})

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(**{k: np.concatenate([getattr(self, k), getattr(other, k)]) for k in self.PARAMS})

    def to_table(self) -> np.ndarray:
        """One record per Gaussian: mu(3) scale(3) quat(4) opacity-logit c_diff(3) f0(3) roughness-logit."""
        return np.concatenate(
            [self.means, np.exp(self.log_scales), self.quats, self.opacity_logit[:, None], self.c_diff, self.f0,
             self.rough_logit[:, None]], axis=1)

    @classmethod
    def from_table(cls, table: np.ndarray) -> "GaussianCloud":
        table = np.asarray(table, dtype=np.float64).reshape(-1, 18)
        return cls(table[:, 0:3].copy(), np.log(table[:, 3:6]), table[:, 6:10].copy(), table[:, 10].copy(),
                   table[:, 11:14].copy(), table[:, 14:17].copy(), table[:, 17].copy())

    def save(self, path: str | Path) -> None:
        header = "mu_x mu_y mu_z s_x s_y s_z q_w q_x q_y q_z opacity_logit cd_r cd_g cd_b f0_r f0_g f0_b rough_logit"
        np.savetxt(path, self.to_table(), header=header, fmt="%.9g")

    @classmethod
    def load(cls, path: str | Path) -> "GaussianCloud":
        return cls.from_table(np.loadtxt(path, ndmin=2))


def quat_to_rot(q):
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(-1, 3, 3)


def _rot_backward(q, dR):
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2] + z * g[:, 2, 0]
              + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2] - w * g[:, 2, 0]
              + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def gaussian_normals(cloud: GaussianCloud, cam_center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-axis normals oriented toward the camera; also returns axis index and sign."""
    R = quat_to_rot(cloud.quats)
    axis = np.argmin(cloud.log_scales, axis=1)
    n = R[np.arange(len(cloud)), :, axis]
    sign = np.where(np.sum(n * (cloud.means - cam_center), axis=1) > 0, -1.0, 1.0)
    return n * sign[:, None], axis, sign


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities plus what the adjoint needs."""

    mean2d: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse 2D covariance
    radius: np.ndarray
    opacity: np.ndarray
    feat: np.ndarray  # (N, 11)
    depth_z: np.ndarray
    valid: np.ndarray
    order: np.ndarray
    # cached for backward
    R: np.ndarray = field(repr=False, default=None)
    scales: np.ndarray = field(repr=False, default=None)
    t_cam: np.ndarray = field(repr=False, default=None)
    cov2d: np.ndarray = field(repr=False, default=None)
    T: np.ndarray = field(repr=False, default=None)
    sigma3d: np.ndarray = field(repr=False, default=None)
    axis: np.ndarray = field(repr=False, default=None)
    sign: np.ndarray = field(repr=False, default=None)
    degenerate: int = 0


def project(cloud: GaussianCloud, view: PosedView) -> Projection:
    n = len(cloud)
    R = quat_to_rot(cloud.quats) if n else np.zeros((0, 3, 3))
    s = np.exp(cloud.log_scales)
    M = R * s[:, None, :]
    sigma = M @ np.transpose(M, (0, 2, 1))
    W = view.R
    tc = cloud.means @ W.T + view.t
    z = tc[:, 2]
    zs = np.where(np.abs(z) > 1e-9, z, 1e-9)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = view.fx / zs
    J[:, 0, 2] = -view.fx * tc[:, 0] / zs ** 2
    J[:, 1, 1] = view.fy / zs
    J[:, 1, 2] = -view.fy * tc[:, 1] / zs ** 2
    T = J @ W
    cov2d = T @ sigma @ np.transpose(T, (0, 2, 1)) + LOWPASS * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    valid = (z > NEAR) & (det > 0) & np.all(np.isfinite(cov2d.reshape(n, 4)), axis=1)
    degenerate = int(np.sum((z > NEAR) & ~(det > 0)))
    if degenerate:
        log.debug("skipped %d Gaussians with non-PD projected covariance", degenerate)
    dets = np.where(valid, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / dets, -cov2d[:, 0, 1] / dets, cov2d[:, 0, 0] / dets], axis=1)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid * mid - dets, 0.0))
    radius = np.where(valid, CUTOFF_SIGMA * np.sqrt(np.maximum(lam, 0.0)), 0.0)
    mean2d = np.stack([view.fx * tc[:, 0] / zs + view.cx, view.fy * tc[:, 1] / zs + view.cy], axis=1)
    normal, axis, sign = gaussian_normals(cloud, view.center) if n else (np.zeros((0, 3)), np.zeros(0, int), np.zeros(0))
    feat = np.concatenate(
        [cloud.c_diff, cloud.f0, cloud.roughness[:, None], normal, np.linalg.norm(tc, axis=1)[:, None]], axis=1)
    order = np.argsort(np.where(valid, z, np.inf), kind="stable")
    order = order[valid[order]]
    return Projection(mean2d, conic, radius, cloud.opacity, feat, z, valid, order, R, s, tc, cov2d, T, sigma,
                      axis, sign, degenerate)


@numba.njit(cache=True)
def _composite_forward(order, mean2d, conic, radius, opacity, feat, height, width):
    nch = feat.shape[1]
    out = np.zeros((height, width, nch))
    alpha_out = np.zeros((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    for py in range(height):
        for px in range(width):
            T = 1.0
            stop = 0
            for k in range(order.shape[0]):
                g = order[k]
                mx = mean2d[g, 0]
                my = mean2d[g, 1]
                r = radius[g]
                if px < mx - r or px > mx + r or py < my - r or py > my + r:
                    continue
                dx = px - mx
                dy = py - my
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                if power > 0.0:
                    continue
                a = opacity[g] * np.exp(power)
                if a > MAX_ALPHA:
                    a = MAX_ALPHA
                if a < MIN_ALPHA:
                    continue
                t_next = T * (1.0 - a)
                if t_next < T_EPS:
                    break
                w = a * T
                for c in range(nch):
                    out[py, px, c] += feat[g, c] * w
                T = t_next
                stop = k + 1
            alpha_out[py, px] = 1.0 - T
            last[py, px] = stop
    return out, alpha_out, last


TILE = 8


@numba.njit(cache=True)
def _bin_tiles(order, mean2d, radius, height, width, tile):
    """Per-tile lists of Gaussian sort positions whose bounding square touches the tile."""
    ty_n = (height + tile - 1) // tile
    tx_n = (width + tile - 1) // tile
    counts = np.zeros(ty_n * tx_n + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(0, int(np.floor((mean2d[g, 0] - radius[g]) / tile)))
        x1 = min(tx_n - 1, int(np.floor((mean2d[g, 0] + radius[g]) / tile)))
        y0 = max(0, int(np.floor((mean2d[g, 1] - radius[g]) / tile)))
        y1 = min(ty_n - 1, int(np.floor((mean2d[g, 1] + radius[g]) / tile)))
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tx_n + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(0, int(np.floor((mean2d[g, 0] - radius[g]) / tile)))
        x1 = min(tx_n - 1, int(np.floor((mean2d[g, 0] + radius[g]) / tile)))
        y0 = max(0, int(np.floor((mean2d[g, 1] - radius[g]) / tile)))
        y1 = min(ty_n - 1, int(np.floor((mean2d[g, 1] + radius[g]) / tile)))
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * tx_n + tx
                items[fill[t]] = k
                fill[t] += 1
    return offsets, items


@numba.njit(cache=True)
def _gather_tile(items, s0, m, order, mean2d, conic, radius, opacity, feat):
    """Contiguous copies of one tile's Gaussians (in sort order) for cache-friendly pixel loops."""
    nch = feat.shape[1]
    lk = np.empty(m, dtype=np.int64)
    lg = np.empty(m, dtype=np.int64)
    geo = np.empty((m, 7))  # mx, my, r, conic a, b, c, opacity
    lf = np.empty((m, nch))
    for j in range(m):
        k = items[s0 + j]
        g = order[k]
        lk[j] = k
        lg[j] = g
        geo[j, 0] = mean2d[g, 0]
        geo[j, 1] = mean2d[g, 1]
        geo[j, 2] = radius[g]
        geo[j, 3] = conic[g, 0]
        geo[j, 4] = conic[g, 1]
        geo[j, 5] = conic[g, 2]
        geo[j, 6] = opacity[g]
        for c in range(nch):
            lf[j, c] = feat[g, c]
    return lk, lg, geo, lf


@numba.njit(cache=True)
def _composite_forward_tiled(order, mean2d, conic, radius, opacity, feat, height, width, tile):
    """Same arithmetic as the reference loop, restricted to each tile's Gaussian list."""
    offsets, items = _bin_tiles(order, mean2d, radius, height, width, tile)
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    nch = feat.shape[1]
    out = np.zeros((height, width, nch))
    alpha_out = np.zeros((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    acc = np.zeros(nch)
    for ty in range(ty_n):
        for tx in range(tx_n):
            t_id = ty * tx_n + tx
            s0 = offsets[t_id]
            m = offsets[t_id + 1] - s0
            if m == 0:
                continue
            lk, lg, geo, lf = _gather_tile(items, s0, m, order, mean2d, conic, radius, opacity, feat)
            for py in range(ty * tile, min(height, ty * tile + tile)):
                for px in range(tx * tile, min(width, tx * tile + tile)):
                    T = 1.0
                    stop = 0
                    for c in range(nch):
                        acc[c] = 0.0
                    for j in range(m):
                        mx = geo[j, 0]
                        my = geo[j, 1]
                        r = geo[j, 2]
                        if px < mx - r or px > mx + r or py < my - r or py > my + r:
                            continue
                        dx = px - mx
                        dy = py - my
                        power = -0.5 * (geo[j, 3] * dx * dx + geo[j, 5] * dy * dy) - geo[j, 4] * dx * dy
                        if power > 0.0:
                            continue
                        a = geo[j, 6] * np.exp(power)
                        if a > MAX_ALPHA:
                            a = MAX_ALPHA
                        if a < MIN_ALPHA:
                            continue
                        t_next = T * (1.0 - a)
                        if t_next < T_EPS:
                            break
                        w = a * T
                        for c in range(nch):
                            acc[c] += lf[j, c] * w
                        T = t_next
                        stop = lk[j] + 1
                    for c in range(nch):
                        out[py, px, c] = acc[c]
                    alpha_out[py, px] = 1.0 - T
                    last[py, px] = stop
    return out, alpha_out, last, offsets, items


@numba.njit(cache=True)
def _composite_backward_tiled(order, mean2d, conic, radius, opacity, feat, alpha, last, g_buf, g_alpha,
                              offsets, items, tile):
    n = mean2d.shape[0]
    nch = feat.shape[1]
    height, width = alpha.shape
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_feat = np.zeros((n, nch))
    acc = np.zeros(nch)
    for ty in range(ty_n):
        for tx in range(tx_n):
            t_id = ty * tx_n + tx
            s0 = offsets[t_id]
            m = offsets[t_id + 1] - s0
            if m == 0:
                continue
            lk, lg, geo, lf = _gather_tile(items, s0, m, order, mean2d, conic, radius, opacity, feat)
            for py in range(ty * tile, min(height, ty * tile + tile)):
                for px in range(tx * tile, min(width, tx * tile + tile)):
                    t_final = 1.0 - alpha[py, px]
                    T = t_final
                    for c in range(nch):
                        acc[c] = 0.0
                    ga = g_alpha[py, px]
                    stop = last[py, px]
                    for j in range(m - 1, -1, -1):
                        if lk[j] >= stop:
                            continue
                        mx = geo[j, 0]
                        my = geo[j, 1]
                        r = geo[j, 2]
                        if px < mx - r or px > mx + r or py < my - r or py > my + r:
                            continue
                        dx = px - mx
                        dy = py - my
                        ca = geo[j, 3]
                        cb = geo[j, 4]
                        cc = geo[j, 5]
                        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                        if power > 0.0:
                            continue
                        gauss = np.exp(power)
                        raw = geo[j, 6] * gauss
                        a = raw if raw < MAX_ALPHA else MAX_ALPHA
                        if a < MIN_ALPHA:
                            continue
                        g = lg[j]
                        T = T / (1.0 - a)
                        w = a * T
                        d_a = ga * t_final / (1.0 - a)
                        for c in range(nch):
                            gc = g_buf[py, px, c]
                            g_feat[g, c] += w * gc
                            d_a += gc * (lf[j, c] * T - acc[c] / (1.0 - a))
                            acc[c] += lf[j, c] * w
                        if raw >= MAX_ALPHA:
                            continue
                        g_opac[g] += d_a * gauss
                        d_pow = d_a * raw
                        g_mean[g, 0] += d_pow * (ca * dx + cb * dy)
                        g_mean[g, 1] += d_pow * (cb * dx + cc * dy)
                        g_conic[g, 0] += -0.5 * d_pow * dx * dx
                        g_conic[g, 1] += -d_pow * dx * dy
                        g_conic[g, 2] += -0.5 * d_pow * dy * dy
    return g_mean, g_conic, g_opac, g_feat


@numba.njit(cache=True)
def _composite_backward(order, mean2d, conic, radius, opacity, feat, alpha, last, g_buf, g_alpha):
    n = mean2d.shape[0]
    nch = feat.shape[1]
    height, width = alpha.shape
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_feat = np.zeros((n, nch))
    acc = np.zeros(nch)
    for py in range(height):
        for px in range(width):
            t_final = 1.0 - alpha[py, px]
            T = t_final
            for c in range(nch):
                acc[c] = 0.0
            ga = g_alpha[py, px]
            for k in range(last[py, px] - 1, -1, -1):
                g = order[k]
                mx = mean2d[g, 0]
                my = mean2d[g, 1]
                r = radius[g]
                if px < mx - r or px > mx + r or py < my - r or py > my + r:
                    continue
                dx = px - mx
                dy = py - my
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                if power > 0.0:
                    continue
                gauss = np.exp(power)
                raw = opacity[g] * gauss
                a = raw if raw < MAX_ALPHA else MAX_ALPHA
                if a < MIN_ALPHA:
                    continue
                T = T / (1.0 - a)
                w = a * T
                d_a = ga * t_final / (1.0 - a)
                for c in range(nch):
                    gc = g_buf[py, px, c]
                    g_feat[g, c] += w * gc
                    d_a += gc * (feat[g, c] * T - acc[c] / (1.0 - a))
                    acc[c] += feat[g, c] * w
                if raw >= MAX_ALPHA:
                    continue
                g_opac[g] += d_a * gauss
                d_pow = d_a * raw
                g_mean[g, 0] += d_pow * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean[g, 1] += d_pow * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[g, 0] += -0.5 * d_pow * dx * dx
                g_conic[g, 1] += -d_pow * dx * dy
                g_conic[g, 2] += -0.5 * d_pow * dy * dy
    return g_mean, g_conic, g_opac, g_feat


@dataclass
class GBuffer:
    """Raw alpha-blended channels (as composited, not divided by alpha) and accumulated alpha."""

    buf: np.ndarray  # (H, W, 11)
    alpha: np.ndarray  # (H, W)

    @property
    def c_diff(self):
        return self.buf[..., CH_DIFF]

    @property
    def f0(self):
        return self.buf[..., CH_F0]

    @property
    def roughness(self):
        return self.buf[..., CH_ROUGH]

    @property
    def normal(self):
        """Blended normal renormalized to unit length (zero where nothing was hit)."""
        n = self.buf[..., CH_NORMAL]
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        return np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), 0.0)

    @property
    def depth(self):
        return self.buf[..., CH_DEPTH]

    def expected_depth(self, min_alpha: float = 1e-4):
        a = self.alpha
        return np.where(a > min_alpha, self.depth / np.maximum(a, min_alpha), 0.0)


@dataclass
class RasterContext:
    proj: Projection
    last: np.ndarray
    gbuf: GBuffer
    view: PosedView
    tiles: tuple | None = None
    mean2d_grad: np.ndarray | None = None  # filled by rasterize_backward (densification stats)


def rasterize(cloud: GaussianCloud, view: PosedView, return_context: bool = False, tiled: bool = True):
    """Composite every G-buffer channel front to back; ``tiled=False`` runs the per-pixel reference loop."""
    if len(cloud) == 0:
        gb = GBuffer(np.zeros((view.height, view.width, N_CH)), np.zeros((view.height, view.width)))
        ctx = RasterContext(project(cloud, view), np.zeros((view.height, view.width), dtype=np.int64), gb, view)
        return (gb, ctx) if return_context else gb
    proj = project(cloud, view)
    args = (proj.order, proj.mean2d, proj.conic, proj.radius, proj.opacity, np.ascontiguousarray(proj.feat),
            view.height, view.width)
    tiles = None
    if tiled:
        buf, alpha, last, offsets, items = _composite_forward_tiled(*args, TILE)
        tiles = (offsets, items)
    else:
        buf, alpha, last = _composite_forward(*args)
    gb = GBuffer(buf, alpha)
    if return_context:
        return gb, RasterContext(proj, last, gb, view, tiles)
    return gb


def rasterize_backward(cloud: GaussianCloud, ctx: RasterContext, g_buf, g_alpha=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every cloud parameter, given dL/d(raw G-buffer, alpha)."""
    n = len(cloud)
    grads = {k: np.zeros_like(v) for k, v in cloud.arrays().items()}
    if n == 0:
        return grads
    view = ctx.view
    p = ctx.proj
    g_alpha = np.zeros(ctx.gbuf.alpha.shape) if g_alpha is None else np.asarray(g_alpha, dtype=np.float64)
    args = (p.order, p.mean2d, p.conic, p.radius, p.opacity, np.ascontiguousarray(p.feat), ctx.gbuf.alpha,
            ctx.last, np.ascontiguousarray(g_buf, dtype=np.float64), g_alpha)
    if ctx.tiles is not None:
        g_mean, g_conic, g_opac, g_feat = _composite_backward_tiled(*args, ctx.tiles[0], ctx.tiles[1], TILE)
    else:
        g_mean, g_conic, g_opac, g_feat = _composite_backward(*args)
    valid = p.valid
    g_mean[~valid] = 0.0
    g_conic[~valid] = 0.0
    ctx.mean2d_grad = g_mean

    grads["c_diff"] = g_feat[:, CH_DIFF].copy()
    grads["f0"] = g_feat[:, CH_F0].copy()
    rough = cloud.roughness
    grads["rough_logit"] = g_feat[:, CH_ROUGH] * rough * (1 - rough)
    op = p.opacity
    grads["opacity_logit"] = g_opac * op * (1 - op)

    tc = p.t_cam
    z = np.where(np.abs(tc[:, 2]) > 1e-9, tc[:, 2], 1e-9)
    x, y = tc[:, 0], tc[:, 1]
    g_tc = np.zeros_like(tc)
    # depth channel: distance to camera center
    dist = np.linalg.norm(tc, axis=1)
    g_tc += (g_feat[:, CH_DEPTH] / np.maximum(dist, 1e-12))[:, None] * tc
    # projected mean
    g_tc[:, 0] += g_mean[:, 0] * view.fx / z
    g_tc[:, 1] += g_mean[:, 1] * view.fy / z
    g_tc[:, 2] += -g_mean[:, 0] * view.fx * x / z ** 2 - g_mean[:, 1] * view.fy * y / z ** 2
    # conic -> 2D covariance
    a, b, c = p.conic[:, 0], p.conic[:, 1], p.conic[:, 2]
    Cinv = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    G = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                  np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    g_cov2d = -Cinv @ G @ Cinv
    # cov2d = T Sigma T^T
    T = p.T
    g_sigma = np.transpose(T, (0, 2, 1)) @ g_cov2d @ T
    g_T = 2.0 * g_cov2d @ T @ p.sigma3d
    g_J = g_T @ view.R.T
    g_tc[:, 0] += g_J[:, 0, 2] * (-view.fx / z ** 2)
    g_tc[:, 1] += g_J[:, 1, 2] * (-view.fy / z ** 2)
    g_tc[:, 2] += (g_J[:, 0, 0] * (-view.fx / z ** 2) + g_J[:, 0, 2] * (2 * view.fx * x / z ** 3)
                   + g_J[:, 1, 1] * (-view.fy / z ** 2) + g_J[:, 1, 2] * (2 * view.fy * y / z ** 3))
    g_tc[~valid] = 0.0
    grads["means"] = g_tc @ view.R
    # Sigma = M M^T, M = R S
    s = p.scales
    M = p.R * s[:, None, :]
    g_M = 2.0 * g_sigma @ M
    g_M[~valid] = 0.0
    grads["log_scales"] = np.einsum("nij,nij->nj", p.R, g_M) * s
    g_R = g_M * s[:, None, :]
    # normal channel: sign * R[:, axis]
    idx = np.arange(n)
    g_R[idx, :, p.axis] += p.sign[:, None] * g_feat[:, CH_NORMAL]
    grads["quats"] = _rot_backward(cloud.quats, g_R)
    return grads


# --- densification -------------------------------------------------------------------

@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale: float = 1.6
    percent_dense: float = 0.01
    scene_extent: float = 1.0


def densify_and_prune(cloud: GaussianCloud, grad_accum: np.ndarray, grad_count: np.ndarray,
                      cfg: DensifyConfig, rng: np.random.Generator) -> GaussianCloud:
    """Clone small / split large Gaussians with high mean positional gradient, then prune transparent ones."""
    n = len(cloud)
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = mean_grad > cfg.grad_threshold
    big = np.max(np.exp(cloud.log_scales), axis=1) > cfg.percent_dense * cfg.scene_extent
    clone_mask = hot & ~big
    split_mask = hot & big

    clones = cloud.select(clone_mask)
    parents = cloud.select(split_mask)
    children = []
    if len(parents):
        R = quat_to_rot(parents.quats)
        s = np.exp(parents.log_scales)
        for _ in range(2):
            offs = rng.normal(size=s.shape) * s
            child = parents.copy()
            child.means = parents.means + np.einsum("nij,nj->ni", R, offs)
            child.log_scales = parents.log_scales - np.log(cfg.split_scale)
            children.append(child)
    out = cloud.select(~split_mask).concat(clones)
    for ch in children:
        out = out.concat(ch)
    keep = out.opacity >= cfg.prune_opacity
    log.info("densify: %d cloned, %d split, %d pruned (%d -> %d)", clone_mask.sum(), split_mask.sum(),
             int((~keep).sum()), n, int(keep.sum()))
    return out.select(keep)
