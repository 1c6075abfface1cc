"""Deferred PBR shading of a G-buffer and its adjoint.

Per pixel: L = (1 - F) c + M_spec ((1 - w_vis) L_direct + w_vis L_indi), image = alpha * L,
with c, F0, r, depth the alpha-normalized blended channels and n the renormalized normal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..camera import PosedView
from ..envmap import MipCubemap, sample_trilinear, sample_trilinear_backward
from ..pbr import BrdfLut
from ..splat import CH_DEPTH, CH_DIFF, CH_F0, CH_NORMAL, CH_ROUGH, N_CH, GBuffer

MIN_ALPHA = 1e-3
COS_FLOOR = 1e-4


@dataclass
class Attrs:
    """Alpha-normalized surface attributes of the covered pixels (flattened by ``index``)."""

    index: np.ndarray  # flat pixel indices
    alpha: np.ndarray
    c_diff: np.ndarray
    f0: np.ndarray
    rough: np.ndarray
    n_raw_norm: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    wo: np.ndarray  # toward the camera
    points: np.ndarray
    shape: tuple


def gbuffer_attrs(gbuf: GBuffer, view: PosedView) -> Attrs:
    h, w = gbuf.alpha.shape
    buf = gbuf.buf.reshape(-1, N_CH)
    a = gbuf.alpha.reshape(-1)
    nraw = buf[:, CH_NORMAL]
    nn = np.linalg.norm(nraw, axis=1)
    idx = np.nonzero((a > MIN_ALPHA) & (nn > 1e-9))[0]
    a = a[idx]
    b = buf[idx]
    rays = view.world_rays().reshape(-1, 3)[idx]
    depth = b[:, CH_DEPTH] / a
    return Attrs(idx, a, b[:, CH_DIFF] / a[:, None], b[:, CH_F0] / a[:, None], b[:, CH_ROUGH] / a,
                 nn[idx], nraw[idx] / nn[idx, None], depth, -rays, view.center + depth[:, None] * rays, (h, w))


def attrs_backward(at: Attrs, g_c=None, g_f0=None, g_r=None, g_n=None, g_depth=None, g_alpha=None):
    """Map gradients on normalized attributes back to the raw G-buffer and alpha (full-size)."""
    k = at.index.size
    g_buf = np.zeros((k, N_CH))
    g_a = np.zeros(k) if g_alpha is None else np.array(g_alpha, dtype=np.float64)
    inv = 1.0 / at.alpha
    if g_c is not None:
        g_buf[:, CH_DIFF] = g_c * inv[:, None]
        g_a -= np.sum(g_c * at.c_diff, axis=1) * inv
    if g_f0 is not None:
        g_buf[:, CH_F0] = g_f0 * inv[:, None]
        g_a -= np.sum(g_f0 * at.f0, axis=1) * inv
    if g_r is not None:
        g_buf[:, CH_ROUGH] = g_r * inv
        g_a -= g_r * at.rough * inv
    if g_depth is not None:
        g_buf[:, CH_DEPTH] = g_depth * inv
        g_a -= g_depth * at.depth * inv
    if g_n is not None:
        n = at.normal
        g_buf[:, CH_NORMAL] = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / at.n_raw_norm[:, None]
    h, w = at.shape
    full_buf = np.zeros((h * w, N_CH))
    full_a = np.zeros(h * w)
    full_buf[at.index] = g_buf
    full_a[at.index] = g_a
    return full_buf.reshape(h, w, N_CH), full_a.reshape(h, w)


@dataclass
class ShadeCache:
    at: Attrs
    cos: np.ndarray
    cos_live: np.ndarray
    fres: np.ndarray
    ab: np.ndarray
    ab_dnov: np.ndarray
    ab_dr: np.ndarray
    m_spec: np.ndarray
    w_r: np.ndarray
    level: np.ndarray
    l_direct: np.ndarray
    ld_ddir: np.ndarray
    ld_dlvl: np.ndarray
    w_vis: np.ndarray
    l_indi: np.ndarray
    l_spec: np.ndarray
    radiance: np.ndarray
    use_mip: bool
    l_max: int


def shade(at: Attrs, env: MipCubemap, lut: BrdfLut, w_vis=None, l_indi=None, use_mip: bool = True):
    """Returns (premultiplied image (H, W, 3), cache)."""
    n = at.normal
    cos_raw = np.sum(n * at.wo, axis=1)
    cos = np.clip(cos_raw, COS_FLOOR, 1.0)
    cos_live = (cos_raw > COS_FLOOR) & (cos_raw < 1.0)
    f0 = at.f0
    fres = f0 + (1.0 - f0) * ((1.0 - cos) ** 5)[:, None]
    ab, ab_dnov, ab_dr = lut.lookup_with_grad(cos, at.rough)
    m_spec = f0 * ab[:, :1] + ab[:, 1:2]
    w_r = 2.0 * cos[:, None] * n - at.wo
    l_max = env.l_max
    level = at.rough ** 2 * (l_max - 1) if use_mip else np.zeros_like(at.rough)
    ld, ld_ddir, ld_dlvl = sample_trilinear(env, w_r, level, with_grad=True)
    k = at.index.size
    wv = np.zeros(k) if w_vis is None else np.asarray(w_vis, dtype=np.float64)
    li = np.zeros((k, 3)) if l_indi is None else np.asarray(l_indi, dtype=np.float64)
    l_spec = (1.0 - wv)[:, None] * ld + wv[:, None] * li
    radiance = (1.0 - fres) * at.c_diff + m_spec * l_spec
    h, w = at.shape
    img = np.zeros((h * w, 3))
    img[at.index] = at.alpha[:, None] * radiance
    cache = ShadeCache(at, cos, cos_live, fres, ab, ab_dnov, ab_dr, m_spec, w_r, level, ld, ld_ddir, ld_dlvl,
                       wv, li, l_spec, radiance, use_mip, l_max)
    return img.reshape(h, w, 3), cache


def shade_backward(cache: ShadeCache, env: MipCubemap, g_image, g_n_extra=None, g_depth_extra=None):
    """Adjoint of :func:`shade`.

    Returns (g_buf, g_alpha, per-level env texel grads, g_l_indi (K, 3)). ``g_n_extra`` and
    ``g_depth_extra`` add loss gradients taken directly on the unit normal / expected depth.
    """
    at = cache.at
    g_img = np.asarray(g_image, dtype=np.float64).reshape(-1, 3)[at.index]
    a = at.alpha
    g_rad = a[:, None] * g_img
    g_alpha = np.sum(g_img * cache.radiance, axis=1)
    g_c = (1.0 - cache.fres) * g_rad
    g_F = -at.c_diff * g_rad
    g_M = cache.l_spec * g_rad
    g_lspec = cache.m_spec * g_rad
    g_ld = (1.0 - cache.w_vis)[:, None] * g_lspec
    g_li = cache.w_vis[:, None] * g_lspec
    one_m = 1.0 - cache.cos
    g_f0 = g_F * (1.0 - one_m ** 5)[:, None] + g_M * cache.ab[:, :1]
    g_A = np.sum(g_M * at.f0, axis=1)
    g_B = np.sum(g_M, axis=1)
    g_cos = (np.sum(g_F * (-5.0 * (1.0 - at.f0) * (one_m ** 4)[:, None]), axis=1)
             + g_A * cache.ab_dnov[:, 0] + g_B * cache.ab_dnov[:, 1])
    g_r = g_A * cache.ab_dr[:, 0] + g_B * cache.ab_dr[:, 1]
    if cache.use_mip:
        g_lvl = np.sum(g_ld * cache.ld_dlvl, axis=1)
        g_r += g_lvl * 2.0 * at.rough * (cache.l_max - 1)
    g_wr = np.einsum("nc,ncj->nj", g_ld, cache.ld_ddir)
    n = at.normal
    g_n = 2.0 * cache.cos[:, None] * g_wr
    g_cos = g_cos + 2.0 * np.sum(g_wr * n, axis=1)
    g_cos = np.where(cache.cos_live, g_cos, 0.0)
    g_n += g_cos[:, None] * at.wo
    if g_n_extra is not None:
        g_n += np.asarray(g_n_extra, dtype=np.float64).reshape(-1, 3)[at.index]
    g_d = None
    if g_depth_extra is not None:
        g_d = np.asarray(g_depth_extra, dtype=np.float64).reshape(-1)[at.index]
    g_buf, g_a = attrs_backward(at, g_c, g_f0, g_r, g_n, g_d, g_alpha)
    env_grads = sample_trilinear_backward(env, cache.w_r, cache.level, g_ld)
    return g_buf, g_a, env_grads, g_li


# --- image losses ----------------------------------------------------------------------------

SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _blur(x):
    return gaussian_filter(x, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), mode="constant", truncate=3.5)


def ssim(x, y, with_grad: bool = False):
    """Mean Gaussian-window SSIM over pixels and channels; optional gradient w.r.t. ``x``.

    The zero-padded Gaussian blur is self-adjoint, so the gradient reuses it.
    """
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1, a2 = 2 * mx * my + SSIM_C1, 2 * sxy + SSIM_C2
    b1, b2 = mx * mx + my * my + SSIM_C1, sxx + syy + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    val = float(s.mean())
    if not with_grad:
        return val
    inv = 1.0 / s.size
    d_a1, d_a2 = a2 / (b1 * b2) * inv, a1 / (b1 * b2) * inv
    d_b1, d_b2 = -s / b1 * inv, -s / b2 * inv
    d_mx = d_a1 * 2 * my + d_a2 * (-2 * my) + d_b1 * 2 * mx + d_b2 * (-2 * mx)
    d_exx = d_b2
    d_exy = 2 * d_a2
    grad = _blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)
    return val, grad


def normal_mae(pred, gt, mask) -> float:
    """Mean angular error in degrees over ``mask``."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("normal_mae needs a non-empty mask")
    cos = np.clip(np.sum(np.asarray(pred)[mask] * np.asarray(gt)[mask], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def psnr(img, gt) -> float:
    mse = float(np.mean((np.clip(img, 0, 1) - np.clip(gt, 0, 1)) ** 2))
    return float("inf") if mse == 0 else float(-10 * np.log10(mse))
