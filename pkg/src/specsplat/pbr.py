"""Microfacet BRDF terms, the split-sum BRDF LUT and deferred radiance composition.

All functions broadcast over leading array dimensions; colors live in the last
axis. Shading is linear RGB throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ALPHA_FLOOR = 1e-4


def roughness_to_alpha(r):
    return np.maximum(np.asarray(r, dtype=np.float64) ** 2, ALPHA_FLOOR)


def fresnel_schlick(f0, cos_theta):
    cos_theta = np.clip(cos_theta, 0.0, 1.0)
    f0 = np.asarray(f0, dtype=np.float64)
    w = (1.0 - cos_theta) ** 5
    if np.ndim(w) and np.ndim(f0) > np.ndim(w):
        w = w[..., None]
    return f0 + (1.0 - f0) * w


def ndf(r, n, h):
    """GGX / Trowbridge-Reitz normal distribution with alpha = r**2."""
    a2 = roughness_to_alpha(r) ** 2
    noh = np.clip(np.sum(np.asarray(n) * np.asarray(h), axis=-1), 0.0, 1.0)
    d = noh * noh * (a2 - 1.0) + 1.0
    return a2 / (np.pi * d * d)


def _smith_lambda(cos_theta, a2):
    c2 = np.maximum(cos_theta * cos_theta, 1e-12)
    tan2 = (1.0 - c2) / c2
    return 0.5 * (np.sqrt(1.0 + a2 * tan2) - 1.0)


def smith_g2(nol, nov, r):
    """Height-correlated Smith masking-shadowing in terms of the two cosines."""
    a2 = roughness_to_alpha(r) ** 2
    g = 1.0 / (1.0 + (_smith_lambda(nol, a2) + _smith_lambda(nov, a2)))  # symmetric in rounding
    return np.where((nol > 0) & (nov > 0), g, 0.0)


def geometry_smith(wi, wo, n, r):
    nol = np.sum(np.asarray(n) * np.asarray(wi), axis=-1)
    nov = np.sum(np.asarray(n) * np.asarray(wo), axis=-1)
    return smith_g2(nol, nov, r)


def reflect(wo, n):
    """Mirror ``wo`` (pointing away from the surface) about ``n``."""
    d = np.sum(wo * n, axis=-1, keepdims=True)
    return 2.0 * d * n - wo


# --- sampling helpers -------------------------------------------------------

def hammersley(count: int) -> np.ndarray:
    i = np.arange(count, dtype=np.uint32)
    bits = i.copy()
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return np.stack([i / count, bits.astype(np.float64) * 2.3283064365386963e-10], axis=-1)


def sample_ggx_half(xi: np.ndarray, alpha) -> np.ndarray:
    """Tangent-space half vectors distributed as D(h) (n.h) for GGX."""
    a2 = np.asarray(alpha, dtype=np.float64)[..., None] ** 2
    phi = 2.0 * np.pi * xi[:, 0]
    cos_t = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (a2 - 1.0) * xi[:, 1]))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    return np.stack([np.cos(phi) * sin_t, np.sin(phi) * sin_t, cos_t], axis=-1)


def tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    up = np.where(np.abs(n[..., 2:3]) < 0.999, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    t = np.cross(up, n)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


# --- split-sum LUT ----------------------------------------------------------

@dataclass(frozen=True)
class BrdfLut:
    """Scale/bias table over (n.wo, roughness); rows index n.wo, columns roughness."""

    table: np.ndarray  # (n_nov, n_rough, 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.table.shape[0], self.table.shape[1]

    def _coords(self, nov, r):
        h, w = self.shape
        x = np.clip(np.asarray(nov, dtype=np.float64) * h - 0.5, 0.0, h - 1.0)
        y = np.clip(np.asarray(r, dtype=np.float64) * w - 0.5, 0.0, w - 1.0)
        i0 = np.minimum(np.floor(x).astype(np.int64), h - 2) if h > 1 else np.zeros_like(x, dtype=np.int64)
        j0 = np.minimum(np.floor(y).astype(np.int64), w - 2) if w > 1 else np.zeros_like(y, dtype=np.int64)
        return x, y, i0, j0

    def lookup(self, nov, r):
        """Bilinear (A, B) lookup, clamped at the table edges. Returns (..., 2)."""
        return self.lookup_with_grad(nov, r)[0]

    def lookup_with_grad(self, nov, r):
        """(A,B) plus derivatives w.r.t. n.wo and roughness (zero outside the table)."""
        h, w = self.shape
        nov = np.asarray(nov, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        x, y, i0, j0 = self._coords(nov, r)
        fx = (x - i0)[..., None]
        fy = (y - j0)[..., None]
        t = self.table
        t00, t01 = t[i0, j0], t[i0, j0 + 1]
        t10, t11 = t[i0 + 1, j0], t[i0 + 1, j0 + 1]
        val = (1 - fx) * ((1 - fy) * t00 + fy * t01) + fx * ((1 - fy) * t10 + fy * t11)
        inside_x = ((nov * h - 0.5 > 0.0) & (nov * h - 0.5 < h - 1.0))[..., None]
        inside_y = ((r * w - 0.5 > 0.0) & (r * w - 0.5 < w - 1.0))[..., None]
        d_nov = ((1 - fy) * (t10 - t00) + fy * (t11 - t01)) * h * inside_x
        d_r = ((1 - fx) * (t01 - t00) + fx * (t11 - t10)) * w * inside_y
        return val, d_nov, d_r

    def m_spec(self, f0, nov, r):
        ab = self.lookup(nov, r)
        return np.asarray(f0) * ab[..., 0:1] + ab[..., 1:2]

    def save(self, path: str | Path) -> None:
        h, w = self.shape
        with open(path, "wb") as fh:
            fh.write(b"BLUT")
            fh.write(struct.pack("<II", w, h))
            fh.write(self.table.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "BrdfLut":
        raw = Path(path).read_bytes()
        if raw[:4] != b"BLUT":
            raise ValueError(f"{path}: bad magic {raw[:4]!r}")
        w, h = struct.unpack("<II", raw[4:12])
        data = np.frombuffer(raw[12:], dtype="<f4")
        if data.size != w * h * 2:
            raise ValueError(f"{path}: expected {w * h * 2} floats, found {data.size}")
        return cls(data.reshape(h, w, 2).astype(np.float64))


def build_brdf_lut(sample_count: int = 1024, resolution: int = 64) -> BrdfLut:
    """Karis-style integration of the specular lobe into F0 scale and bias.

    Deterministic: samples come from a Hammersley sequence.
    """
    if sample_count < 256:
        raise ValueError("sample_count must be >= 256")
    xi = hammersley(sample_count)
    nov = (np.arange(resolution) + 0.5) / resolution
    rough = (np.arange(resolution) + 0.5) / resolution
    table = np.zeros((resolution, resolution, 2))
    for j, r in enumerate(rough):
        alpha = roughness_to_alpha(r)
        h = sample_ggx_half(xi, alpha)  # (S, 3), n = +z
        v = np.stack([np.sqrt(1.0 - nov ** 2), np.zeros_like(nov), nov], axis=-1)  # (R, 3)
        voh = v @ h.T  # (R, S)
        l_z = 2.0 * voh * h[None, :, 2] - v[:, None, 2]
        noh = h[None, :, 2]
        valid = (l_z > 0) & (voh > 0)
        g = smith_g2(np.where(valid, l_z, 1.0), nov[:, None], r)
        g_vis = np.where(valid, g * voh / (noh * nov[:, None]), 0.0)
        fc = (1.0 - np.clip(voh, 0.0, 1.0)) ** 5
        table[:, j, 0] = np.mean((1.0 - fc) * g_vis, axis=1)
        table[:, j, 1] = np.mean(fc * g_vis, axis=1)
    return BrdfLut(np.clip(table, 0.0, 1.0))


# --- composition --------------------------------------------------------------

def compose_radiance(c_diff, fresnel, m_spec, w_vis, l_direct, l_indi):
    """Deferred shading: (1-F) C_diff + M_spec ((1-w) L_direct + w L_indi)."""
    w = np.asarray(w_vis, dtype=np.float64)
    if w.ndim:
        w = w[..., None]
    return (1.0 - fresnel) * c_diff + m_spec * ((1.0 - w) * l_direct + w * l_indi)
