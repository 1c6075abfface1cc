"""Mip-Cubemap environment: face mapping, GGX prefiltering, trilinear lookup and its adjoint.

Faces are stored as ``(6, H, W, 3)`` arrays in the order +X, -X, +Y, -Y, +Z, -Z
with the OpenGL cube-face UV convention. Texel row ``i`` follows v, column ``j``
follows u, and texel centers sit at ``(j + 0.5) / W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .pbr import hammersley, sample_ggx_half, tangent_frame, roughness_to_alpha

# (major axis, major sign, s axis, s sign, t axis, t sign)
FACES = np.array(
    [
        (0, 1, 2, -1, 1, -1),
        (0, -1, 2, 1, 1, -1),
        (1, 1, 0, 1, 2, 1),
        (1, -1, 0, 1, 2, -1),
        (2, 1, 0, 1, 1, -1),
        (2, -1, 0, -1, 1, -1),
    ],
    dtype=np.int64,
)
FACE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")


def dir_to_face_uv(d):
    d = np.asarray(d, dtype=np.float64)
    if np.any(np.linalg.norm(d, axis=-1) == 0):
        raise ValueError("zero direction has no cube face")
    ad = np.abs(d)
    axis = np.argmax(ad, axis=-1)
    major = np.take_along_axis(d, axis[..., None], -1)[..., 0]
    face = 2 * axis + (major < 0)
    info = FACES[face]
    am = np.abs(major)
    sc = info[..., 3] * np.take_along_axis(d, info[..., 2:3], -1)[..., 0]
    tc = info[..., 5] * np.take_along_axis(d, info[..., 4:5], -1)[..., 0]
    return face, 0.5 * (sc / am + 1.0), 0.5 * (tc / am + 1.0)


def face_uv_to_dir(face, u, v):
    face = np.asarray(face)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    info = FACES[face]
    shape = np.broadcast(face, u, v).shape
    d = np.zeros(shape + (3,))
    np.put_along_axis(d, np.broadcast_to(info[..., 0:1], shape + (1,)), np.broadcast_to(info[..., 1:2], shape + (1,)).astype(np.float64), -1)
    np.put_along_axis(d, np.broadcast_to(info[..., 2:3], shape + (1,)), (info[..., 3] * (2.0 * u - 1.0))[..., None], -1)
    np.put_along_axis(d, np.broadcast_to(info[..., 4:5], shape + (1,)), (info[..., 5] * (2.0 * v - 1.0))[..., None], -1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def texel_directions(res: int) -> np.ndarray:
    """Unit directions of every texel center, shape (6, res, res, 3)."""
    c = (np.arange(res) + 0.5) / res
    v, u = np.meshgrid(c, c, indexing="ij")
    return np.stack([face_uv_to_dir(f, u, v) for f in range(6)])


def texel_solid_angles(res: int) -> np.ndarray:
    """Exact solid angle of each texel (6, res, res)."""
    edges = np.linspace(-1.0, 1.0, res + 1)

    def area(x, y):
        return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))

    x0, x1 = edges[None, :-1], edges[None, 1:]
    y0, y1 = edges[:-1, None], edges[1:, None]
    a = area(x1, y1) - area(x0, y1) - area(x1, y0) + area(x0, y0)
    return np.broadcast_to(a, (6, res, res)).copy()


@lru_cache(maxsize=16)
def _padded_index(res: int) -> np.ndarray:
    """Flat texel index for padded coordinates (face, i+1, j+1), i, j in [-1, res].

    Off-face taps resolve through the adjacent face by projecting the
    extended texel-center direction.
    """
    c = (np.arange(-1, res + 1) + 0.5) / res
    v, u = np.meshgrid(c, c, indexing="ij")
    out = np.empty((6, res + 2, res + 2), dtype=np.int64)
    for f in range(6):
        # extended face coordinates stay well defined off [0, 1]
        info = FACES[f]
        d = np.zeros(u.shape + (3,))
        d[..., info[0]] = info[1]
        d[..., info[2]] = info[3] * (2.0 * u - 1.0)
        d[..., info[4]] = info[5] * (2.0 * v - 1.0)
        face, uu, vv = dir_to_face_uv(d)
        jj = np.clip(np.floor(uu * res), 0, res - 1).astype(np.int64)
        ii = np.clip(np.floor(vv * res), 0, res - 1).astype(np.int64)
        out[f] = face * res * res + ii * res + jj
    return out


def _face_uv_jacobian(d, face):
    """d(u, v)/d(dir) for the given face assignment, shape (..., 2, 3)."""
    info = FACES[face]
    axis, s_ax, s_sg, t_ax, t_sg = info[..., 0], info[..., 2], info[..., 3], info[..., 4], info[..., 5]
    m = np.take_along_axis(d, axis[..., None], -1)[..., 0]
    am = np.abs(m)
    sgn = np.sign(m)
    ds = np.take_along_axis(d, s_ax[..., None], -1)[..., 0] * s_sg
    dt = np.take_along_axis(d, t_ax[..., None], -1)[..., 0] * t_sg
    jac = np.zeros(d.shape[:-1] + (2, 3))
    idx = np.indices(d.shape[:-1])
    jac[(*idx, np.zeros_like(axis), s_ax)] += 0.5 * s_sg / am
    jac[(*idx, np.zeros_like(axis), axis)] += -0.5 * ds * sgn / (am * am)
    jac[(*idx, np.ones_like(axis), t_ax)] += 0.5 * t_sg / am
    jac[(*idx, np.ones_like(axis), axis)] += -0.5 * dt * sgn / (am * am)
    return jac


@dataclass
class _Taps:
    index: np.ndarray  # (..., 4) flat texel indices
    weight: np.ndarray  # (..., 4)
    du: np.ndarray  # (..., 4) d weight / du
    dv: np.ndarray  # (..., 4) d weight / dv
    face: np.ndarray


def _bilinear_taps(res: int, d: np.ndarray) -> _Taps:
    face, u, v = dir_to_face_uv(d)
    x = u * res - 0.5
    y = v * res - 0.5
    j0 = np.floor(x).astype(np.int64)
    i0 = np.floor(y).astype(np.int64)
    fx = x - j0
    fy = y - i0
    pad = _padded_index(res)
    # j0, i0 lie in [-1, res-1]; padded offset +1
    j0c = np.clip(j0, -1, res - 1)
    i0c = np.clip(i0, -1, res - 1)
    idx = np.stack(
        [
            pad[face, i0c + 1, j0c + 1],
            pad[face, i0c + 1, j0c + 2],
            pad[face, i0c + 2, j0c + 1],
            pad[face, i0c + 2, j0c + 2],
        ],
        axis=-1,
    )
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    du = np.stack([-(1 - fy), (1 - fy), -fy, fy], axis=-1) * res
    dv = np.stack([-(1 - fx), -fx, (1 - fx), fx], axis=-1) * res
    return _Taps(idx, w, du, dv, face)


def sample_level(texels: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Bilinear lookup of one cubemap level (6, H, W, C) in directions d (..., 3)."""
    res = texels.shape[1]
    taps = _bilinear_taps(res, np.asarray(d, dtype=np.float64))
    flat = texels.reshape(-1, texels.shape[-1])
    return np.einsum("...k,...kc->...c", taps.weight, flat[taps.index])


def roughness_to_level(r, l_max: int):
    r = np.clip(r, 0.0, 1.0)
    return r * r * (l_max - 1)


def _box_down(texels: np.ndarray, factor: int) -> np.ndarray:
    six, h, w, c = texels.shape
    return texels.reshape(six, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def prefilter_level(source: np.ndarray, res: int, roughness: float, samples: int) -> np.ndarray:
    """GGX-convolve ``source`` (split-sum n = v = r convention) onto a ``res`` cubemap."""
    dirs = texel_directions(res).reshape(-1, 3)
    xi = hammersley(samples)
    h_t = sample_ggx_half(xi, roughness_to_alpha(roughness))  # (S, 3)
    t, b = tangent_frame(dirs)
    out = np.zeros((dirs.shape[0], source.shape[-1]))
    chunk = max(1, 2_000_000 // samples)
    for s in range(0, dirs.shape[0], chunk):
        n = dirs[s:s + chunk]
        h = h_t[None, :, 0:1] * t[s:s + chunk, None] + h_t[None, :, 1:2] * b[s:s + chunk, None] + h_t[None, :, 2:3] * n[:, None]
        voh = np.sum(h * n[:, None], axis=-1, keepdims=True)
        l = 2.0 * voh * h - n[:, None]
        nol = np.sum(l * n[:, None], axis=-1)
        wgt = np.maximum(nol, 0.0)
        l = l / np.linalg.norm(l, axis=-1, keepdims=True)
        vals = sample_level(source, l)
        out[s:s + chunk] = np.einsum("ns,nsc->nc", wgt, vals) / np.maximum(wgt.sum(axis=1, keepdims=True), 1e-12)
    return out.reshape(6, res, res, -1)


@dataclass
class MipCubemap:
    """Roughness-indexed prefiltered hierarchy; ``levels[0]`` is the optimizable base."""

    levels: list[np.ndarray]
    factor: int = 4
    samples: int = 1024
    _padded_cache: dict = field(default_factory=dict, repr=False)

    @property
    def l_max(self) -> int:
        return len(self.levels)

    @property
    def base(self) -> np.ndarray:
        return self.levels[0]

    @classmethod
    def from_base(cls, base: np.ndarray, l_max: int = 4, factor: int = 4, samples: int = 1024) -> "MipCubemap":
        base = np.asarray(base, dtype=np.float64)
        if base.ndim != 4 or base.shape[0] != 6 or base.shape[1] != base.shape[2]:
            raise ValueError(f"cubemap must be (6, H, H, C), got {base.shape}")
        if base.shape[1] % factor ** (l_max - 1):
            raise ValueError(f"base resolution {base.shape[1]} not divisible by {factor}**{l_max - 1}")
        env = cls([base], factor=factor, samples=samples)
        env.levels = prefilter_mips(base, l_max, factor=factor, samples=samples).levels
        return env

    @classmethod
    def constant(cls, value, res: int = 128, l_max: int = 4, factor: int = 4) -> "MipCubemap":
        value = np.asarray(value, dtype=np.float64)
        levels = [np.broadcast_to(value, (6, res // factor ** k, res // factor ** k, 3)).copy() for k in range(l_max)]
        return cls(levels, factor=factor)

    def refresh(self) -> None:
        """Re-prefilter every coarser level from the current base."""
        self.levels = prefilter_mips(self.base, self.l_max, factor=self.factor, samples=self.samples).levels

    def sample(self, d, level):
        return sample_trilinear(self, d, level)


def prefilter_mips(base: np.ndarray, l_max: int, factor: int = 4, samples: int = 1024) -> MipCubemap:
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    base = np.asarray(base, dtype=np.float64)
    if base.shape[1] % factor ** (l_max - 1):
        raise ValueError(f"base resolution {base.shape[1]} not divisible by {factor}**{l_max - 1}")
    levels = [base.copy()]
    source = base
    for k in range(1, l_max):
        res = base.shape[1] // factor ** k
        r_k = np.sqrt(k / (l_max - 1))
        levels.append(prefilter_level(source, res, r_k, samples))
        # next level samples from a box-reduced copy so that coarse lobes see averaged texels
        source = _box_down(source, factor)
    return MipCubemap(levels, factor=factor, samples=samples)


def _level_split(level, l_max):
    level = np.clip(np.asarray(level, dtype=np.float64), 0.0, l_max - 1)
    lo = np.minimum(np.floor(level).astype(np.int64), max(l_max - 2, 0))
    t = level - lo
    if l_max == 1:
        t = np.zeros_like(level)
    return lo, t


def sample_trilinear(env: MipCubemap, d, level, with_grad: bool = False):
    """Bilinear within the two bracketing levels, linear across them.

    With ``with_grad`` also returns d value / d direction (..., C, 3) and
    d value / d level (..., C).
    """
    d = np.asarray(d, dtype=np.float64)
    shape = d.shape[:-1]
    d = d.reshape(-1, 3)
    lo, t = _level_split(np.broadcast_to(level, shape).reshape(-1), env.l_max)
    channels = env.base.shape[-1]
    val = np.zeros((d.shape[0], channels))
    grad_dir = np.zeros((d.shape[0], channels, 3)) if with_grad else None
    grad_lvl = np.zeros((d.shape[0], channels)) if with_grad else None
    per_level = np.zeros((env.l_max, d.shape[0], channels))
    for k in np.unique(np.concatenate([lo, np.minimum(lo + 1, env.l_max - 1)])):
        tex = env.levels[k]
        res = tex.shape[1]
        taps = _bilinear_taps(res, d)
        flat = tex.reshape(-1, channels)[taps.index]  # (N, 4, C)
        v = np.einsum("nk,nkc->nc", taps.weight, flat)
        w = np.where(lo == k, 1.0 - t, 0.0) + np.where((lo + 1 == k) & (env.l_max > 1), t, 0.0)
        val += w[:, None] * v
        per_level[k] = v
        if with_grad:
            jac = _face_uv_jacobian(d, taps.face)  # (N, 2, 3)
            dval_du = np.einsum("nk,nkc->nc", taps.du, flat)
            dval_dv = np.einsum("nk,nkc->nc", taps.dv, flat)
            grad_dir += w[:, None, None] * (dval_du[:, :, None] * jac[:, None, 0, :] + dval_dv[:, :, None] * jac[:, None, 1, :])
    if with_grad and env.l_max > 1:
        rows = np.arange(d.shape[0])
        v_lo = per_level[lo, rows]
        v_hi = per_level[np.minimum(lo + 1, env.l_max - 1), rows]
        raw = np.broadcast_to(level, shape).reshape(-1)
        inside = (raw > 0) & (raw < env.l_max - 1)
        grad_lvl = (v_hi - v_lo) * inside[:, None]
    val = val.reshape(shape + (channels,))
    if with_grad:
        return val, grad_dir.reshape(shape + (channels, 3)), grad_lvl.reshape(shape + (channels,))
    return val


def sample_trilinear_backward(env: MipCubemap, d, level, grad_out) -> list[np.ndarray]:
    """Scatter ``grad_out`` (..., C) onto every level's texels with the forward weights."""
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(grad_out, dtype=np.float64).reshape(d.shape[0], env.levels[0].shape[-1])
    lo, t = _level_split(np.broadcast_to(level, d.shape[:1]).reshape(-1), env.l_max)
    grads = [np.zeros_like(tex) for tex in env.levels]
    for k in range(env.l_max):
        w = np.where(lo == k, 1.0 - t, 0.0) + np.where((lo + 1 == k) & (env.l_max > 1), t, 0.0)
        active = w > 0
        if not np.any(active):
            continue
        tex = env.levels[k]
        taps = _bilinear_taps(tex.shape[1], d[active])
        contrib = (w[active, None] * taps.weight)[..., None] * g[active, None, :]  # (N, 4, C)
        flat = grads[k].reshape(-1, tex.shape[-1])
        for c in range(tex.shape[-1]):
            flat[:, c] += np.bincount(taps.index.ravel(), weights=contrib[..., c].ravel(), minlength=flat.shape[0])
    return grads


def fold_to_base(env: MipCubemap, level_grads: list[np.ndarray]) -> np.ndarray:
    """Push per-level texel gradients onto the base by the adjoint of box reduction.

    Coarse levels are treated as block averages of the base, which is the
    linearization used between lazy prefilter refreshes.
    """
    out = level_grads[0].copy()
    for k in range(1, len(level_grads)):
        f = env.factor ** k
        up = np.repeat(np.repeat(level_grads[k], f, axis=1), f, axis=2) / (f * f)
        out += up
    return out


# --- IO -------------------------------------------------------------------------

def save_cubemap(env: MipCubemap | np.ndarray, path: str | Path) -> None:
    """Write base faces as raw float32 plus a manifest listing face order and size."""
    base = env.base if isinstance(env, MipCubemap) else np.asarray(env)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    res = base.shape[1]
    lines = [f"resolution {res}", f"channels {base.shape[-1]}"]
    for f, name in enumerate(FACE_NAMES):
        fname = f"face_{name}.f32"
        base[f].astype("<f4").tofile(root / fname)
        lines.append(f"{name} {fname}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_cubemap(path: str | Path, l_max: int = 4, samples: int = 1024) -> MipCubemap:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"missing cubemap manifest: {manifest}")
    entries = dict(line.split(None, 1) for line in manifest.read_text().splitlines() if line.strip())
    res = int(entries["resolution"])
    ch = int(entries.get("channels", 3))
    faces = []
    for name in FACE_NAMES:
        data = np.fromfile(root / entries[name].strip(), dtype="<f4")
        faces.append(data.reshape(res, res, ch))
    return MipCubemap.from_base(np.stack(faces).astype(np.float64), l_max=l_max, samples=samples)
