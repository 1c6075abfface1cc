"""Visual geometry priors: multi-view reflection score, RS-weighted photometric loss,
and confidence-weighted depth / normal prior losses against an external depth prior.

Loss functions return ``(value, gradients)`` so the training loop can chain them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import PosedView

log = logging.getLogger(__name__)

TAU_OCC = 0.15
MIN_VIEWS = 5
RS_FLOOR = 0.01
ANGULAR_WEIGHT = 0.5


def backproject(xy, depth, view: PosedView):
    """World points for pixels ``xy`` (..., 2) at ray distance ``depth``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise ValueError("backproject needs positive depth")
    rays = view.camera_rays(xy)
    return (depth[..., None] * rays - view.t) @ view.R


def backproject_map(depth, view: PosedView):
    """Point map (H, W, 3) for a full depth map; invalid pixels give NaN."""
    depth = np.asarray(depth, dtype=np.float64)
    rays = view.camera_rays()
    pts = (np.where(depth > 0, depth, np.nan)[..., None] * rays - view.t) @ view.R
    return pts


def bilinear(img, xy):
    """Bilinear lookup of an (H, W, ...) image at continuous pixel coordinates (edge clamped)."""
    h, w = img.shape[:2]
    x = np.clip(xy[..., 0], 0, w - 1)
    y = np.clip(xy[..., 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
    fx, fy = x - x0, y - y0
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x0 + 1]
            + (1 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])


def visibility_indicator(p, src: PosedView, depth_src, tau_occ: float = TAU_OCC):
    """1 where p projects inside ``src``, the depth there is valid, and it agrees with ||p - o||."""
    p = np.asarray(p, dtype=np.float64)
    xy, z = src.project(p)
    ok = (z > 0) & np.all(np.isfinite(xy), axis=-1)
    xy_safe = np.where(ok[..., None], xy, 0.0)
    ok &= src.in_bounds(xy_safe)
    px = np.clip(np.rint(xy_safe[..., 0]).astype(np.int64), 0, src.width - 1)
    py = np.clip(np.rint(xy_safe[..., 1]).astype(np.int64), 0, src.height - 1)
    d = np.asarray(depth_src)[py, px]
    ok &= np.isfinite(d) & (d > 0)
    dist = np.linalg.norm(p - src.center, axis=-1)
    ok &= np.abs(dist - np.where(ok, d, 0.0)) < tau_occ
    return ok.astype(np.int64)


@dataclass
class Frame:
    """An image with its pose and a (rendered or GT) depth map."""

    view: PosedView
    image: np.ndarray  # (H, W, 3) linear
    depth: np.ndarray  # (H, W), 0 where invalid


@dataclass
class RsMap:
    score: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool
    count: np.ndarray  # visible source views per pixel


def reflection_score(ref: Frame, sources: list[Frame], k_min: int = MIN_VIEWS, tau_occ: float = TAU_OCC) -> RsMap:
    """Mean L1 deviation of each reference pixel from its occlusion-checked reprojections."""
    h, w = ref.depth.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ref_ok = np.isfinite(ref.depth) & (ref.depth > 0)
    depth = np.where(ref_ok, ref.depth, 1.0)
    pts = backproject(np.stack([xs, ys], -1), depth, ref.view)
    total = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    for src in sources:
        vis = visibility_indicator(pts, src.view, src.depth, tau_occ).astype(bool) & ref_ok
        xy, _ = src.view.project(pts)
        xy = np.where(vis[..., None], xy, 0.0)
        dev = np.abs(bilinear(src.image, xy) - ref.image).sum(axis=-1)
        total += np.where(vis, dev, 0.0)
        count += vis
    valid = count >= k_min
    score = np.where(valid, total / np.maximum(count, 1), 0.0)
    return RsMap(score, valid, count)


def rs_weighted_photometric_loss(render, gt, rs: RsMap | None, eps: float = RS_FLOOR, mask=None,
                                 normalize: bool = False):
    """Mean over pixels of ||C - C_gt||_1 / max(RS, eps); pixels without a valid RS use weight 1.

    With ``normalize`` the valid-pixel weights are divided by their mean, so RS only redistributes
    weight among valid pixels instead of also rescaling them against invalid pixels and other losses.
    Returns (loss, d loss / d render).
    """
    diff = np.asarray(render) - np.asarray(gt)
    if rs is None:
        weight = np.ones(diff.shape[:2])
    else:
        inv = 1.0 / np.maximum(rs.score, eps)
        if normalize and rs.valid.any():
            inv = inv / inv[rs.valid].mean()
        weight = np.where(rs.valid, inv, 1.0)
    if mask is not None:
        weight = weight * mask
    n = diff.shape[0] * diff.shape[1]
    loss = float(np.sum(weight[..., None] * np.abs(diff)) / n)
    return loss, weight[..., None] * np.sign(diff) / n


def align_depth_least_squares(depth, prior, mask=None):
    """Closed-form (scale, shift) minimizing sum((scale * D + shift - prior)^2).

    Returns (scale, shift, mean squared residual, degenerate flag).
    """
    depth = np.asarray(depth, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    m = np.isfinite(depth) & np.isfinite(prior) if mask is None else np.asarray(mask, bool) & np.isfinite(depth) & np.isfinite(prior)
    d, p = depth[m], prior[m]
    if d.size == 0:
        raise ValueError("no valid pixels to align")
    a = np.stack([d, np.ones_like(d)], axis=1)
    ata = a.T @ a
    degenerate = d.size < 2 or np.ptp(d) <= 1e-12 * max(1.0, np.abs(d).max())
    if degenerate:
        scale, shift = 1.0, float(np.mean(p - d))
    else:
        scale, shift = np.linalg.solve(ata, a.T @ p)
    res = scale * d + shift - p
    return float(scale), float(shift), float(np.mean(res ** 2)), bool(degenerate)


def depth_to_normal(depth, view: PosedView):
    """Camera-space normals from the cross product of vertical and horizontal neighbour offsets.

    Oriented toward the camera. Returns (normals (H, W, 3), valid mask).
    """
    depth = np.asarray(depth, dtype=np.float64)
    rays = view.camera_rays()
    valid_d = np.isfinite(depth) & (depth > 0)
    pts = np.where(valid_d[..., None], depth[..., None] * rays, 0.0)
    h, w = depth.shape
    n = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    p_up, p_down = pts[:-2, 1:-1], pts[2:, 1:-1]
    p_left, p_right = pts[1:-1, :-2], pts[1:-1, 2:]
    cross = np.cross(p_up - p_down, p_right - p_left)
    norm = np.linalg.norm(cross, axis=-1)
    ok = (valid_d[:-2, 1:-1] & valid_d[2:, 1:-1] & valid_d[1:-1, :-2] & valid_d[1:-1, 2:] & valid_d[1:-1, 1:-1]
          & (norm > 1e-12))
    unit = cross / np.where(norm > 1e-12, norm, 1.0)[..., None]
    facing = np.sum(unit * rays[1:-1, 1:-1], axis=-1)
    unit = np.where((facing > 0)[..., None], -unit, unit)
    n[1:-1, 1:-1] = np.where(ok[..., None], unit, 0.0)
    mask[1:-1, 1:-1] = ok
    return n, mask


def normal_prior_loss(normals, prior, lam: float = ANGULAR_WEIGHT, mask=None, weight=None):
    """Mean over valid pixels of ||N - N_p||_1 + lam (1 - cos(N, N_p)), optionally per-pixel weighted.

    Returns (loss, d loss / d normals).
    """
    normals = np.asarray(normals, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    nn = np.linalg.norm(normals, axis=-1)
    pn = np.linalg.norm(prior, axis=-1)
    valid = (nn > 1e-12) & (pn > 1e-12)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    grad = np.zeros_like(normals)
    if not valid.any():
        return 0.0, grad
    wgt = np.ones(valid.shape) if weight is None else np.asarray(weight, dtype=np.float64)
    count = valid.sum()
    nu = normals / np.where(nn > 1e-12, nn, 1.0)[..., None]
    pu = prior / np.where(pn > 1e-12, pn, 1.0)[..., None]
    cos = np.clip(np.sum(nu * pu, axis=-1), -1.0, 1.0)
    per_px = np.abs(normals - prior).sum(axis=-1) + lam * (1.0 - cos)
    loss = float(np.sum(np.where(valid, wgt * per_px, 0.0)) / count)
    d_cos = -(pu - cos[..., None] * nu) / np.where(nn > 1e-12, nn, 1.0)[..., None]
    g = np.sign(normals - prior) + lam * d_cos
    grad = np.where(valid[..., None], (wgt / count)[..., None] * g, 0.0)
    return loss, grad


def confidence_weights(conf):
    """Min-max normalized log(1 + C); a constant map gives all ones."""
    c = np.log1p(np.maximum(np.asarray(conf, dtype=np.float64), 0.0))
    lo, hi = np.nanmin(c), np.nanmax(c)
    if hi - lo <= 1e-12:
        return np.ones_like(c)
    return (c - lo) / (hi - lo)


@dataclass
class PriorBundle:
    depth: np.ndarray  # D_VGGT, 0 where invalid
    conf: np.ndarray  # C_VGGT >= 0
    normal: np.ndarray  # camera-space normals derived from ``depth``
    normal_mask: np.ndarray
    weight: np.ndarray  # W_VGGT in [0, 1]

    @classmethod
    def from_depth_conf(cls, depth, conf, view: PosedView) -> "PriorBundle":
        n, m = depth_to_normal(depth, view)
        return cls(np.asarray(depth, dtype=np.float64), np.asarray(conf, dtype=np.float64), n, m,
                   confidence_weights(conf))

    def world_normals(self, view: PosedView):
        return self.normal @ view.R

    def save(self, root: str | Path, view_id: int) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for name, arr in (("depth_vggt", self.depth), ("conf_vggt", self.conf)):
            _write_f32(root / f"{name}_{view_id}.f32", arr)

    @classmethod
    def load(cls, root: str | Path, view_id: int, view: PosedView) -> "PriorBundle":
        root = Path(root)
        depth = _read_f32(root / f"depth_vggt_{view_id}.f32")
        conf = _read_f32(root / f"conf_vggt_{view_id}.f32")
        return cls.from_depth_conf(depth, conf, view)


def _write_f32(path: Path, arr) -> None:
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(f"{arr.shape[0]} {arr.shape[1]}\n".encode())
        fh.write(arr.tobytes(order="C"))


def _read_f32(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing prior map: {path}")
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    h, w = (int(v) for v in raw[:nl].split())
    return np.frombuffer(raw[nl + 1:], dtype="<f4").reshape(h, w).astype(np.float64)


def vggt_prior_loss(depth, normals, bundle: PriorBundle, view: PosedView, mask=None,
                    depth_weight: float = 1.0, normal_weight: float = 1.0, lam: float = ANGULAR_WEIGHT):
    """Confidence-weighted depth residual (after a global scale/shift fit) plus normal consistency.

    ``normals`` are world-space; the prior normals are rotated to world space here.
    The fitted scale/shift are treated as constants in the gradient.
    Returns (loss, d/d depth, d/d normals, terms dict).
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = (depth > 0) & (bundle.depth > 0)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    g_depth = np.zeros_like(depth)
    g_norm = np.zeros_like(np.asarray(normals, dtype=np.float64))
    terms = {"depth": 0.0, "normal": 0.0}
    if valid.sum() < 2:
        return 0.0, g_depth, g_norm, terms
    w = bundle.weight
    count = valid.sum()
    if depth_weight:
        scale, shift, _, _ = align_depth_least_squares(depth, bundle.depth, valid)
        res = scale * depth + shift - bundle.depth
        terms["depth"] = depth_weight * float(np.sum(np.where(valid, w * res ** 2, 0.0)) / count)
        g_depth = np.where(valid, depth_weight * w * 2.0 * res * scale / count, 0.0)
    if normal_weight:
        nmask = valid & bundle.normal_mask
        if nmask.any():
            loss_n, g_n = normal_prior_loss(normals, bundle.world_normals(view), lam, nmask, w)
            # rescale from the normal-valid count to the common pixel count
            k = nmask.sum() / count
            terms["normal"] = normal_weight * loss_n * k
            g_norm = normal_weight * g_n * k
    return terms["depth"] + terms["normal"], g_depth, g_norm, terms


def synthesize_prior_bundle(gt_depth, view: PosedView, sigma_d: float, rng: np.random.Generator,
                            scale_range=(0.5, 2.0), shift_range=(-0.5, 0.5),
                            correlation_px: float = 2.0) -> tuple[PriorBundle, float, float]:
    """Fabricate a relative depth prior from ground truth.

    D_prior = s * D_gt + t + noise with random global (s, t). The noise is
    spatially correlated with a smoothly varying amplitude around ``sigma_d``;
    confidence is high where that amplitude is low. Normals come from the
    prior after undoing (s, t), since a shift along the rays bends surfaces.
    Returns (bundle, s, t).
    """
    from scipy.ndimage import gaussian_filter

    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    valid = gt_depth > 0
    s = float(rng.uniform(*scale_range))
    t = float(rng.uniform(*shift_range))
    h, w = gt_depth.shape
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    level = 1.0 + 0.5 * np.sin(2 * np.pi * xs + phase[0]) * np.cos(2 * np.pi * ys + phase[1])
    white = rng.normal(size=gt_depth.shape)
    if correlation_px > 0:
        white = gaussian_filter(white, correlation_px)
        white /= max(white.std(), 1e-12)
    noise = white * sigma_d * level
    metric = np.where(valid, gt_depth + noise, 0.0)
    prior = np.where(valid, s * metric + t, 0.0)
    conf = np.where(valid, 1.0 / (0.05 + level), 0.0)
    normal, nmask = depth_to_normal(metric, view)
    bundle = PriorBundle(prior, conf, normal, nmask & valid, confidence_weights(conf))
    return bundle, s, t
