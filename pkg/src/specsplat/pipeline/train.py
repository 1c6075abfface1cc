"""Two-stage optimization: direct-only shading with geometry priors, then IndiASG indirect light."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..envmap import MipCubemap, fold_to_base, load_cubemap, save_cubemap
from ..geometry import (TriMesh, TsdfVolume, build_bvh, chamfer_distance, marching_cubes, sample_surface,
                        trace_visibility, tsdf_integrate)
from ..indiasg import IndiAsg, PredictorNet
from ..pbr import BrdfLut, build_brdf_lut
from ..priors import (Frame, PriorBundle, RsMap, reflection_score, rs_weighted_photometric_loss,
                      synthesize_prior_bundle, vggt_prior_loss)
from ..splat import DensifyConfig, GaussianCloud, densify_and_prune, rasterize, rasterize_backward
from .config import SceneConfig
from .scenes import Dataset, load_dataset
from .shading import gbuffer_attrs, normal_mae, psnr, shade, shade_backward, ssim

log = logging.getLogger(__name__)

CLOUD_PARAMS = GaussianCloud.PARAMS
REPORT_KEYS = ("normal_mae_deg", "chamfer", "chamfer_x100", "psnr", "num_gaussians")


class NumericalAbort(RuntimeError):
    """Non-finite loss or parameters (CLI exit code 3)."""


class Adam:
    """Per-key Adam moments; learning rates are supplied per step."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        m, v, t = self.state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        if m.shape != param.shape:
            m, v, t = np.zeros_like(param), np.zeros_like(param), 0
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)
        self.state[key] = (m, v, t)

    def reset(self, prefix: str = "") -> None:
        for k in [k for k in self.state if k.startswith(prefix)]:
            del self.state[k]


@dataclass
class TrainState:
    iteration: int
    stage: int
    cloud: GaussianCloud
    env: MipCubemap
    net: IndiAsg | None = None
    mesh: TriMesh | None = None
    bvh: object = None
    mesh_iter: int = -1
    opt: Adam = field(default_factory=Adam)
    rs: list = field(default_factory=list)
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    densified_at: list = field(default_factory=list)
    mesh_refreshes: list = field(default_factory=list)
    history: list = field(default_factory=list)


@dataclass
class Trainer:
    cfg: SceneConfig
    data: Dataset
    lut: BrdfLut
    bundles: list
    rng: np.random.Generator

    # --- construction ----------------------------------------------------------------------
    @classmethod
    def create(cls, cfg: SceneConfig, data: Dataset | None = None) -> "Trainer":
        data = load_dataset(cfg) if data is None else data
        rng = np.random.default_rng(cfg.seed)
        lut = build_brdf_lut(cfg.lut_samples, cfg.lut_res)
        bundles = []
        prior_rng = np.random.default_rng(cfg.seed + 7919)
        for i, view in enumerate(data.views):
            if cfg.priors_dir:
                bundles.append(PriorBundle.load(cfg.priors_dir, i, view))
            else:
                b, _, _ = synthesize_prior_bundle(data.depths[i], view, cfg.synth_priors_sigma, prior_rng)
                bundles.append(b)
        return cls(cfg, data, lut, bundles, rng)

    def init_state(self) -> TrainState:
        cfg = self.cfg
        cloud = self._init_cloud()
        if cfg.env_path:
            env = load_cubemap(cfg.env_path, l_max=cfg.env_levels, samples=cfg.prefilter_samples)
        else:
            env = MipCubemap.constant(np.full(3, cfg.env_init), res=cfg.env_res, l_max=cfg.env_levels)
            env.samples = cfg.prefilter_samples
        return TrainState(0, 1, cloud, env)

    def _init_cloud(self) -> GaussianCloud:
        cfg = self.cfg
        rng = self.rng
        n = cfg.init_count
        lo, hi = np.asarray(cfg.bbox_lo), np.asarray(cfg.bbox_hi)
        extent = float(np.max(hi - lo))
        if cfg.init_mode == "gt_surface" and self.data.gt_mesh is not None:
            mesh = self.data.gt_mesh
            pts = sample_surface(mesh, n, rng) + rng.normal(size=(n, 3)) * cfg.init_noise * extent
            spacing = np.sqrt(mesh.areas().sum() / n)
        else:
            v = rng.normal(size=(n, 3))
            pts = 0.5 * (lo + hi) + (0.25 * extent) * v / np.linalg.norm(v, axis=1, keepdims=True) * rng.random((n, 1)) ** (1 / 3)
            spacing = 0.25 * extent / n ** (1 / 3)
        scales = np.full((n, 3), 0.6 * spacing)
        scales[:, 2] *= 0.3
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        return GaussianCloud.create(pts, scales, quats, opacity=0.7, c_diff=0.2, f0=0.3, roughness=0.4)

    # --- rendering -----------------------------------------------------------------------------
    def rendered_depths(self, state: TrainState):
        out = []
        for view in self.data.views:
            gb = rasterize(state.cloud, view)
            out.append(np.where(gb.alpha > 0.5, gb.expected_depth(), 0.0))
        return out

    def refresh_rs(self, state: TrainState) -> None:
        depths = self.rendered_depths(state)
        frames = [Frame(v, img, d) for v, img, d in zip(self.data.views, self.data.images, depths)]
        state.rs = [reflection_score(frames[i], frames[:i] + frames[i + 1:], self.cfg.rs_k, self.cfg.tau_occ)
                    for i in range(len(frames))]

    def extract_mesh(self, cloud: GaussianCloud, resolution: int | None = None) -> TriMesh:
        cfg = self.cfg
        vol = TsdfVolume.create(resolution or cfg.tsdf_res, cfg.bbox_lo, cfg.bbox_hi, cfg.tsdf_trunc_voxels)
        for view in self.data.views:
            gb = rasterize(cloud, view)
            vol = tsdf_integrate(vol, gb.expected_depth(), view, gb.alpha > 0.5)
        return marching_cubes(vol)

    def refresh_mesh(self, state: TrainState) -> None:
        state.mesh = self.extract_mesh(state.cloud)
        state.bvh = build_bvh(state.mesh) if len(state.mesh) else None
        state.mesh_iter = state.iteration
        state.mesh_refreshes.append(state.iteration)

    def lr_means(self, it: int) -> float:
        cfg = self.cfg
        total = max(cfg.stage1_iters + cfg.stage2_iters, 1)
        return cfg.lr_means * (cfg.lr_means_final / cfg.lr_means) ** min(it / total, 1.0)

    # --- one step ---------------------------------------------------------------------------------
    def forward(self, state: TrainState, vi: int, stage: int | None = None):
        """Render + shade view ``vi`` for the given stage. Returns (image, context dict)."""
        stage = state.stage if stage is None else stage
        view = self.data.views[vi]
        gb, ctx = rasterize(state.cloud, view, return_context=True)
        at = gbuffer_attrs(gb, view)
        w_vis = l_indi = None
        extra = {}
        if stage == 2 and not self.cfg.ablated("no-indiasg") and state.bvh is not None and at.index.size:
            w_vis = np.zeros(at.index.size)
            wr = 2.0 * np.clip(np.sum(at.normal * at.wo, axis=1), 1e-4, 1.0)[:, None] * at.normal - at.wo
            w_vis = trace_visibility(state.bvh, at.points, wr, at.normal, self.cfg.vis_eps)
            hit = w_vis > 0
            if hit.any():
                # direct-only pass for the residual input; it is a stop-gradient quantity
                _, direct = shade(at, state.env, self.lut, use_mip=not self.cfg.ablated("no-mip"))
                gt = self.data.images[vi].reshape(-1, 3)[at.index]
                c_res = np.maximum(gt - (1 - direct.fres) * at.c_diff - direct.m_spec * direct.l_direct, 0.0)
                l_indi = np.zeros((at.index.size, 3))
                l_indi[hit] = state.net.forward(at.points[hit], at.normal[hit], wr[hit], at.rough[hit], c_res[hit])
                extra["indi_hit"] = hit
        img, cache = shade(at, state.env, self.lut, w_vis, l_indi, use_mip=not self.cfg.ablated("no-mip"))
        return img, dict(gb=gb, ctx=ctx, at=at, cache=cache, view=view, **extra)

    def step(self, state: TrainState, vi: int) -> dict:
        cfg = self.cfg
        it = state.iteration
        gt = self.data.images[vi]
        img, fx = self.forward(state, vi)
        terms = {}
        rs = None
        if state.stage == 1 and not cfg.ablated("no-rs") and state.rs:
            rs = state.rs[vi]
        l1, g_l1 = rs_weighted_photometric_loss(img, gt, rs, cfg.rs_eps, normalize=cfg.rs_normalize)
        s_val, g_s = ssim(img, gt, with_grad=True)
        terms["l1"] = l1
        terms["dssim"] = 1.0 - s_val
        g_img = cfg.w_photo * ((1 - cfg.w_ssim) * g_l1 - cfg.w_ssim * g_s)
        loss = cfg.w_photo * ((1 - cfg.w_ssim) * l1 + cfg.w_ssim * (1 - s_val))
        g_n = g_d = None
        if state.stage == 1 and not cfg.ablated("no-gp") and cfg.w_prior > 0:
            dw = 0.0 if cfg.ablated("no-gp-d") else cfg.w_prior
            if cfg.depth_decay and cfg.stage1_iters > 0:
                dw *= max(0.0, 1.0 - it / cfg.stage1_iters)
            nw = 0.0 if cfg.ablated("no-gp-n") else cfg.w_prior
            gb = fx["gb"]
            prior_loss, g_d, g_n, pt = vggt_prior_loss(
                gb.expected_depth(), gb.normal, self.bundles[vi], fx["view"], mask=gb.alpha > 0.5,
                depth_weight=dw, normal_weight=nw, lam=cfg.prior_lambda)
            terms["prior_depth"] = pt["depth"]
            terms["prior_normal"] = pt["normal"]
            loss += prior_loss
        if not np.isfinite(loss):
            raise NumericalAbort(f"non-finite loss at iteration {it} (view {vi}): {terms}")
        g_buf, g_alpha, env_grads, g_li = shade_backward(fx["cache"], state.env, g_img, g_n, g_d)
        grads = rasterize_backward(state.cloud, fx["ctx"], g_buf, g_alpha)
        # optimizer
        for k in CLOUD_PARAMS:
            lr = self.lr_means(it) if k == "means" else cfg.lr_attr
            state.opt.step(f"cloud.{k}", getattr(state.cloud, k), grads[k], lr)
        np.clip(state.cloud.c_diff, 0.0, 1.0, out=state.cloud.c_diff)
        np.clip(state.cloud.f0, 0.0, 1.0, out=state.cloud.f0)
        g_env = fold_to_base(state.env, env_grads)
        state.opt.step("env", state.env.levels[0], g_env, cfg.lr_env)
        np.maximum(state.env.levels[0], 0.0, out=state.env.levels[0])
        bad = [k for k in CLOUD_PARAMS if not np.isfinite(getattr(state.cloud, k)).all()]
        if bad or not np.isfinite(state.env.levels[0]).all():
            raise NumericalAbort(f"non-finite parameters {bad or ['env']} after iteration {it}")
        if "indi_hit" in fx:
            hit = fx["indi_hit"]
            net_grads = state.net.backward(g_li[hit])
            for j, (p, g) in enumerate(zip(state.net.net.params, net_grads)):
                state.opt.step(f"net.{j}", p, g, cfg.lr_net)
        # densification statistics (stage 1 only)
        if state.stage == 1 and state.grad_accum is not None:
            g2 = fx["ctx"].mean2d_grad
            if g2 is not None:
                norm = np.linalg.norm(g2, axis=1)
                seen = fx["ctx"].proj.valid & (norm > 0)
                state.grad_accum[seen] += norm[seen]
                state.grad_count[seen] += 1
        terms["total"] = float(loss)
        return terms

    # --- schedule -------------------------------------------------------------------------------
    def train(self, state: TrainState, callback=None) -> TrainState:
        cfg = self.cfg
        n_views = len(self.data.views)
        total = cfg.stage1_iters + cfg.stage2_iters
        perm: list[int] = []
        state.grad_accum = np.zeros(len(state.cloud))
        state.grad_count = np.zeros(len(state.cloud))
        while state.iteration < total:
            it = state.iteration
            if it == cfg.stage1_iters and state.stage == 1:
                self.enter_stage2(state)
            if state.stage == 1:
                if not cfg.ablated("no-rs") and it % cfg.rs_refresh == 0:
                    self.refresh_rs(state)
                if it == cfg.densify_at and cfg.densify_at < cfg.stage1_iters and it > 0:
                    self.densify(state)
            elif self._needs_mesh() and (state.mesh is None or it - state.mesh_iter >= cfg.mesh_refresh):
                self.refresh_mesh(state)
            if not perm:
                perm = list(self.rng.permutation(n_views))
            terms = self.step(state, int(perm.pop()))
            state.history.append(terms)
            state.iteration += 1
            if cfg.mip_refresh and state.iteration % cfg.mip_refresh == 0 and not cfg.ablated("no-mip"):
                state.env.refresh()
            if cfg.log_every and state.iteration % cfg.log_every == 0:
                recent = state.history[-cfg.log_every:]
                log.info("it %d stage %d loss %.5f (%d gaussians)", state.iteration, state.stage,
                         np.mean([h["total"] for h in recent]), len(state.cloud))
            if callback is not None:
                callback(state, terms)
        return state

    def _needs_mesh(self) -> bool:
        return not self.cfg.ablated("no-indiasg")

    def densify(self, state: TrainState) -> None:
        cfg = self.cfg
        dcfg = DensifyConfig(grad_threshold=cfg.densify_grad, prune_opacity=cfg.prune_opacity,
                             scene_extent=float(np.max(np.asarray(cfg.bbox_hi) - np.asarray(cfg.bbox_lo))))
        mean_grad = state.grad_accum / np.maximum(state.grad_count, 1)
        log.info("densify stats: mean 2D grad percentiles 50/90/99 = %s",
                 np.percentile(mean_grad, [50, 90, 99]) if mean_grad.size else [])
        state.cloud = densify_and_prune(state.cloud, state.grad_accum, state.grad_count, dcfg, self.rng)
        state.opt.reset("cloud.")
        state.grad_accum = np.zeros(len(state.cloud))
        state.grad_count = np.zeros(len(state.cloud))
        state.densified_at.append(state.iteration)

    def enter_stage2(self, state: TrainState) -> None:
        cfg = self.cfg
        state.stage = 2
        state.grad_accum = None
        if not cfg.ablated("no-indiasg"):
            state.net = IndiAsg(seed=cfg.seed + 1, hidden=cfg.net_hidden, depth=cfg.net_depth)
            if cfg.indiasg_ckpt and Path(cfg.indiasg_ckpt).exists():
                state.net.net = PredictorNet.load(cfg.indiasg_ckpt)
            self.refresh_mesh(state)

    # --- evaluation ------------------------------------------------------------------------------
    def evaluate(self, state: TrainState) -> dict:
        cfg = self.cfg
        maes, psnrs = [], []
        for vi, view in enumerate(self.data.views):
            img, fx = self.forward(state, vi)
            gb = fx["gb"]
            mask = self.data.masks[vi] & (gb.alpha > 0.5)
            if mask.any():
                maes.append((normal_mae(gb.normal, self.data.normals[vi], mask), int(mask.sum())))
            psnrs.append(psnr(img, self.data.images[vi]))
        mae = float(sum(m * c for m, c in maes) / max(sum(c for _, c in maes), 1)) if maes else float("nan")
        mesh = self.extract_mesh(state.cloud)
        cd = float("nan")
        if self.data.gt_mesh is not None and len(mesh):
            rng = np.random.default_rng(cfg.seed + 104729)
            a = sample_surface(mesh, cfg.chamfer_samples, rng)
            b = sample_surface(self.data.gt_mesh, cfg.chamfer_samples, rng)
            cd = chamfer_distance(a, b)
        return {"normal_mae_deg": mae, "chamfer": cd, "chamfer_x100": cd * 100, "psnr": float(np.mean(psnrs)),
                "num_gaussians": len(state.cloud), "mesh": mesh}


def _window_means(history, key="total", window=500):
    vals = [h[key] for h in history]
    return [float(np.mean(vals[i:i + window])) for i in range(0, len(vals), window)]


def save_checkpoint(state: TrainState, cfg: SceneConfig, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    state.cloud.save(root / "cloud.txt")
    save_cubemap(state.env, root / "env")
    if state.net is not None:
        state.net.net.save(root / "indiasg.bin")
    cfg.save(root / "config.cfg")
    (root / "state.json").write_text(json.dumps({"iteration": state.iteration, "stage": state.stage}))
    return root


def run(cfg: SceneConfig, data: Dataset | None = None, write: bool = True) -> dict:
    """Stage 1 then stage 2; writes images, mesh, env map, checkpoint and ``report.json``."""
    t0 = time.perf_counter()
    trainer = Trainer.create(cfg, data)
    state = trainer.init_state()
    out = Path(cfg.out_dir)
    try:
        trainer.train(state)
    except NumericalAbort:
        if write:
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, cfg, out / "checkpoint_abort")
            (out / "diagnostics.json").write_text(json.dumps({"iteration": state.iteration,
                                                              "last_terms": state.history[-5:]}, indent=1))
        raise
    metrics = trainer.evaluate(state)
    mesh = metrics.pop("mesh")
    report = {
        "scene": Path(cfg.scene_dir).name,
        "seed": cfg.seed,
        "ablate": list(cfg.ablate),
        "stage1_iters": cfg.stage1_iters,
        "stage2_iters": cfg.stage2_iters,
        **metrics,
        "final_loss": float(np.mean([h["total"] for h in state.history[-100:]])) if state.history else float("nan"),
        "loss_windows": _window_means(state.history),
        "densified_at": state.densified_at,
        "mesh_refreshes": state.mesh_refreshes,
    }
    if write:
        from .io import save_png

        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(state, cfg, out / "checkpoint")
        mesh.save_obj(cfg.mesh_out or out / "mesh.obj")
        if cfg.env_out:
            save_cubemap(state.env, cfg.env_out)
        if cfg.indiasg_ckpt and state.net is not None:
            state.net.net.save(cfg.indiasg_ckpt)
        for vi in range(len(trainer.data.views)):
            img, _ = trainer.forward(state, vi)
            save_png(out / f"render_{vi:03d}.png", img)
        with open(out / "loss_log.csv", "w") as fh:
            keys = sorted({k for h in state.history for k in h})
            fh.write("iteration," + ",".join(keys) + "\n")
            for i, h in enumerate(state.history):
                fh.write(f"{i}," + ",".join(repr(h.get(k, 0.0)) for k in keys) + "\n")
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        (out / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - t0}))
        report["checkpoint"] = str(ckpt)
    return report
