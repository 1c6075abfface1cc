"""Synthetic scene presets rendered by the analytic oracle, and the on-disk dataset."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import oracle
from ..camera import PosedView, look_at, orbit_views
from ..geometry import TriMesh, box_mesh
from ..pbr import build_brdf_lut
from .config import SceneConfig, load_config
from .io import load_png, read_cameras, read_raw, save_png, write_cameras, write_raw

log = logging.getLogger(__name__)

PRESETS = ("toy_sphere", "two_spheres_interreflect", "box_interior")


def uv_sphere(center, radius: float, n_lat: int = 48, n_lon: int = 96) -> TriMesh:
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    verts = np.concatenate([[[0, 0, 1.0]], ring, [[0, 0, -1.0]]]) * radius + np.asarray(center, dtype=np.float64)
    faces = []
    last = len(verts) - 1
    for j in range(n_lon):
        faces.append([0, 1 + j, 1 + (j + 1) % n_lon])
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a = 1 + i * n_lon + j
            b = 1 + i * n_lon + (j + 1) % n_lon
            c, d = a + n_lon, b + n_lon
            faces += [[a, c, d], [a, d, b]]
    base = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append([base + j, last, base + (j + 1) % n_lon])
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def _merge(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def _sky(seed: int = 3) -> oracle.AnalyticEnv:
    """Smooth SH-band-2 sky plus one sharp sun lobe."""
    env = oracle.random_sh2_env(np.random.default_rng(seed), dc=0.45, band1=0.12, band2=0.06)
    env.lobes = [(np.array([0.4, -0.3, 0.85]), 30.0, np.array([1.6, 1.5, 1.3]))]
    return env


@dataclass
class Preset:
    scene: oracle.AnalyticScene
    views: list[PosedView]
    gt_mesh: TriMesh
    overrides: dict


def build_preset(name: str, resolution: int = 128, n_views: int = 16) -> Preset:
    glossy = oracle.Material(np.array([0.18, 0.12, 0.08]), np.array([0.6, 0.55, 0.5]), 0.2)
    if name == "toy_sphere":
        scene = oracle.AnalyticScene([oracle.Sphere(np.zeros(3), 0.5, glossy)], _sky())
        views = orbit_views(n_views, 2.2, resolution, resolution, fov_deg=40.0, elevations=(-25.0, 35.0))
        mesh = uv_sphere(np.zeros(3), 0.5)
        over = dict(stage1_iters=3000, densify_at=2400, stage2_iters=3000)
    elif name == "two_spheres_interreflect":
        mirror = oracle.Material(np.array([0.05, 0.05, 0.05]), np.array([0.9, 0.9, 0.9]), 0.1)
        red = oracle.Material(np.array([0.55, 0.12, 0.08]), np.array([0.04, 0.04, 0.04]), 0.5)
        scene = oracle.AnalyticScene([oracle.Sphere(np.array([-0.38, 0, 0]), 0.33, mirror),
                                      oracle.Sphere(np.array([0.38, 0, 0]), 0.33, red)], _sky())
        views = orbit_views(n_views, 2.4, resolution, resolution, fov_deg=40.0, elevations=(-20.0, 35.0))
        mesh = _merge([uv_sphere(s.center, s.radius) for s in scene.primitives])
        over = dict(stage1_iters=3000, densify_at=2400, stage2_iters=3000)
    elif name == "box_interior":
        wall = oracle.Material(np.array([0.5, 0.45, 0.4]), np.array([0.04, 0.04, 0.04]), 0.6)
        lo, hi = np.full(3, -1.2), np.full(3, 1.2)
        scene = oracle.AnalyticScene([oracle.Box(lo, hi, wall), oracle.Sphere(np.zeros(3), 0.4, glossy)], _sky())
        views = orbit_views(n_views, 1.0, resolution, resolution, fov_deg=70.0, elevations=(-15.0, 25.0))
        walls = box_mesh(lo, hi)
        mesh = _merge([TriMesh(walls.vertices, walls.faces[:, ::-1]), uv_sphere(np.zeros(3), 0.4)])
        over = dict(stage1_iters=3000, densify_at=2400, stage2_iters=3000,
                    bbox_lo=(-1.3, -1.3, -1.3), bbox_hi=(1.3, 1.3, 1.3), init_mode="gt_surface")
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")
    return Preset(scene, views, mesh, over)


def make_scene(name: str, out_root: str | Path, resolution: int = 128, n_views: int = 16,
               samples: int = 512, seed: int = 0) -> Path:
    """Render a preset with the oracle and write the dataset plus ``<name>.cfg``; returns the cfg path."""
    out_root = Path(out_root)
    scene_dir = out_root / name
    scene_dir.mkdir(parents=True, exist_ok=True)
    preset = build_preset(name, resolution, n_views)
    lut = build_brdf_lut(1024, 64)
    write_cameras(scene_dir / "cameras.txt", preset.views)
    for i, view in enumerate(preset.views):
        image, depth, normals, _ = oracle.render_analytic(preset.scene, view, lut, samples=samples, seed=seed * 1000 + i)
        save_png(scene_dir / f"rgb_{i:03d}.png", image)
        write_raw(scene_dir / f"depth_{i:03d}.f32", depth)
        write_raw(scene_dir / f"normal_{i:03d}.f32", normals)
        log.info("rendered view %d/%d", i + 1, len(preset.views))
    preset.gt_mesh.save_obj(scene_dir / "gt_mesh.obj")
    cfg = SceneConfig(scene_dir=name, gt_mesh=f"{name}/gt_mesh.obj", out_dir=f"runs/{name}", **preset.overrides)
    cfg_path = out_root / f"{name}.cfg"
    text = cfg.dumps()
    cfg_path.write_text(f"# preset {name}: {len(preset.views)} views at {resolution}x{resolution}\n" + text)
    return cfg_path


@dataclass
class Dataset:
    views: list[PosedView]
    images: list[np.ndarray]
    depths: list[np.ndarray]  # GT range depth, 0 = background
    normals: list[np.ndarray]  # GT world normals
    gt_mesh: TriMesh | None

    def __len__(self) -> int:
        return len(self.views)

    @property
    def masks(self) -> list[np.ndarray]:
        return [d > 0 for d in self.depths]


def load_dataset(cfg: SceneConfig) -> Dataset:
    root = Path(cfg.scene_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory not found: {root}")
    views = read_cameras(root / "cameras.txt")
    images = [load_png(root / f"rgb_{i:03d}.png") for i in range(len(views))]
    depths, normals = [], []
    for i in range(len(views)):
        dp, npth = root / f"depth_{i:03d}.f32", root / f"normal_{i:03d}.f32"
        depths.append(read_raw(dp) if dp.exists() else np.zeros(images[i].shape[:2]))
        normals.append(read_raw(npth) if npth.exists() else np.zeros(images[i].shape))
    mesh = None
    if cfg.gt_mesh:
        if not Path(cfg.gt_mesh).exists():
            raise FileNotFoundError(f"GT mesh not found: {cfg.gt_mesh}")
        mesh = TriMesh.load_obj(cfg.gt_mesh)
    return Dataset(views, images, depths, normals, mesh)


def ensure_scene(name: str, root: str | Path, **kw) -> Path:
    """Return the preset cfg under ``root``, rendering it first if absent."""
    cfg_path = Path(root) / f"{name}.cfg"
    if not cfg_path.exists() or not (Path(root) / name / "cameras.txt").exists():
        make_scene(name, root, **kw)
    load_config(cfg_path)
    return cfg_path
