"""Flat ``key = value`` scene/training configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

ABLATIONS = ("no-rs", "no-gp", "no-gp-d", "no-gp-n", "no-indiasg", "no-mip")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


@dataclass
class SceneConfig:
    # data
    scene_dir: str = ""
    gt_mesh: str = ""
    env_path: str = ""
    priors_dir: str = ""
    synth_priors_sigma: float = 0.01
    out_dir: str = "out"
    env_out: str = ""
    mesh_out: str = ""
    indiasg_ckpt: str = ""
    # schedule
    stage1_iters: int = 10_000
    densify_at: int = 8_000
    stage2_iters: int = 20_000
    rs_refresh: int = 500
    mesh_refresh: int = 1_000
    mip_refresh: int = 32
    seed: int = 0
    ablate: tuple = ()
    # loss weights
    w_photo: float = 1.0
    w_ssim: float = 0.2
    w_prior: float = 0.1
    prior_lambda: float = 0.5
    depth_decay: bool = True
    # optimizer
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_attr: float = 2.5e-3
    lr_env: float = 1e-2
    lr_net: float = 1e-3
    # reflection score
    rs_k: int = 5
    tau_occ: float = 0.15
    rs_eps: float = 0.01
    rs_normalize: bool = True
    # geometry
    tsdf_res: int = 64
    tsdf_trunc_voxels: float = 4.0
    bbox_lo: tuple = (-1.0, -1.0, -1.0)
    bbox_hi: tuple = (1.0, 1.0, 1.0)
    vis_eps: float = 0.06
    chamfer_samples: int = 100_000
    # environment / materials
    env_res: int = 128
    env_levels: int = 4
    env_init: float = 0.5
    prefilter_samples: int = 128
    lut_samples: int = 1024
    lut_res: int = 64
    # Gaussians
    init_count: int = 2_000
    init_noise: float = 0.01
    init_mode: str = "gt_surface"
    densify_grad: float = 2e-4
    prune_opacity: float = 0.005
    # predictor
    net_hidden: int = 128
    net_depth: int = 3
    log_every: int = 100

    def ablated(self, flag: str) -> bool:
        return flag in self.ablate

    def validate(self) -> "SceneConfig":
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation(s) {bad}; choose from {ABLATIONS}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("stage lengths must be non-negative")
        if self.env_levels < 1 or self.env_res % (4 ** (self.env_levels - 1)):
            raise ConfigError("env_res must be divisible by 4**(env_levels-1)")
        if self.init_mode not in ("gt_surface", "random_ball"):
            raise ConfigError(f"init_mode must be gt_surface or random_ball, got {self.init_mode!r}")
        if len(self.bbox_lo) != 3 or len(self.bbox_hi) != 3:
            raise ConfigError("bbox_lo/bbox_hi need three values")
        return self

    def replace(self, **kw) -> "SceneConfig":
        return dataclasses.replace(self, **kw).validate()

    # --- text form ------------------------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v) if f.name == "ablate" else " ".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


_FIELDS = {f.name: f for f in dataclasses.fields(SceneConfig)}
_PATH_KEYS = ("scene_dir", "gt_mesh", "env_path", "priors_dir", "out_dir", "env_out", "mesh_out", "indiasg_ckpt")


def _coerce(name: str, raw: str):
    default = getattr(SceneConfig(), name)
    try:
        if name == "ablate":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base_dir: str | Path | None = None, **overrides) -> SceneConfig:
    """Parse ``key = value`` lines ('#' comments). Relative paths resolve against ``base_dir``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    if base_dir is not None:
        for key in _PATH_KEYS:
            v = values.get(key, "")
            if v and not Path(v).is_absolute():
                values[key] = str(Path(base_dir) / v)
    for key, v in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        if v is not None:
            values[key] = v
    return SceneConfig(**values).validate()


def load_config(path: str | Path, **overrides) -> SceneConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent, **overrides)
