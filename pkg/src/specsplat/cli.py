"""``specsplat`` command line: run, render, metrics, make-scene, oracle."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parse_synth(value: str) -> float:
    key, _, v = value.partition("=")
    if not v:
        v = key
    elif key.strip() not in ("σ_d", "sigma_d", "s"):
        raise argparse.ArgumentTypeError(f"expected sigma_d=<value>, got {value!r}")
    return float(v)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="train on a scene config and write a report")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--ablate", action="append", default=[], help="no-rs, no-gp, no-gp-d, no-gp-n, no-indiasg, no-mip")
    r.add_argument("--env", dest="env_path")
    r.add_argument("--env-out")
    r.add_argument("--mesh-out")
    r.add_argument("--tsdf-res", type=int)
    r.add_argument("--indiasg-ckpt")
    r.add_argument("--priors", dest="priors_dir")
    r.add_argument("--synth-priors", type=_parse_synth, metavar="sigma_d=<v>")
    r.add_argument("--stage1-iters", type=int)
    r.add_argument("--stage2-iters", type=int)
    r.add_argument("--densify-at", type=int)
    r.add_argument("--out", dest="out_dir")

    rd = sub.add_parser("render", help="render one training view from a checkpoint")
    rd.add_argument("checkpoint")
    rd.add_argument("--view", type=int, required=True)
    rd.add_argument("--out")

    m = sub.add_parser("metrics", help="normal MAE and Chamfer distance of a checkpoint")
    m.add_argument("checkpoint")
    m.add_argument("--gt", help="ground-truth mesh (.obj)")
    m.add_argument("--tsdf-res", type=int)

    ms = sub.add_parser("make-scene", help="render a synthetic preset with the oracle")
    ms.add_argument("preset")
    ms.add_argument("--out", default="scenes")
    ms.add_argument("--resolution", type=int, default=128)
    ms.add_argument("--views", type=int, default=16)
    ms.add_argument("--samples", type=int, default=512)

    o = sub.add_parser("oracle", help="run a named oracle comparison")
    o.add_argument("check", help="check name, or 'all' / 'list'")
    o.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args) -> int:
    from .pipeline.config import load_config
    from .pipeline.train import run

    ablate = tuple(a.strip() for item in args.ablate for a in item.split(",") if a.strip())
    over = dict(seed=args.seed, env_path=args.env_path, env_out=args.env_out, mesh_out=args.mesh_out,
                tsdf_res=args.tsdf_res, indiasg_ckpt=args.indiasg_ckpt, priors_dir=args.priors_dir,
                synth_priors_sigma=args.synth_priors, stage1_iters=args.stage1_iters,
                stage2_iters=args.stage2_iters, densify_at=args.densify_at, out_dir=args.out_dir,
                ablate=ablate or None)
    cfg = load_config(args.config, **over)
    report = run(cfg)
    print(json.dumps({k: report[k] for k in ("normal_mae_deg", "chamfer", "chamfer_x100", "psnr",
                                             "num_gaussians")}, indent=1))
    print(f"report: {Path(cfg.out_dir) / 'report.json'}")
    return EXIT_OK


def _load_checkpoint(path):
    from .envmap import load_cubemap
    from .indiasg import IndiAsg, PredictorNet
    from .pipeline.config import load_config
    from .pipeline.train import Trainer, TrainState
    from .splat import GaussianCloud

    root = Path(path)
    if not (root / "config.cfg").exists():
        raise FileNotFoundError(f"not a checkpoint directory: {root}")
    cfg = load_config(root / "config.cfg")
    trainer = Trainer.create(cfg)
    meta = json.loads((root / "state.json").read_text())
    env = load_cubemap(root / "env", l_max=cfg.env_levels, samples=cfg.prefilter_samples)
    state = TrainState(meta["iteration"], meta["stage"], GaussianCloud.load(root / "cloud.txt"), env)
    if state.stage == 2 and (root / "indiasg.bin").exists():
        state.net = IndiAsg(seed=cfg.seed, hidden=cfg.net_hidden, depth=cfg.net_depth)
        state.net.net = PredictorNet.load(root / "indiasg.bin")
        trainer.refresh_mesh(state)
    return trainer, state


def _cmd_render(args) -> int:
    from .pipeline.io import save_png

    trainer, state = _load_checkpoint(args.checkpoint)
    if not 0 <= args.view < len(trainer.data.views):
        print(f"view {args.view} out of range (0..{len(trainer.data.views) - 1})", file=sys.stderr)
        return EXIT_CONFIG
    img, _ = trainer.forward(state, args.view)
    out = args.out or str(Path(args.checkpoint) / f"view_{args.view:03d}.png")
    save_png(out, img)
    print(out)
    return EXIT_OK


def _cmd_metrics(args) -> int:
    from .geometry import TriMesh

    trainer, state = _load_checkpoint(args.checkpoint)
    if args.gt:
        trainer.data.gt_mesh = TriMesh.load_obj(args.gt)
    if args.tsdf_res:
        trainer.cfg = trainer.cfg.replace(tsdf_res=args.tsdf_res)
    metrics = trainer.evaluate(state)
    metrics.pop("mesh")
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


def _cmd_make_scene(args) -> int:
    from .pipeline.scenes import PRESETS, make_scene

    if args.preset not in PRESETS:
        print(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}", file=sys.stderr)
        return EXIT_CONFIG
    path = make_scene(args.preset, args.out, resolution=args.resolution, n_views=args.views, samples=args.samples)
    print(path)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    from .checks import CHECKS

    if args.check == "list":
        print("\n".join(CHECKS))
        return EXIT_OK
    names = list(CHECKS) if args.check == "all" else [args.check]
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        print(f"unknown check {unknown[0]!r}; choose from {', '.join(CHECKS)}", file=sys.stderr)
        return EXIT_CONFIG
    ok = True
    for name in names:
        res = CHECKS[name](seed=args.seed)
        print(res.line())
        ok &= res.passed
    return EXIT_OK if ok else 1


def main(argv=None) -> int:
    from .pipeline.config import ConfigError
    from .pipeline.train import NumericalAbort

    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    handlers = {"run": _cmd_run, "render": _cmd_render, "metrics": _cmd_metrics,
                "make-scene": _cmd_make_scene, "oracle": _cmd_oracle}
    try:
        return handlers[args.cmd](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
