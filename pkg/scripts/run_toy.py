"""Train the full model on toy_sphere and print the report (renders the preset first if needed)."""
import argparse
import json
import logging

from specsplat.pipeline.config import load_config
from specsplat.pipeline.scenes import ensure_scene
from specsplat.pipeline.train import run


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenes", default="scenes")
    p.add_argument("--preset", default="toy_sphere")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="runs/toy_full")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(ensure_scene(args.preset, args.scenes), seed=args.seed, out_dir=args.out)
    report = run(cfg)
    print(json.dumps({k: v for k, v in report.items() if k != "loss_windows"}, indent=1))


if __name__ == "__main__":
    main()
