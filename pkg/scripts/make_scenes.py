"""Render the synthetic presets with the analytic oracle into a scenes directory."""
import argparse
import logging
import time

from specsplat.pipeline.scenes import PRESETS, make_scene


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="scenes")
    p.add_argument("--presets", nargs="*", default=list(PRESETS))
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--samples", type=int, default=512)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for name in args.presets:
        t0 = time.perf_counter()
        path = make_scene(name, args.out, resolution=args.resolution, n_views=args.views, samples=args.samples)
        print(f"{name}: {path} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
