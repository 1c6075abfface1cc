"""Run every oracle comparison and print one PASS/FAIL line each; exit status 1 on any failure."""
import argparse
import sys

from specsplat.checks import CHECKS


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("names", nargs="*", default=list(CHECKS))
    args = p.parse_args()
    ok = True
    for name in args.names:
        res = CHECKS[name](seed=args.seed)
        print(res.line())
        ok &= res.passed
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
