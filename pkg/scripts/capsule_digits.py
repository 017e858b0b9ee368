"""Standard GAN with the capsule discriminator on mini_digits.

Checks for non-finite values, the range of D outputs on a fixed probe batch
and the routing coupling sums while training.
"""
import argparse
import json

from ganlab.experiments import run_capsule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    r = run_capsule(args.seed, args.steps)
    print(json.dumps({k: v for k, v in r.items() if k != "trainer"}))


if __name__ == "__main__":
    main()
