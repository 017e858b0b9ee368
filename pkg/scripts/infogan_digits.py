"""InfoGAN with one 10-way categorical code on mini_digits.

Reports how well each code value lines up with a digit class (labels come
from the nearest real image) and the peak of the mutual-information bound.
"""
import argparse
import json

from ganlab.experiments import run_infogan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--lambda-i", type=float, default=1.0)
    ap.add_argument("--save", help="directory for checkpoints (optional)")
    args = ap.parse_args()
    kw = {} if args.steps is None else {"steps": args.steps}
    for seed in args.seeds:
        r = run_infogan(seed, lambda_i=args.lambda_i, **kw)
        if args.save:
            r["trainer"].save(f"{args.save}/infogan_{seed}.bin")
        print(json.dumps({k: v for k, v in r.items() if k != "trainer"}), flush=True)


if __name__ == "__main__":
    main()
