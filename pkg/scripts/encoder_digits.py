"""Train a digits generator (nonsaturating), then fit an encoder against it.

Writes the reconstruction grid (originals above reconstructions) and prints
the held-out mean L1.
"""
import argparse
import json
import os

from ganlab.cli import main as cli
from ganlab.experiments import run_digits_gan, run_encoder


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="encoder_run")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    gen = run_digits_gan(seed=args.seed)
    enc = run_encoder(gen["trainer"], seed=args.seed)
    ck = os.path.join(args.out, "encoder.bin")
    enc["trainer"].save(ck)
    cli(["encode", "--checkpoint", ck, "--out", os.path.join(args.out, "reconstructions.pgm")])
    print(json.dumps({"seed": args.seed, "holdout_l1": enc["holdout_l1"], "train_l1": enc["train_l1"]}))


if __name__ == "__main__":
    main()
