"""Sample diversity against the latent range r for a trained checkpoint."""
import argparse
import json

from ganlab.config import config_from_dict
from ganlab.experiments import diversity
from ganlab.training import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--r", type=float, nargs="+", default=[0.2, 0.4, 0.6, 0.8, 1.0])
    ap.add_argument("--n", type=int, default=2000)
    args = ap.parse_args()
    nets, meta, _ = load_checkpoint(args.checkpoint)
    latent = config_from_dict(meta["config"]).latent.spec()
    print(json.dumps(diversity(nets["g"], latent, args.r, args.n)))


if __name__ == "__main__":
    main()
