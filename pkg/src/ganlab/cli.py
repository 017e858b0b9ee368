"""Command-line entry point: train, sample, encode, interpolate, vary, eval-modes."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import config_from_dict, load_config
from .data import load_dataset, one_hot, ring_centers, sample_code, sample_z, write_image_grid
from .errors import ConfigError, FormatError, NumericError, ParameterError
from .rng import RngStream
from .tensor import Tensor, no_grad
from .training import EncoderTrainer, GANTrainer, load_checkpoint, reconstruct, split_encoding

log = logging.getLogger("ganlab")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
COVERAGE_MIN = 0.02     # a mode counts as covered when it holds >= 2% of samples
QUALITY_SIGMAS = 3.0    # high quality: both coordinates within 3 sigma of the nearest center


# ---------------------------------------------------------------------------
# pure helpers (unit tested directly)
# ---------------------------------------------------------------------------

def mode_report(points, centers, sigma, coverage_min=COVERAGE_MIN, quality_sigmas=QUALITY_SIGMAS):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ConfigError(f"mode evaluation needs 2-D samples, got shape {points.shape}")
    d = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    nearest = d.argmin(axis=1)
    frac = np.bincount(nearest, minlength=len(centers)) / len(points)
    # per-coordinate test: a 2-D Gaussian sample lands inside the 3-sigma box with
    # probability 0.9973**2 ~ 0.9946, inside the 3-sigma disk only 1 - exp(-4.5) ~ 0.9889
    offset = np.abs(points - centers[nearest]).max(axis=1)
    good = offset <= quality_sigmas * sigma
    return {
        "n": int(len(points)),
        "mode_fractions": [float(f) for f in frac],
        "covered_modes": int((frac >= coverage_min).sum()),
        "num_modes": int(len(centers)),
        "high_quality_fraction": float(good.mean()),
        "coverage_threshold": coverage_min,
        "quality_sigmas": quality_sigmas,
    }


def bilinear_weights(steps):
    """(steps, steps, 4) weights over corners ordered top-left, top-right, bottom-left, bottom-right."""
    if steps < 2:
        raise ParameterError("interpolation needs steps >= 2")
    t = np.linspace(0.0, 1.0, steps)
    u, v = np.meshgrid(t, t, indexing="ij")          # u down the rows, v across columns
    return np.stack([(1 - u) * (1 - v), (1 - u) * v, u * (1 - v), u * v], axis=-1)


def bilinear_grid(corners, steps):
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape[0] != 4:
        raise ParameterError(f"bilinear interpolation needs exactly 4 corners, got {corners.shape[0]}")
    w = bilinear_weights(steps)
    return np.einsum("abk,kd->abd", w, corners.reshape(4, -1)).reshape(steps * steps, -1)


def paired_rows(originals, recons, cols):
    """Interleave rows: originals on rows 1, 3, 5..., reconstructions below each."""
    originals, recons = np.asarray(originals), np.asarray(recons)
    if originals.shape != recons.shape:
        raise ParameterError("originals and reconstructions differ in shape")
    n = len(originals)
    pad = (-n) % cols
    if pad:
        blank = np.full((pad,) + originals.shape[1:], -1.0)
        originals = np.concatenate([originals, blank])
        recons = np.concatenate([recons, blank])
    out = []
    for lo in range(0, len(originals), cols):
        out.append(originals[lo:lo + cols])
        out.append(recons[lo:lo + cols])
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _load_nets(path):
    if not path or not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    nets, meta, _ = load_checkpoint(path)
    return nets, meta, config_from_dict(meta["config"])


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _generator_input(latent, z, rng_code):
    n = z.shape[0]
    if not latent.code_dim:
        return z
    onehot, _, cont = sample_code(latent.categorical, latent.continuous, n, rng_code)
    return np.concatenate([z, onehot, cont], axis=1)


def _decode(g, g_in, cond=None):
    with no_grad():
        return g(Tensor(g_in), None if cond is None else Tensor(cond), train=False).data


def _save_output(out, images_or_points, cols):
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    if images_or_points.ndim == 2:
        np.savetxt(out, images_or_points, delimiter=",", fmt="%.17g", header="x,y", comments="")
    else:
        write_image_grid(images_or_points, cols, out)


def _out(args, default):
    return args.out if args.out else default


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    if not args.config:
        raise ConfigError("train needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.paths.out_dir = args.out
    out = cfg.paths.out_dir
    try:
        data, holdout = load_dataset(cfg.dataset)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    ckpt = cfg.paths.checkpoint or os.path.join(out, "checkpoint.bin")
    metrics = cfg.paths.metrics or os.path.join(out, "metrics.csv")
    manifest = cfg.paths.manifest or os.path.join(out, "manifest.json")
    if cfg.stage == "encoder":
        gen_nets, _, _ = _load_nets(cfg.paths.generator)
        trainer = EncoderTrainer(cfg, data, gen_nets["g"])
    else:
        trainer = GANTrainer(cfg, data)
    os.makedirs(out, exist_ok=True)
    _write_json(manifest, {
        "config": cfg.to_dict(), "seed": cfg.seed, "dataset_digest": data.digest,
        "checkpoint": ckpt, "metrics": metrics, "version": __version__, "stage": cfg.stage,
    })
    if cfg.stage == "encoder":
        trainer.run(metrics, ckpt)
        if holdout is not None:
            l1 = trainer.evaluate(holdout)
            _write_json(os.path.join(out, "holdout.json"), {"mean_l1": l1, "n": len(holdout)})
            print(f"holdout mean L1 {l1:.6f}")
    else:
        trainer.run(metrics, ckpt, log_every=args.log_every, nan_dump=os.path.join(out, "nan_dump.json"))
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_sample(args):
    nets, _, cfg = _load_nets(args.checkpoint)
    g = nets["g"]
    latent = cfg.latent.spec()
    bands = args.r or [1.0]
    for r in bands:
        if not 0 < r <= 1:
            raise ParameterError(f"r must lie in (0, 1], got {r}")
    seed = cfg.seed if args.seed is None else args.seed
    rng_z, rng_code = RngStream(seed, "sample.z"), RngStream(seed, "sample.code")
    per_band = -(-args.n // len(bands))
    chunks = []
    for r in bands:
        z = sample_z(latent.z_dim, per_band, rng_z, r).data
        g_in = _generator_input(latent, z, rng_code)
        cond = None
        if latent.label_dim:
            labels = np.full(per_band, args.label) if args.label is not None else np.arange(per_band) % latent.label_dim
            cond = one_hot(labels, latent.label_dim)
        chunks.append(_decode(g, g_in, cond))
    samples = np.concatenate(chunks)[:args.n]
    out = _out(args, "samples.csv" if samples.ndim == 2 else "samples.pgm")
    _save_output(out, samples, args.cols)
    print(f"wrote {out}")
    return EXIT_OK


def _encoder_inputs(cfg, args):
    data, holdout = load_dataset(cfg.dataset)
    src = holdout if holdout is not None else data
    if args.indices:
        idx = np.asarray(args.indices)
        if idx.min() < 0 or idx.max() >= len(src):
            raise ParameterError(f"input indices must lie in [0, {len(src)})")
        return src.images[idx]
    return src.images[:args.n]


def cmd_encode(args):
    nets, _, cfg = _load_nets(args.checkpoint)
    if "e" not in nets:
        raise ConfigError(f"{args.checkpoint} holds no encoder")
    latent = cfg.latent.spec()
    x = _encoder_inputs(cfg, args)
    with no_grad():
        recon = reconstruct(nets["e"], nets["g"], Tensor(x), latent).data
    l1 = float(np.abs(recon - x).mean())
    out = _out(args, "reconstructions.pgm")
    _save_output(out, paired_rows(x, recon, args.cols), args.cols)
    print(f"mean L1 {l1:.6f}")
    return EXIT_OK


def cmd_interpolate(args):
    nets, _, cfg = _load_nets(args.checkpoint)
    latent = cfg.latent.spec()
    seed = cfg.seed if args.seed is None else args.seed
    if args.random:
        z = sample_z(latent.z_dim, 4, RngStream(seed, "interp.z"), 1.0).data
        corners = _generator_input(latent, z, RngStream(seed, "interp.code"))
        if latent.label_dim:
            labels = RngStream(seed, "interp.label").integers(latent.label_dim, 4)
            corners = np.concatenate([corners, one_hot(labels, latent.label_dim)], axis=1)
    else:
        if "e" not in nets:
            raise ConfigError(f"{args.checkpoint} holds no encoder; use --random")
        if not args.indices or len(args.indices) != 4:
            raise ParameterError("interpolation needs exactly 4 corner images (--indices a b c d)")
        x = _encoder_inputs(cfg, args)
        with no_grad():
            corners = nets["e"](Tensor(x), train=False).data
    grid = bilinear_grid(corners, args.steps)
    g_in, cond = split_encoding(grid, latent)
    images = _decode(nets["g"], g_in, cond)
    out = _out(args, "interpolation.pgm")
    _save_output(out, images, args.steps)
    print(f"wrote {out}")
    return EXIT_OK


def vary_inputs(latent, mode, rows, steps, rng_z, rng_code, index=0, base=None):
    """Generator inputs and conditions for a rows x columns sweep.

    Each row keeps one latent vector; columns enumerate classes (conditional_y,
    categorical_c) or sweep one continuous code linearly over [-1, 1].
    ``base`` optionally supplies encoded rows (z, codes, labels) to start from.
    """
    if mode == "conditional_y":
        if not latent.label_dim:
            raise ConfigError("conditional_y needs a conditional generator")
        cols = latent.label_dim
    elif mode == "categorical_c":
        if not latent.categorical:
            raise ConfigError("categorical_c needs a generator with a categorical code")
        cols = latent.categorical[index]
    elif mode == "continuous_c":
        if not latent.continuous:
            raise ConfigError("continuous_c needs a generator with a continuous code")
        if not 0 <= index < latent.continuous:
            raise ParameterError(f"continuous code index {index} out of range")
        cols = steps
    else:
        raise ConfigError(f"unknown vary mode {mode!r}")
    if base is None:
        z = sample_z(latent.z_dim, rows, rng_z, 1.0).data
        base = _generator_input(latent, z, rng_code)
        if latent.label_dim:
            base = np.concatenate([base, one_hot(np.zeros(rows, dtype=int), latent.label_dim)], axis=1)
    base = np.asarray(base, dtype=np.float64)
    full = np.repeat(base, cols, axis=0)                 # row-major: row i, column j
    col = np.tile(np.arange(cols), len(base))
    zc = latent.z_dim
    if mode == "conditional_y":
        lo = latent.generator_input_dim
        full[:, lo:lo + cols] = one_hot(col, cols)
    elif mode == "categorical_c":
        lo = zc + sum(latent.categorical[:index])
        full[:, lo:lo + cols] = one_hot(col, cols)
    else:
        lo = zc + sum(latent.categorical) + index
        full[:, lo] = np.linspace(-1.0, 1.0, cols)[col]
    g_in, cond = split_encoding(full, latent)
    return g_in, cond, cols


def cmd_vary(args):
    nets, _, cfg = _load_nets(args.checkpoint)
    latent = cfg.latent.spec()
    seed = cfg.seed if args.seed is None else args.seed
    base = None
    if args.encoded:
        if "e" not in nets:
            raise ConfigError(f"{args.checkpoint} holds no encoder")
        args.n = args.rows
        x = _encoder_inputs(cfg, args)
        with no_grad():
            base = nets["e"](Tensor(x), train=False).data
    g_in, cond, cols = vary_inputs(latent, args.mode, args.rows, args.steps, RngStream(seed, "vary.z"),
                                   RngStream(seed, "vary.code"), args.index, base)
    images = _decode(nets["g"], g_in, cond)
    out = _out(args, f"vary_{args.mode}.pgm")
    _save_output(out, images, cols)
    print(f"wrote {out}")
    return EXIT_OK


def eval_modes(g, latent, k, radius, sigma, n, seed):
    if g.spec.output_shape != (2,):
        raise ConfigError(f"eval-modes needs a 2-D generator, got output shape {g.spec.output_shape}")
    z = sample_z(latent.z_dim, n, RngStream(seed, "eval.z"), 1.0).data
    g_in = _generator_input(latent, z, RngStream(seed, "eval.code"))
    cond = None
    if latent.label_dim:
        cond = one_hot(RngStream(seed, "eval.label").integers(latent.label_dim, n), latent.label_dim)
    return mode_report(_decode(g, g_in, cond), ring_centers(k, radius), sigma)


def cmd_eval_modes(args):
    nets, _, cfg = _load_nets(args.checkpoint)
    d = cfg.dataset
    seed = cfg.seed if args.seed is None else args.seed
    report = eval_modes(nets["g"], cfg.latent.spec(), args.k or d.k, args.radius or d.radius,
                        args.sigma or d.sigma, args.n, seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _write_json(args.out, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (overrides the config)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (train) or file")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")

    p = argparse.ArgumentParser(prog="ganlab", parents=[common], description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run a training stage from a config")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="grid of generated samples")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--r", type=float, nargs="+", help="latent range(s); several values stack as bands")
    s.add_argument("--label", type=int, help="class for conditional generators (default: cycle)")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("encode", parents=[common], help="originals and reconstructions on alternating rows")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, default=24)
    e.add_argument("--cols", type=int, default=8)
    e.add_argument("--indices", type=int, nargs="+")
    e.set_defaults(func=cmd_encode)

    i = sub.add_parser("interpolate", parents=[common], help="bilinear interpolation between 4 latents")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--steps", type=int, default=8)
    i.add_argument("--random", action="store_true", help="use 4 random latent samples as corners")
    i.add_argument("--indices", type=int, nargs="+", help="dataset indices of the 4 corner images")
    i.set_defaults(func=cmd_interpolate, n=4)

    v = sub.add_parser("vary", parents=[common], help="sweep a label or latent code across columns")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--mode", required=True, choices=["conditional_y", "categorical_c", "continuous_c"])
    v.add_argument("--rows", type=int, default=8)
    v.add_argument("--steps", type=int, default=10, help="columns of a continuous sweep")
    v.add_argument("--index", type=int, default=0, help="which code to vary")
    v.add_argument("--encoded", action="store_true", help="start rows from encoded dataset images")
    v.set_defaults(func=cmd_vary, indices=None)

    m = sub.add_parser("eval-modes", parents=[common],
                       help=f"mode coverage on the ring: a mode is covered at >= {COVERAGE_MIN:.0%} of samples, "
                            f"a sample is high quality when both coordinates lie within {QUALITY_SIGMAS:g} sigma "
                            f"of its nearest center")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--n", type=int, default=10_000)
    m.add_argument("--k", type=int)
    m.add_argument("--radius", type=float)
    m.add_argument("--sigma", type=float)
    m.set_defaults(func=cmd_eval_modes)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    for name in ("seed", "out", "config"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
