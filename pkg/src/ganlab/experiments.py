"""Desk-scale experiment runners shared by scripts/ and the acceptance suite.

Each runner builds its config, trains, and returns a plain dict of measured
quantities so callers decide what counts as a pass.
"""
from __future__ import annotations

import math
import time

import numpy as np

from .capsule import CapsuleDiscriminator
from .cli import eval_modes
from .config import config_from_dict
from .data import load_dataset, sample_code, sample_z
from .rng import RngStream
from .tensor import Tensor, no_grad
from .training import EncoderTrainer, GANTrainer

RING_STEPS = 20_000


def ring_config(objective="wgan_gp", seed=0, steps=RING_STEPS, hidden=128, n_hidden=3, z_dim=2, g_hidden=None,
                init="normal", **extra):
    cfg = {
        "objective": objective,
        "discriminator": "mlp",
        "dataset": {"kind": "ring", "n": 10_000, "seed": 0, "k": 8, "radius": 2.0, "sigma": 0.02},
        "latent": {"z_dim": z_dim},
        "optim": {"lr": 1e-4, "beta1": 0.5, "beta2": 0.9, "batch": 64, "n_critic": 5, "lambda_gp": 10.0},
        "model": {"hidden": hidden, "n_hidden": n_hidden, "g_hidden": g_hidden, "init": init},
        "max_steps": steps,
        "epochs": 10**9,
        "seed": seed,
        "saturating": objective == "standard",
        "wall_clock": False,
    }
    cfg.update(extra)
    return config_from_dict(cfg)


def run_ring(objective="wgan_gp", seed=0, steps=RING_STEPS, eval_n=10_000, tail=500, **kw):
    """Train on the 8-Gaussian ring and report mode coverage and sample quality."""
    cfg = ring_config(objective, seed, steps, **kw)
    data, _ = load_dataset(cfg.dataset)
    t0 = time.perf_counter()
    trainer = GANTrainer(cfg, data).run()
    seconds = time.perf_counter() - t0
    d = cfg.dataset
    report = eval_modes(trainer.g, cfg.latent.spec(), d.k, d.radius, d.sigma, eval_n, seed)
    norms = [r["grad_norm_mean"] for r in trainer.history[-tail:] if r["grad_norm_mean"] is not None]
    return {
        "objective": objective,
        "seed": seed,
        "steps": trainer.step_count,
        "seconds": seconds,
        "covered_modes": report["covered_modes"],
        "high_quality_fraction": report["high_quality_fraction"],
        "grad_norm_tail": float(np.mean(norms)) if norms else None,
        "report": report,
        "trainer": trainer,
    }


# ---------------------------------------------------------------------------
# mini_digits experiments
# ---------------------------------------------------------------------------

DIGITS_BASE = {
    "discriminator": "conv",
    "dataset": {"kind": "mini_digits", "n": 5000, "seed": 0, "holdout": 500},
    "latent": {"z_dim": 16},
    "optim": {"lr": 5e-4, "beta1": 0.5, "batch": 64},
    "model": {"depth": 2, "q_hidden": 128},
    "scale_factor": 0.25,
    "epochs": 10**9,
    "wall_clock": False,
}


def digits_config(objective, seed=0, steps=2000, **extra):
    cfg = {**DIGITS_BASE, "objective": objective, "seed": seed, "max_steps": steps}
    for k, v in extra.items():
        cfg[k] = {**cfg[k], **v} if isinstance(v, dict) and isinstance(cfg.get(k), dict) else v
    return config_from_dict(cfg)


def nearest_labels(samples, data, chunk=1000):
    """Class of the nearest real image (L2) for every generated sample."""
    real = data.images.reshape(len(data), -1)
    r2 = (real ** 2).sum(axis=1)
    out = []
    for lo in range(0, len(samples), chunk):
        s = samples[lo:lo + chunk].reshape(min(chunk, len(samples) - lo), -1)
        d = (s ** 2).sum(axis=1)[:, None] - 2 * s @ real.T + r2[None, :]
        out.append(data.labels[d.argmin(axis=1)])
    return np.concatenate(out)


def code_agreement(codes, labels, k):
    """Cluster-majority agreement: each code value votes for its most common label."""
    hits = 0
    majority = {}
    for c in range(k):
        mask = codes == c
        if not mask.any():
            continue
        counts = np.bincount(labels[mask], minlength=10)
        majority[c] = int(counts.argmax())
        hits += int(counts.max())
    return hits / len(codes), majority


def generate(g, latent, n, seed, r=1.0, codes=None):
    """Samples from ``g`` (eval mode) and the categorical code indices used."""
    z = sample_z(latent.z_dim, n, RngStream(seed, "gen.z"), r).data
    idx = np.zeros((n, 0), dtype=np.int64)
    if latent.code_dim:
        onehot, idx, cont = sample_code(latent.categorical, latent.continuous, n, RngStream(seed, "gen.code"))
        if codes is not None:
            idx = np.asarray(codes).reshape(n, -1)
            onehot = np.concatenate([np.eye(k)[idx[:, i]] for i, k in enumerate(latent.categorical)], axis=1)
        z = np.concatenate([z, onehot, cont], axis=1)
    with no_grad():
        x = g(Tensor(z), train=False).data
    return x, idx


def run_infogan(seed=0, steps=2000, lambda_i=1.0, eval_n=2000):
    cfg = digits_config("infogan", seed, steps, latent={"categorical": [10]}, optim={"lambda_i": lambda_i})
    data, _ = load_dataset(cfg.dataset)
    t0 = time.perf_counter()
    trainer = GANTrainer(cfg, data).run()
    latent = cfg.latent.spec()
    x, idx = generate(trainer.g, latent, eval_n, seed + 1000)
    labels = nearest_labels(x, data)
    agreement, majority = code_agreement(idx[:, 0], labels, 10)
    li = np.array([r["loss_li"] for r in trainer.history])
    return {
        "seed": seed,
        "agreement": agreement,
        "distinct_majority_classes": len(set(majority.values())),
        "max_li": float(li.max()),
        "final_li_mean": float(li[-100:].mean()),
        "li_threshold": -math.log(10) + 0.5,
        "seconds": time.perf_counter() - t0,
        "trainer": trainer,
    }


def run_digits_gan(objective="nonsaturating", seed=0, steps=2000):
    """Plain image GAN on mini_digits; its G is the usual target for an encoder."""
    cfg = digits_config(objective, seed, steps)
    data, _ = load_dataset(cfg.dataset)
    t0 = time.perf_counter()
    trainer = GANTrainer(cfg, data).run()
    return {"seed": seed, "seconds": time.perf_counter() - t0, "trainer": trainer}


def run_encoder(generator_trainer, seed=0, steps=3000, lr=1e-3):
    """Fit E against the trainer's frozen G; report held-out mean L1."""
    gcfg = generator_trainer.cfg
    cfg = config_from_dict({**gcfg.to_dict(), "stage": "encoder", "max_steps": steps, "seed": seed,
                            "optim": {**gcfg.to_dict()["optim"], "lr": lr},
                            "paths": {**gcfg.to_dict()["paths"], "generator": "in-memory"}})
    data, holdout = load_dataset(cfg.dataset)
    t0 = time.perf_counter()
    trainer = EncoderTrainer(cfg, data, generator_trainer.g).run()
    return {"seed": seed, "holdout_l1": trainer.evaluate(holdout), "train_l1": trainer.evaluate(data),
            "seconds": time.perf_counter() - t0, "trainer": trainer, "holdout": holdout}


def run_capsule(seed=0, steps=2000, check_every=1):
    """Standard-objective training with the capsule D, checking invariants as it goes."""
    cfg = digits_config("standard", seed, steps, discriminator="capsule")
    data, _ = load_dataset(cfg.dataset)
    trainer = GANTrainer(cfg, data)
    assert isinstance(trainer.d, CapsuleDiscriminator)
    worst_sum, out_lo, out_hi = 0.0, 1.0, 0.0
    x_probe = Tensor(data.images[:64])
    t0 = time.perf_counter()
    while not trainer.done():
        trainer.step()
        if trainer.step_count % check_every == 0:
            for c in trainer.d.last_routing.history:
                worst_sum = max(worst_sum, float(np.abs(c.sum(axis=2) - 1).max()))
            with no_grad():
                out = trainer.d(x_probe).data
            out_lo, out_hi = min(out_lo, float(out.min())), max(out_hi, float(out.max()))
    finite = all(np.isfinite(p.data).all() for net in trainer.nets.values() for p in net.params.values())
    return {"seed": seed, "steps": trainer.step_count, "finite": finite, "worst_coupling_error": worst_sum,
            "d_min": out_lo, "d_max": out_hi, "seconds": time.perf_counter() - t0, "trainer": trainer}


def diversity(g, latent, r_values=(0.2, 0.5, 0.8, 1.0), n=2000, seed=0):
    """Mean per-pixel variance of generated samples for each latent range r."""
    out = {}
    for r in r_values:
        x, _ = generate(g, latent, n, seed, r)
        out[r] = float(x.var(axis=0).mean())
    return out
