"""Adam, the adversarial training loops, encoder training and checkpoint plumbing."""
from __future__ import annotations

import csv
import json
import logging
import os
import time

import numpy as np

from . import objectives as O
from . import tensor as T
from .capsule import CapsuleDiscriminator, CapsuleSpec
from .checkpoint import combined_digest, read_checkpoint, write_checkpoint
from .config import TrainConfig, config_from_dict
from .data import Dataset, one_hot, sample_code, sample_z
from .errors import ConfigError, CorruptCheckpointError, NumericError, StateError
from .models import (LatentSpec, ModelSpec, Network, QHead, build_discriminator, build_encoder,
                     build_generator, discriminator_spec, encoder_spec, generator_spec, mlp_spec, scaled)
from .rng import RngStreams
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "loss_d", "loss_g", "loss_li", "grad_norm_mean", "wall_ms"]
ENCODER_HEADER = ["step", "epoch", "loss_e", "wall_ms"]


class Adam:
    """Adam with bias correction over a name -> Tensor parameter dict."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.5, beta2=0.99, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise StateError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self, prefix):
        out = {}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, prefix, t):
        for k in self.params:
            self.m[k] = np.array(arrays[f"{prefix}/m/{k}"])
            self.v[k] = np.array(arrays[f"{prefix}/v/{k}"])
        self.t = int(t)


def adam_step(params, state: Adam):
    """Functional spelling of one optimizer update."""
    state.params = params
    state.step()
    return params


# ---------------------------------------------------------------------------
# network construction and (de)serialisation
# ---------------------------------------------------------------------------

def capsule_spec_for(cfg: TrainConfig, image_shape):
    if cfg.model.capsule:
        return CapsuleSpec.from_dict({**CapsuleSpec(tuple(image_shape)).to_dict(), **cfg.model.capsule,
                                      "input_shape": tuple(image_shape)})
    if image_shape[1] < 20:
        return CapsuleSpec.desk(image_shape)
    return CapsuleSpec(tuple(image_shape), conv_filters=scaled(128, cfg.scale_factor),
                       primary_channels=scaled(32, cfg.scale_factor))


def build_nets(cfg: TrainConfig, sample_shape, streams: RngStreams) -> dict:
    lat = cfg.latent.spec()
    wgan = cfg.objective == "wgan_gp"
    if cfg.discriminator == "mlp":
        dim = sample_shape[0]
        g_width = cfg.model.g_hidden or cfg.model.hidden
        gspec = mlp_spec("generator", lat.generator_input_dim, dim, g_width, cfg.model.n_hidden,
                         "relu", "linear", lat.label_dim)
        dspec = mlp_spec("critic" if wgan else "discriminator", dim, 1, cfg.model.hidden, cfg.model.n_hidden,
                         "lrelu", "linear" if wgan else "sigmoid", lat.label_dim)
    else:
        gspec = generator_spec(lat, sample_shape, cfg.scale_factor)
        dspec = discriminator_spec(sample_shape, "critic" if wgan else "standard", cfg.scale_factor,
                                   cfg.model.depth, lat.label_dim)
    nets = {"g": build_generator(gspec, streams["init.g"], cfg.model.init)}
    if cfg.discriminator == "capsule":
        nets["d"] = CapsuleDiscriminator.build(capsule_spec_for(cfg, sample_shape), streams["init.d"])
    else:
        nets["d"] = build_discriminator(dspec, streams["init.d"], cfg.model.init)
    if cfg.objective == "infogan":
        nets["q"] = QHead.build(nets["d"], lat, streams["init.q"], cfg.model.q_hidden)
    return nets


def _spec_record(net):
    if isinstance(net, CapsuleDiscriminator):
        return {"type": "capsule", "spec": net.spec.to_dict()}
    if isinstance(net, QHead):
        return {"type": "qhead", "spec": net.head.spec.to_dict()}
    return {"type": "network", "spec": net.spec.to_dict()}


def _spec_digest(net):
    return net.head.spec.digest() if isinstance(net, QHead) else net.spec.digest()


def nets_digest(nets: dict) -> str:
    return combined_digest({k: _spec_digest(v) for k, v in nets.items()})


def _net_arrays(net):
    return net.head.state_arrays() if isinstance(net, QHead) else net.state_arrays()


def _rebuild_nets(records: dict) -> dict:
    nets = {}
    for name in sorted(records, key=lambda k: k == "q"):
        rec = records[name]
        if rec["type"] == "capsule":
            spec = CapsuleSpec.from_dict(rec["spec"])
            nets[name] = CapsuleDiscriminator(spec, {k: Tensor(np.zeros(s), requires_grad=True)
                                                     for k, s in spec.param_shapes().items()})
        elif rec["type"] == "qhead":
            spec = ModelSpec.from_dict(rec["spec"])
            head = Network(spec, {k: Tensor(np.zeros(s), requires_grad=True)
                                  for k, s in spec.param_shapes().items()})
            nets[name] = QHead(nets["d"], head)
        else:
            spec = ModelSpec.from_dict(rec["spec"])
            params = {k: Tensor(np.zeros(s), requires_grad=True) for k, s in spec.param_shapes().items()}
            buffers = {}
            for k, s in spec.param_shapes().items():
                if k.endswith(".gamma"):
                    idx = k.split(".")[0]
                    buffers[f"{idx}.running_mean"] = np.zeros(s)
                    buffers[f"{idx}.running_var"] = np.ones(s)
            nets[name] = Network(spec, params, buffers)
    return nets


def save_checkpoint(path, nets: dict, meta: dict | None = None, extra_arrays: dict | None = None):
    """Write networks (plus optional trainer state) to ``path`` atomically."""
    meta = dict(meta or {})
    meta["nets"] = {k: _spec_record(v) for k, v in nets.items()}
    arrays = {}
    for name, net in nets.items():
        for k, a in _net_arrays(net).items():
            arrays[f"{name}/{k}"] = a
    arrays.update(extra_arrays or {})
    write_checkpoint(path, nets_digest(nets), meta, arrays)


def load_checkpoint(path, expected_digest=None):
    """Return (nets, meta, arrays). Raises CorruptCheckpointError on digest mismatch."""
    digest, meta, arrays = read_checkpoint(path)
    if "nets" not in meta:
        raise CorruptCheckpointError(f"{path}: no network records")
    nets = _rebuild_nets(meta["nets"])
    if nets_digest(nets) != digest:
        raise CorruptCheckpointError(f"{path}: stored spec digest does not match its network records")
    if expected_digest is not None and digest != expected_digest:
        raise CorruptCheckpointError(f"{path}: spec digest {digest[:12]} does not match expected {expected_digest[:12]}")
    for name, net in nets.items():
        prefix = f"{name}/"
        sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        (net.head if isinstance(net, QHead) else net).load_state_arrays(sub)
    return nets, meta, arrays


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    def __init__(self, path, header):
        self.path = path
        self.header = header
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(header)

    def write(self, row: dict):
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(k)) for k in self.header])


def read_metrics(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------

class GANTrainer:
    """Holds networks, optimizers, RNG streams and counters for one run.

    One call to :meth:`step` is one generator update together with the
    discriminator/critic updates that precede it.
    """

    def __init__(self, cfg: TrainConfig, data: Dataset, nets: dict | None = None):
        cfg.validate()
        if cfg.stage != "gan":
            raise ConfigError("GANTrainer runs the gan stage only")
        self.cfg = cfg
        self.data = data
        self.latent = cfg.latent.spec()
        if self.latent.label_dim:
            if data.labels is None:
                raise ConfigError("conditional training needs a labelled dataset")
            if data.num_classes != self.latent.label_dim:
                raise ConfigError(f"label_dim {self.latent.label_dim} != dataset classes {data.num_classes}")
        self.streams = RngStreams(cfg.seed)
        self.nets = nets if nets is not None else build_nets(cfg, data.sample_shape, self.streams)
        self.g, self.d, self.q = self.nets["g"], self.nets["d"], self.nets.get("q")
        if cfg.objective == "wgan_gp" and self.d.spec.has_norm:
            raise ConfigError("the critic must not contain batch normalisation")
        gq = {f"g/{k}": p for k, p in self.g.params.items()}
        if self.q is not None:
            gq.update({f"q/{k}": p for k, p in self.q.params.items()})
        o = cfg.optim
        self.opt_d = Adam(dict(self.d.params), o.lr, o.beta1, cfg.beta2, o.eps)
        self.opt_g = Adam(gq, o.lr, o.beta1, cfg.beta2, o.eps)
        self.step_count = 0
        self.d_updates = 0
        self.g_updates = 0
        self.epochs_done = 0
        self.perm = None
        self.cursor = 0
        self.history = []
        self.variant = "saturating" if (cfg.objective == "standard" and cfg.saturating) else "nonsaturating"

    # -- data and latent draws ---------------------------------------------
    def _batch(self):
        m = self.cfg.optim.batch
        n = len(self.data)
        if m > n:
            raise ConfigError(f"batch size {m} exceeds dataset size {n}")
        if self.perm is None or self.cursor + m > n:
            self.perm = self.streams["data"].permutation(n)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + m]
        self.cursor += m
        if self.cursor + m > n:
            self.epochs_done += 1
        x = Tensor(self.data.images[idx])
        y = None
        if self.latent.label_dim:
            y = Tensor(one_hot(self.data.labels[idx], self.latent.label_dim))
        return x, y

    def _latent(self, n):
        z = sample_z(self.latent.z_dim, n, self.streams["z"], self.latent.r)
        onehot, idx, cont = None, None, None
        if self.latent.code_dim:
            onehot, idx, cont = sample_code(self.latent.categorical, self.latent.continuous, n,
                                            self.streams["code"])
            z = Tensor(np.concatenate([z.data, onehot, cont], axis=1))
        return z, onehot, idx, cont

    # -- steps ------------------------------------------------------------
    def _critic_step(self):
        cfg = self.cfg
        x, y = self._batch()
        m = x.shape[0]
        z, *_ = self._latent(m)
        with no_grad():
            fake = self.g(z, y, train=True)
        eps = self.streams["eps"].uniform(0.0, 1.0, (m,))
        both = T.concat([x, fake.detach()], axis=0)
        yy = None if y is None else T.concat([y, y], axis=0)
        out = self.d(both, yy, train=True)
        core, _ = O.wgan_losses(out[:m], out[m:])
        gp, norms = O.gradient_penalty(self.d, x, fake, eps, cfg.optim.lambda_gp, cond=y)
        loss = T.add(core, gp)
        self.opt_d.zero_grad()
        loss.backward()
        self.opt_d.step()
        self.d_updates += 1
        return loss.item(), float(norms.mean())

    def _wgan_step(self):
        losses, norms = [], []
        for _ in range(self.cfg.optim.n_critic):
            l, g = self._critic_step()
            losses.append(l)
            norms.append(g)
        m = self.cfg.optim.batch
        z, *_ = self._latent(m)
        y = None
        if self.latent.label_dim:
            y = Tensor(one_hot(self.streams["label"].integers(self.latent.label_dim, m), self.latent.label_dim))
        _, loss_g = O.wgan_losses(Tensor(np.zeros(1)), self.d(self.g(z, y, train=True), y, train=True))
        self.opt_g.zero_grad()
        loss_g.backward()
        self.opt_g.step()
        self.g_updates += 1
        return {"loss_d": losses[-1], "loss_g": loss_g.item(), "loss_li": None,
                "grad_norm_mean": float(np.mean(norms))}

    def _standard_step(self):
        cfg = self.cfg
        x, y = self._batch()
        m = x.shape[0]
        z, *_ = self._latent(m)
        with no_grad():
            fake = self.g(z, y, train=True)
        d_real = self.d(x, y, train=True)
        d_fake = self.d(fake.detach(), y, train=True)
        loss_d = O.loss_d_standard(d_real, d_fake)
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()
        self.d_updates += 1

        z, onehot, _, cont = self._latent(m)
        fake = self.g(z, y, train=True)
        out, feats = self.d(fake, y, train=True, return_features=True)
        loss_gen = O.loss_g(out, self.variant)
        l_i = None
        if self.q is not None:
            q_out = self.q.from_features(feats, train=True)
            l_i, _, _ = O.info_lower_bound(q_out, self.latent.code_heads(), onehot, cont)
            _, loss_gen = O.infogan_losses(loss_d, loss_gen, l_i, cfg.optim.lambda_i)
        self.opt_g.zero_grad()
        loss_gen.backward()
        self.opt_g.step()
        self.g_updates += 1
        return {"loss_d": loss_d.item(), "loss_g": loss_gen.item(),
                "loss_li": None if l_i is None else l_i.item(), "grad_norm_mean": None}

    def step(self):
        t0 = time.perf_counter()
        try:
            row = self._wgan_step() if self.cfg.objective == "wgan_gp" else self._standard_step()
        except NumericError as exc:
            raise NumericError(f"numeric failure at generator step {self.step_count + 1}: {exc}",
                               self.diagnostics()) from exc
        for key in ("loss_d", "loss_g", "loss_li"):
            if row[key] is not None and not np.isfinite(row[key]):
                raise NumericError(f"{key} became non-finite at step {self.step_count + 1}", self.diagnostics())
        self.step_count += 1
        row["step"] = self.step_count
        row["epoch"] = self.epochs_done
        row["wall_ms"] = (time.perf_counter() - t0) * 1000.0 if self.cfg.wall_clock else 0
        self.history.append(row)
        return row

    def done(self):
        if self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps:
            return True
        return self.epochs_done >= self.cfg.epochs

    def run(self, metrics_path=None, checkpoint_path=None, log_every=0, nan_dump=None):
        writer = MetricsWriter(metrics_path, METRICS_HEADER)
        try:
            while not self.done():
                row = self.step()
                writer.write(row)
                if log_every and self.step_count % log_every == 0:
                    log.info("step %d epoch %d loss_d %.4f loss_g %.4f", row["step"], row["epoch"],
                             row["loss_d"], row["loss_g"])
        except NumericError as exc:
            if nan_dump:
                with open(nan_dump, "w") as fh:
                    json.dump({"error": str(exc), **exc.state}, fh, indent=2, default=str)
            raise
        if checkpoint_path:
            self.save(checkpoint_path)
        return self

    def diagnostics(self):
        norms = {}
        with np.errstate(over="ignore", invalid="ignore"):
            for name, net in self.nets.items():
                for k, p in net.params.items():
                    norms[f"{name}/{k}"] = float(np.sqrt(np.nansum(p.data ** 2)))
        return {"step": self.step_count, "d_updates": self.d_updates, "g_updates": self.g_updates,
                "last_rows": self.history[-5:], "param_norms": norms}

    # -- checkpointing --------------------------------------------------------
    def state_meta(self):
        return {
            "kind": "gan",
            "config": self.cfg.to_dict(),
            "dataset_digest": self.data.digest,
            "rng": self.streams.state_dict(),
            "adam": {"d": self.opt_d.t, "g": self.opt_g.t},
            "counters": {"step": self.step_count, "d_updates": self.d_updates, "g_updates": self.g_updates,
                         "epochs_done": self.epochs_done, "cursor": self.cursor},
        }

    def save(self, path):
        extra = {}
        extra.update(self.opt_d.state_arrays("adam_d"))
        extra.update(self.opt_g.state_arrays("adam_g"))
        if self.perm is not None:
            extra["data/perm"] = self.perm.astype(np.float64)
        save_checkpoint(path, self.nets, self.state_meta(), extra)

    @classmethod
    def restore(cls, path, data: Dataset):
        nets, meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "gan":
            raise CorruptCheckpointError(f"{path}: not a GAN training checkpoint")
        cfg = config_from_dict(meta["config"])
        trainer = cls(cfg, data, nets)
        trainer._load_state(meta, arrays)
        return trainer

    def restore_into(self, path):
        """Load ``path`` into this trainer; its spec digest must match ours."""
        _, meta, arrays = load_checkpoint(path, expected_digest=nets_digest(self.nets))
        loaded, _, _ = load_checkpoint(path)
        for name, net in self.nets.items():
            src = loaded[name]
            (net.head if isinstance(net, QHead) else net).load_state_arrays(_net_arrays(src))
        self._load_state(meta, arrays)
        return self

    def _load_state(self, meta, arrays):
        self.streams.load_state_dict(meta["rng"])
        self.opt_d.load_state_arrays(arrays, "adam_d", meta["adam"]["d"])
        self.opt_g.load_state_arrays(arrays, "adam_g", meta["adam"]["g"])
        c = meta["counters"]
        self.step_count, self.d_updates, self.g_updates = c["step"], c["d_updates"], c["g_updates"]
        self.epochs_done, self.cursor = c["epochs_done"], c["cursor"]
        self.perm = arrays["data/perm"].astype(np.int64) if "data/perm" in arrays else None


def train_wgan_gp(cfg: TrainConfig, data: Dataset, nets=None, metrics_path=None, checkpoint_path=None):
    if cfg.objective != "wgan_gp":
        raise ConfigError("train_wgan_gp needs objective wgan_gp")
    return GANTrainer(cfg, data, nets).run(metrics_path, checkpoint_path)


def train_standard(cfg: TrainConfig, data: Dataset, nets=None, metrics_path=None, checkpoint_path=None):
    if cfg.objective == "wgan_gp":
        raise ConfigError("train_standard does not run wgan_gp")
    return GANTrainer(cfg, data, nets).run(metrics_path, checkpoint_path)


# ---------------------------------------------------------------------------
# encoder training
# ---------------------------------------------------------------------------

def split_encoding(code, latent: LatentSpec):
    """Split an encoder output into (generator input, condition or None)."""
    gen_dim = latent.generator_input_dim
    g_in = code[:, :gen_dim]
    cond = code[:, gen_dim:] if latent.label_dim else None
    return g_in, cond


def reconstruct(encoder, generator, x, latent: LatentSpec, train_encoder=False):
    code = encoder(x, train=train_encoder)
    g_in, cond = split_encoding(code, latent)
    return generator(g_in, cond, train=False)


class EncoderTrainer:
    """Fits E so that G(E(x)) ~ x under the L1 pixel loss, with G frozen."""

    def __init__(self, cfg: TrainConfig, data: Dataset, generator: Network, encoder: Network | None = None):
        cfg.validate()
        self.cfg = cfg
        self.data = data
        self.latent = cfg.latent.spec()
        self.g = generator
        self.g.requires_grad_(False)
        self.streams = RngStreams(cfg.seed)
        if encoder is None:
            spec = encoder_spec(data.sample_shape, self.latent, cfg.scale_factor, cfg.model.depth)
            encoder = build_encoder(spec, self.streams["init.e"])
        self.e = encoder
        o = cfg.optim
        self.opt = Adam(dict(self.e.params), o.lr, o.beta1, cfg.beta2, o.eps)
        self.step_count = 0
        self.epochs_done = 0
        self.perm = None
        self.cursor = 0
        self.history = []

    def step(self):
        t0 = time.perf_counter()
        x, _ = self._batch_images()
        recon = reconstruct(self.e, self.g, x, self.latent, train_encoder=True)
        loss = O.encoder_loss_l1(x, recon)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step_count += 1
        row = {"step": self.step_count, "epoch": self.epochs_done, "loss_e": loss.item(),
               "wall_ms": (time.perf_counter() - t0) * 1000.0 if self.cfg.wall_clock else 0}
        self.history.append(row)
        return row

    def _batch_images(self):
        m = self.cfg.optim.batch
        n = len(self.data)
        if self.perm is None or self.cursor + m > n:
            self.perm = self.streams["data"].permutation(n)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + m]
        self.cursor += m
        if self.cursor + m > n:
            self.epochs_done += 1
        return Tensor(self.data.images[idx]), idx

    def done(self):
        if self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps:
            return True
        return self.epochs_done >= self.cfg.epochs

    def run(self, metrics_path=None, checkpoint_path=None):
        writer = MetricsWriter(metrics_path, ENCODER_HEADER)
        while not self.done():
            writer.write(self.step())
        if checkpoint_path:
            self.save(checkpoint_path)
        return self

    def evaluate(self, data: Dataset, batch=256):
        """Mean per-sample L1 reconstruction error over ``data`` (eval mode)."""
        total = 0.0
        with no_grad():
            for lo in range(0, len(data), batch):
                x = Tensor(data.images[lo:lo + batch])
                recon = reconstruct(self.e, self.g, x, self.latent)
                total += float(np.abs(recon.data - x.data).mean(axis=tuple(range(1, x.ndim))).sum())
        return total / len(data)

    def save(self, path):
        meta = {"kind": "encoder", "config": self.cfg.to_dict(), "dataset_digest": self.data.digest,
                "rng": self.streams.state_dict(), "adam": {"e": self.opt.t},
                "counters": {"step": self.step_count, "epochs_done": self.epochs_done}}
        save_checkpoint(path, {"g": self.g, "e": self.e}, meta, self.opt.state_arrays("adam_e"))


def train_encoder(cfg: TrainConfig, data: Dataset, generator=None, encoder=None,
                  metrics_path=None, checkpoint_path=None):
    """Train E against a frozen G; ``generator`` defaults to paths.generator."""
    if generator is None:
        if not cfg.paths.generator or not os.path.exists(cfg.paths.generator):
            raise ConfigError(f"generator checkpoint not found: {cfg.paths.generator}")
        nets, _, _ = load_checkpoint(cfg.paths.generator)
        generator = nets["g"]
    return EncoderTrainer(cfg, data, generator, encoder).run(metrics_path, checkpoint_path)
