"""Loss and value functions for every adversarial objective plus the encoder loss.

Expectations are estimated with per-batch arithmetic means.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LOG_EPS = 1e-7
GRAD_NORM_EPS = 1e-12
OBJECTIVES = ("standard", "nonsaturating", "conditional", "infogan", "wgan_gp")


@dataclass(frozen=True)
class LossConfig:
    objective: str = "standard"
    lambda_gp: float = 10.0
    lambda_i: float = 1.0
    log_eps: float = LOG_EPS
    saturating: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.objective == "wgan_gp" and not self.lambda_gp > 0:
            raise ConfigError("wgan_gp needs lambda_gp > 0")
        if self.objective == "infogan" and self.lambda_i < 0:
            raise ConfigError("infogan needs lambda_i >= 0")
        if not 0 < self.log_eps <= 1e-3:
            raise ConfigError("log_eps must lie in (0, 1e-3]")


def _clamp(p, eps):
    return T.clip(p, eps, 1.0 - eps)


def loss_d_standard(d_real, d_fake, eps=LOG_EPS):
    """-E[log D(x)] - E[log(1 - D(x_hat))] on clamped probabilities."""
    real = T.mean(T.neg(T.log(_clamp(d_real, eps))))
    fake = T.mean(T.neg(T.log(T.sub(1.0, _clamp(d_fake, eps)))))
    return T.add(real, fake)


def loss_g(d_fake, variant="nonsaturating", eps=LOG_EPS):
    """Saturating: E[log(1 - D(x_hat))]. Non-saturating: -E[log D(x_hat)]."""
    p = _clamp(d_fake, eps)
    if variant == "saturating":
        return T.mean(T.log(T.sub(1.0, p)))
    if variant == "nonsaturating":
        return T.mean(T.neg(T.log(p)))
    raise ConfigError(f"unknown generator loss variant {variant!r}")


def gan_losses(disc, gen_out, x_real, y=None, variant="nonsaturating", train=True, eps=LOG_EPS):
    """Forward D on real and generated batches and return (loss_d, loss_g)."""
    d_real = disc(x_real, y, train=train)
    d_fake = disc(gen_out, y, train=train)
    return loss_d_standard(d_real, d_fake, eps), loss_g(d_fake, variant, eps)


def conditional_wrap(loss_fn, y):
    """Bind labels ``y`` so every D/G forward inside ``loss_fn`` is conditioned.

    ``loss_fn`` must accept a ``y`` keyword. An empty (N, 0) label block gives
    back the unconditional loss.
    """
    if y is None:
        raise ConfigError("conditional objective needs a label for every sample")
    y = T.as_tensor(y)
    if y.ndim != 2:
        raise ShapeError(f"labels must be (N, label_dim), got {y.shape}")
    cond = None if y.shape[1] == 0 else y

    def wrapped(*args, **kwargs):
        return loss_fn(*args, y=cond, **kwargs)

    return wrapped


def info_lower_bound(q_out, code_heads, c_onehot=None, c_cont=None, eps=LOG_EPS):
    """Monte-Carlo estimate of E[log Q(c | x_hat)].

    ``q_out`` is laid out as ``code_heads``: softmax blocks for categorical
    codes, then predicted means of a unit-variance Gaussian for continuous
    codes. Returns (L_I, categorical_term, continuous_term).
    """
    q_out = T.as_tensor(q_out)
    lo = cat_lo = 0
    cat_term = cont_term = None
    for kind, size in code_heads:
        block = q_out[:, lo:lo + size]
        if kind == "categorical":
            target = Tensor(c_onehot[:, cat_lo:cat_lo + size])
            ll = T.tsum(T.mul(target, T.log(_clamp(block, eps))), axis=1)
            term = T.mean(ll)
            cat_term = term if cat_term is None else T.add(cat_term, term)
            cat_lo += size
        else:
            diff = T.sub(Tensor(c_cont), block)
            ll = T.sub(T.mul(T.tsum(T.mul(diff, diff), axis=1), -0.5), 0.5 * size * math.log(2 * math.pi))
            cont_term = T.mean(ll)
        lo += size
    parts = [t for t in (cat_term, cont_term) if t is not None]
    total = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
    return total, cat_term, cont_term


def infogan_losses(loss_d, loss_gen, l_i, lambda_i):
    """D loss unchanged; the jointly minimised G+Q loss is loss_G - lambda_I * L_I."""
    return loss_d, T.sub(loss_gen, T.mul(l_i, float(lambda_i)))


def wgan_losses(c_real, c_fake):
    """(mean C(x_hat) - mean C(x), -mean C(x_hat))."""
    fake = T.mean(c_fake)
    return T.sub(fake, T.mean(c_real)), T.neg(fake)


def _check_critic(critic):
    spec = getattr(critic, "spec", None)
    if spec is not None and spec.has_norm:
        raise ConfigError("gradient penalty needs a critic without batch normalisation")


def gradient_penalty(critic, x, x_hat, eps, lambda_gp=10.0, cond=None):
    """lambda_gp * mean over samples of (||grad_x C(x_tilde)|| - 1)^2.

    x_tilde = eps * x + (1 - eps) * x_hat with one eps per sample. The result
    stays on the tape so its gradient reaches the critic parameters. Returns
    (penalty, per-sample gradient norms as a numpy array).
    """
    _check_critic(critic)
    x = T.as_tensor(x).data
    x_hat = T.as_tensor(x_hat).data
    if x.shape != x_hat.shape:
        raise ShapeError(f"real {x.shape} and generated {x_hat.shape} batches differ")
    e = np.asarray(eps, dtype=np.float64).reshape((-1,) + (1,) * (x.ndim - 1))
    x_tilde = Tensor(e * x + (1.0 - e) * x_hat, requires_grad=True)
    # the inner gradient needs a tape even when the caller disabled recording
    with T.enable_grad():
        # plain callables (closed-form critics) take just x
        out = critic(x_tilde, cond, train=True) if hasattr(critic, "spec") else critic(x_tilde)
        g = T.grad(T.tsum(out), x_tilde, create_graph=True)
        axes = tuple(range(1, g.ndim))
        norms = T.sqrt(T.add(T.tsum(T.mul(g, g), axis=axes), GRAD_NORM_EPS))
        dev = T.sub(norms, 1.0)
        penalty = T.mul(T.mean(T.mul(dev, dev)), float(lambda_gp))
    return penalty, norms.data.copy()


def encoder_loss_l1(x, recon):
    """Per-sample mean absolute pixel error, averaged over the batch."""
    x, recon = T.as_tensor(x), T.as_tensor(recon)
    if x.shape != recon.shape:
        raise ShapeError(f"reconstruction {recon.shape} does not match input {x.shape}")
    return T.mean(T.absolute(T.sub(recon, x)))
