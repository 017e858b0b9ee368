"""Capsule discriminator: squash, prediction vectors and routing-by-agreement."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import BuildError, ParameterError, ShapeError
from .models import INIT_STD
from .rng import RngStream
from .tensor import Tensor

SQUASH_EPS = 1e-18


def squash(s, axis=-1):
    """Scale each vector to length |s|^2 / (1 + |s|^2), keeping its direction."""
    s = T.as_tensor(s)
    n2 = T.tsum(T.mul(s, s), axis=axis, keepdims=True)
    scale = T.div(n2, T.mul(T.add(n2, 1.0), T.sqrt(T.add(n2, SQUASH_EPS))))
    return T.mul(s, scale)


def predict(W, v_lower):
    """Prediction vectors u_hat[n, i, j] = W[i, j] @ v_lower[n, i].

    ``W`` is (I, J, d_out, d_in), ``v_lower`` is (N, I, d_in); the result is
    (N, I, J, d_out).
    """
    W, v = T.as_tensor(W), T.as_tensor(v_lower)
    if W.ndim != 4 or v.ndim != 3:
        raise ShapeError(f"predict expects W (I,J,do,di) and v (N,I,di), got {W.shape}, {v.shape}")
    i, j, d_out, d_in = W.shape
    if v.shape[1] != i or v.shape[2] != d_in:
        raise ShapeError(f"predict: v {v.shape} does not match W {W.shape}")
    n = v.shape[0]
    u = T.matmul(W, T.reshape(v, (n, i, 1, d_in, 1)))
    return T.reshape(u, (n, i, j, d_out))


@dataclass
class RoutingState:
    b: np.ndarray                    # final logits (N, I, J)
    c: np.ndarray                    # final coupling coefficients (N, I, J)
    u_hat: np.ndarray
    iterations: int
    history: list = field(default_factory=list)   # coupling coefficients per iteration


def dynamic_routing(u_hat, r=3):
    """Routing-by-agreement over prediction vectors ``u_hat`` (N, I, J, D).

    The loop is unrolled on the tape, so gradients flow through every
    iteration including the logit updates. Returns (v, RoutingState) with v
    of shape (N, J, D).
    """
    if r < 1:
        raise ParameterError(f"routing needs at least one iteration, got {r}")
    u = T.as_tensor(u_hat)
    if u.ndim == 3:
        u = T.reshape(u, (1,) + u.shape)
    n, i, j, _ = u.shape
    b = Tensor(np.zeros((n, i, j)))
    history = []
    v = c = None
    for _ in range(r):
        c = T.softmax(b, axis=2)
        history.append(c.data)
        s = T.tsum(T.mul(T.reshape(c, (n, i, j, 1)), u), axis=1)
        v = squash(s, axis=-1)
        agreement = T.tsum(T.mul(u, T.reshape(v, (n, 1, j, v.shape[-1]))), axis=3)
        b = T.add(b, agreement)
    state = RoutingState(b.data, c.data, u.data, r, history)
    return v, state


@dataclass(frozen=True)
class CapsuleSpec:
    """Conv -> primary capsules -> routed output capsules.

    Defaults are the full-size configuration: 128 9x9 filters, 32 channels
    of 8-D primary capsules (9x9, stride 2), one 16-D output capsule, 3
    routing iterations.
    """

    input_shape: tuple = (1, 28, 28)
    conv_filters: int = 128
    conv_kernel: int = 9
    primary_channels: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    out_caps: int = 1
    out_dim: int = 16
    routing_iters: int = 3
    name: str = "capsule_discriminator"

    @classmethod
    def desk(cls, input_shape=(1, 8, 8)):
        """Small config for 8x8 images: 32 filters, 8 capsule channels, 3x3 kernels."""
        return cls(tuple(input_shape), conv_filters=32, conv_kernel=3, primary_channels=8,
                   primary_kernel=3)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def has_norm(self):
        return False

    def grid(self):
        c, h, w = self.input_shape
        h1, w1 = h - self.conv_kernel + 1, w - self.conv_kernel + 1
        if min(h1, w1) < self.primary_kernel:
            raise BuildError(f"capsule config does not fit {h}x{w} input")
        k, s = self.primary_kernel, self.primary_stride
        return (h1 - k) // s + 1, (w1 - k) // s + 1

    @property
    def num_lower(self):
        gh, gw = self.grid()
        return self.primary_channels * gh * gw

    def param_shapes(self):
        c = self.input_shape[0]
        return {
            "conv.weight": (self.conv_filters, c, self.conv_kernel, self.conv_kernel),
            "conv.bias": (self.conv_filters,),
            "primary.weight": (self.primary_channels * self.primary_dim, self.conv_filters,
                               self.primary_kernel, self.primary_kernel),
            "primary.bias": (self.primary_channels * self.primary_dim,),
            "route.W": (self.num_lower, self.out_caps, self.out_dim, self.primary_dim),
        }


class CapsuleDiscriminator:
    """D(x) is the length of the single output capsule, a value in (0, 1)."""

    def __init__(self, spec: CapsuleSpec, params: dict):
        self.spec = spec
        self.params = params
        self.buffers = {}
        self.last_routing: RoutingState | None = None

    @classmethod
    def build(cls, spec: CapsuleSpec, rng: RngStream):
        params = {}
        for name, shape in spec.param_shapes().items():
            data = np.zeros(shape) if name.endswith(".bias") else rng.normal(shape, std=INIT_STD)
            params[name] = Tensor(data, requires_grad=True)
        return cls(spec, params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            if k not in arrays or arrays[k].shape != p.shape:
                raise ShapeError(f"capsule discriminator: missing or mis-shaped parameter {k}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def capsules(self, x):
        """Output capsule vectors (N, J, D) and the routing state."""
        spec = self.spec
        x = T.as_tensor(x)
        if x.shape[1:] != tuple(spec.input_shape):
            raise ShapeError(f"capsule discriminator: input {x.shape[1:]} != {spec.input_shape}")
        p = self.params
        h = T.conv2d(x, p["conv.weight"], 1, 0)
        h = T.relu(T.add(h, T.reshape(p["conv.bias"], (1, -1, 1, 1))))
        u = T.conv2d(h, p["primary.weight"], spec.primary_stride, 0)
        u = T.add(u, T.reshape(p["primary.bias"], (1, -1, 1, 1)))
        n, _, gh, gw = u.shape
        # channel index = capsule_channel * dim + component; each grid cell is its own capsule
        u = T.reshape(u, (n, spec.primary_channels, spec.primary_dim, gh, gw))
        u = T.transpose(u, (0, 1, 3, 4, 2))
        u = squash(T.reshape(u, (n, spec.num_lower, spec.primary_dim)), axis=-1)
        u_hat = predict(p["route.W"], u)
        v, state = dynamic_routing(u_hat, spec.routing_iters)
        self.last_routing = state
        return v, state

    def forward(self, x, cond=None, train=True, return_features=False):
        if cond is not None and cond.shape[-1]:
            raise ShapeError("the capsule discriminator does not take a condition")
        v, _ = self.capsules(x)
        length = T.sqrt(T.add(T.tsum(T.mul(v, v), axis=2), SQUASH_EPS))
        out = length[:, :1]
        return (out, None) if return_features else out

    __call__ = forward


def capsule_discriminator_forward(disc: CapsuleDiscriminator, image):
    return disc.forward(image)
