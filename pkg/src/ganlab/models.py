"""Declarative layer stacks for the generator, discriminator/critic, encoder and Q head."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import BuildError, ConfigError, ShapeError
from .rng import RngStream
from .tensor import Tensor

LRELU_SLOPE = 0.2
INIT_STD = 0.02


@dataclass(frozen=True)
class Layer:
    kind: str                      # "fc", "conv" or "tconv"
    out: int                       # units or output channels
    kernel: int = 5
    stride: int = 2
    pad: int = 2
    output_padding: int = 0
    norm: bool = False
    act: str = "linear"
    reshape: tuple | None = None   # fc only: reshape output to (C, H, W)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    cond_dim: int = 0
    heads: tuple = ()              # encoder/Q output slices: (kind, size) pairs
    alpha: float = LRELU_SLOPE

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        layers = tuple(Layer(**{**l, "reshape": tuple(l["reshape"]) if l["reshape"] else None})
                       for l in d["layers"])
        heads = tuple((k, int(n)) for k, n in d.get("heads", ()))
        return cls(d["name"], tuple(d["input_shape"]), layers, d.get("cond_dim", 0), heads,
                   d.get("alpha", LRELU_SLOPE))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def has_norm(self):
        return any(layer.norm for layer in self.layers)

    def shapes(self):
        """Per-layer (input shape incl. condition, output shape); raises BuildError."""
        out = []
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == "fc":
                fan_in = int(np.prod(shape)) + self.cond_dim
                in_shape = (fan_in,)
                res = (layer.out,)
                if layer.reshape:
                    if int(np.prod(layer.reshape)) != layer.out:
                        raise BuildError(f"{self.name} layer {i}: reshape {layer.reshape} != {layer.out} units")
                    res = tuple(layer.reshape)
            elif layer.kind in ("conv", "tconv"):
                if len(shape) != 3:
                    raise BuildError(f"{self.name} layer {i}: {layer.kind} needs (C,H,W) input, got {shape}")
                c, h, w = shape
                in_shape = (c + self.cond_dim, h, w)
                k, s, p = layer.kernel, layer.stride, layer.pad
                if layer.kind == "conv":
                    if k > h + 2 * p or k > w + 2 * p:
                        raise BuildError(f"{self.name} layer {i}: kernel {k} exceeds padded input {h}x{w}")
                    res = (layer.out, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
                else:
                    op = layer.output_padding
                    res = (layer.out, (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op)
                    if min(res[1:]) < 1:
                        raise BuildError(f"{self.name} layer {i}: empty transposed-conv output")
            else:
                raise BuildError(f"{self.name} layer {i}: unknown layer kind {layer.kind!r}")
            out.append((in_shape, res))
            shape = res
        if self.heads and (len(shape) != 1 or sum(n for _, n in self.heads) != shape[0]):
            raise BuildError(f"{self.name}: heads {self.heads} do not cover output {shape}")
        return out

    @property
    def output_shape(self):
        return self.shapes()[-1][1]

    def param_shapes(self):
        shapes = {}
        for i, ((in_shape, out_shape), layer) in enumerate(zip(self.shapes(), self.layers)):
            if layer.kind == "fc":
                shapes[f"{i}.weight"] = (in_shape[0], layer.out)
            elif layer.kind == "conv":
                shapes[f"{i}.weight"] = (layer.out, in_shape[0], layer.kernel, layer.kernel)
            else:
                shapes[f"{i}.weight"] = (in_shape[0], layer.out, layer.kernel, layer.kernel)
            channels = out_shape[0]
            if layer.norm:
                shapes[f"{i}.gamma"] = (channels,)
                shapes[f"{i}.beta"] = (channels,)
            else:
                shapes[f"{i}.bias"] = (channels,)
        return shapes

    def num_params(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


@dataclass(frozen=True)
class LatentSpec:
    z_dim: int = 64
    r: float = 1.0
    categorical: tuple = ()
    continuous: int = 0
    label_dim: int = 0

    def __post_init__(self):
        if self.z_dim < 1:
            raise ConfigError("z_dim must be >= 1")
        if self.r <= 0:
            raise ConfigError("latent range r must be positive")
        object.__setattr__(self, "categorical", tuple(int(k) for k in self.categorical))

    @property
    def code_dim(self):
        return sum(self.categorical) + self.continuous

    @property
    def generator_input_dim(self):
        return self.z_dim + self.code_dim

    @property
    def encoder_dim(self):
        return self.z_dim + self.code_dim + self.label_dim

    def code_heads(self):
        return tuple(("categorical", k) for k in self.categorical) + (
            (("continuous", self.continuous),) if self.continuous else ())

    def encoder_heads(self):
        heads = (("z", self.z_dim),) + self.code_heads()
        return heads + ((("label", self.label_dim),) if self.label_dim else ())


def scaled(channels, scale):
    """Channel count under the desk-scale factor: floor, never below 4."""
    return max(4, math.floor(channels * scale + 1e-9))


# ---------------------------------------------------------------------------
# architecture builders
# ---------------------------------------------------------------------------

def _up(out, norm, act):
    return Layer("tconv", out, kernel=5, stride=2, pad=2, output_padding=1, norm=norm, act=act)


def _down(out, norm, act="lrelu"):
    return Layer("conv", out, kernel=5, stride=2, pad=2, norm=norm, act=act)


def generator_spec(latent: LatentSpec, image_shape, scale=1.0) -> ModelSpec:
    """Transposed-conv generator ending in tanh.

    64x64 images use the four-upsampling stack (4x4x512 start); anything with
    side divisible by 4 uses the two-upsampling stack (side/4 start, 128 ch).
    """
    c, h, w = image_shape
    if h != w:
        raise BuildError(f"generator needs square images, got {h}x{w}")
    if h == 64:
        chans = [scaled(x, scale) for x in (512, 256, 128, 64)]
        base = 4
    elif h % 4 == 0:
        chans = [scaled(128, scale)] * 2
        base = h // 4
    else:
        raise BuildError(f"no generator layout for {h}x{w} images")
    layers = [Layer("fc", chans[0] * base * base, norm=True, act="relu", reshape=(chans[0], base, base))]
    layers += [_up(ch, True, "relu") for ch in chans[1:]]
    layers.append(_up(c, False, "tanh"))
    spec = ModelSpec("generator", (latent.generator_input_dim,), tuple(layers), latent.label_dim)
    if spec.output_shape != tuple(image_shape):
        raise BuildError(f"generator output {spec.output_shape} != image shape {tuple(image_shape)}")
    return spec


def discriminator_spec(image_shape, mode="standard", scale=1.0, depth=4, cond_dim=0) -> ModelSpec:
    """Strided-conv discriminator. Critic mode drops batchnorm and the sigmoid."""
    if mode not in ("standard", "critic"):
        raise BuildError(f"unknown discriminator mode {mode!r}")
    if not 1 <= depth <= 4:
        raise BuildError("discriminator depth must be in 1..4")
    norm_ok = mode == "standard"
    chans = [scaled(x, scale) for x in (64, 128, 256, 512)][:depth]
    layers = [_down(ch, norm_ok and i > 0) for i, ch in enumerate(chans)]
    layers.append(Layer("fc", 1, act="sigmoid" if mode == "standard" else "linear"))
    spec = ModelSpec("discriminator" if mode == "standard" else "critic", tuple(image_shape), tuple(layers), cond_dim)
    spec.shapes()
    return spec


def encoder_spec(image_shape, latent: LatentSpec, scale=1.0, depth=4) -> ModelSpec:
    chans = [scaled(x, scale) for x in (64, 128, 256, 512)][:depth]
    layers = [_down(ch, i > 0) for i, ch in enumerate(chans)]
    layers.append(Layer("fc", latent.encoder_dim, act="linear"))
    spec = ModelSpec("encoder", tuple(image_shape), tuple(layers), 0, latent.encoder_heads())
    spec.shapes()
    return spec


def mlp_spec(name, in_dim, out_dim, hidden=128, n_hidden=3, act="relu", final_act="linear", cond_dim=0):
    layers = [Layer("fc", hidden, act=act) for _ in range(n_hidden)]
    layers.append(Layer("fc", out_dim, act=final_act))
    return ModelSpec(name, (in_dim,), tuple(layers), cond_dim)


def q_head_spec(feature_dim, latent: LatentSpec, hidden=128) -> ModelSpec:
    if latent.code_dim == 0:
        raise BuildError("Q head needs at least one latent code dimension")
    layers = (Layer("fc", hidden, act="lrelu"), Layer("fc", latent.code_dim, act="linear"))
    return ModelSpec("q_head", (feature_dim,), layers, 0, latent.code_heads())


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def concat_condition(h, cond):
    """Append a per-sample condition vector to an activation.

    Feature inputs get it appended along the feature axis; (N,C,H,W) inputs
    get one constant plane per condition entry.
    """
    if cond is None or cond.shape[-1] == 0:
        return h
    cond = T.as_tensor(cond)
    if cond.ndim != 2 or cond.shape[0] != h.shape[0]:
        raise ShapeError(f"condition shape {cond.shape} does not match batch of {h.shape}")
    if h.ndim == 2:
        return T.concat([h, cond], axis=1)
    if h.ndim == 4:
        n, _, hh, ww = h.shape
        planes = T.broadcast_to(T.reshape(cond, (n, cond.shape[1], 1, 1)), (n, cond.shape[1], hh, ww))
        return T.concat([h, planes], axis=1)
    raise ShapeError(f"cannot condition an activation of shape {h.shape}")


def apply_heads(out, heads):
    if not heads:
        return out
    parts, lo = [], 0
    for kind, size in heads:
        piece = out[:, lo:lo + size]
        if kind == "z":
            piece = T.tanh(piece)
        elif kind == "categorical":
            piece = T.softmax(piece, axis=1)
        parts.append(piece)
        lo += size
    return T.concat(parts, axis=1) if len(parts) > 1 else parts[0]


INIT_SCHEMES = ("normal", "fan_in")


def _weight_std(spec, name, shape, init):
    if init == "normal":
        return INIT_STD
    layer = spec.layers[int(name.split(".")[0])]
    if layer.kind == "fc":
        fan_in = shape[0]
    elif layer.kind == "conv":
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[0] * shape[2] * shape[3]
    # relu-family gain on hidden layers, unit gain on the output layer
    gain = 1.0 if name.split(".")[0] == str(len(spec.layers) - 1) else 2.0
    return math.sqrt(gain / fan_in)


class Network:
    """A built ModelSpec plus its parameters and batchnorm running statistics."""

    def __init__(self, spec: ModelSpec, params: dict, buffers: dict | None = None):
        self.spec = spec
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        self._shapes = spec.shapes()

    @classmethod
    def build(cls, spec: ModelSpec, rng: RngStream, init="normal"):
        """Fresh parameters: N(0, 0.02) weights ("normal") or He-scaled ones ("fan_in")."""
        if init not in INIT_SCHEMES:
            raise BuildError(f"unknown init scheme {init!r}")
        params, buffers = {}, {}
        for name, shape in spec.param_shapes().items():
            if name.endswith(".weight"):
                data = rng.normal(shape, std=_weight_std(spec, name, shape, init))
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, requires_grad=True)
            if name.endswith(".gamma"):
                idx = name.split(".")[0]
                buffers[f"{idx}.running_mean"] = np.zeros(shape)
                buffers[f"{idx}.running_var"] = np.ones(shape)
        return cls(spec, params, buffers)

    def parameters(self):
        return self.params

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def state_arrays(self):
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays):
        for k, p in self.params.items():
            if k not in arrays or arrays[k].shape != p.shape:
                raise ShapeError(f"{self.spec.name}: missing or mis-shaped parameter {k}")
            p.data = np.array(arrays[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[k], dtype=np.float64)

    def __call__(self, x, cond=None, train=True, return_features=False):
        return self.forward(x, cond, train, return_features)

    def forward(self, x, cond=None, train=True, return_features=False):
        spec = self.spec
        h = T.as_tensor(x)
        if h.shape[1:] != tuple(spec.input_shape):
            raise ShapeError(f"{spec.name}: input {h.shape[1:]} != expected {tuple(spec.input_shape)}")
        if spec.cond_dim:
            if cond is None or cond.shape != (h.shape[0], spec.cond_dim):
                raise ShapeError(f"{spec.name}: needs a ({h.shape[0]}, {spec.cond_dim}) condition")
        else:
            cond = None
        features = None
        last = len(spec.layers) - 1
        for i, layer in enumerate(spec.layers):
            if layer.kind == "fc" and h.ndim > 2:
                h = T.flatten(h)
            if i == last:
                features = h
            h = concat_condition(h, cond)
            w = self.params[f"{i}.weight"]
            if layer.kind == "fc":
                h = T.matmul(h, w)
            elif layer.kind == "conv":
                h = T.conv2d(h, w, layer.stride, layer.pad)
            else:
                h = T.conv2d_transpose(h, w, layer.stride, layer.pad, layer.output_padding)
            if layer.reshape:
                h = T.reshape(h, (h.shape[0],) + tuple(layer.reshape))
            if layer.norm:
                h = T.batchnorm(h, self.params[f"{i}.gamma"], self.params[f"{i}.beta"],
                                self.buffers[f"{i}.running_mean"], self.buffers[f"{i}.running_var"], train)
            else:
                b = self.params[f"{i}.bias"]
                h = T.add(h, T.reshape(b, (1, -1, 1, 1)) if h.ndim == 4 else b)
            h = T.activation(h, layer.act, spec.alpha)
        h = apply_heads(h, spec.heads)
        return (h, features) if return_features else h


class QHead:
    """Posterior head for latent codes, sharing every layer but the last with D."""

    def __init__(self, disc: Network, head: Network):
        self.disc = disc
        self.head = head
        self.spec = head.spec

    @classmethod
    def build(cls, disc: Network, latent: LatentSpec, rng: RngStream, hidden=128):
        feat_dim = disc._shapes[-1][0][0] - disc.spec.cond_dim
        return cls(disc, Network.build(q_head_spec(feat_dim, latent, hidden), rng))

    @property
    def params(self):
        return self.head.params

    def trunk_params(self):
        last = len(self.disc.spec.layers) - 1
        return {k: v for k, v in self.disc.params.items() if not k.startswith(f"{last}.")}

    def from_features(self, features, train=True):
        return self.head(features, train=train)

    def __call__(self, x, train=True):
        _, feats = self.disc(x, train=train, return_features=True)
        return self.head(feats, train=train)


def build_generator(spec: ModelSpec, rng: RngStream, init="normal") -> Network:
    # image generators end in tanh; the 2-D toy MLPs are allowed a linear head
    if len(spec.output_shape) == 3 and spec.layers[-1].act != "tanh":
        raise BuildError("image generator must end in tanh")
    return Network.build(spec, rng, init)


def build_discriminator(spec: ModelSpec, rng: RngStream, init="normal") -> Network:
    final = spec.layers[-1].act
    if spec.name == "critic" and (spec.has_norm or final != "linear"):
        raise BuildError("critic must have a linear head and no batch normalisation")
    if spec.name == "discriminator" and final != "sigmoid":
        raise BuildError("standard discriminator must end in sigmoid")
    return Network.build(spec, rng, init)


def build_encoder(spec: ModelSpec, rng: RngStream) -> Network:
    return Network.build(spec, rng)


def build_q_head(disc: Network, latent: LatentSpec, rng: RngStream) -> QHead:
    return QHead.build(disc, latent, rng)
