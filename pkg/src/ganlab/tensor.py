"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a vector-Jacobian product written in terms
of other ``Tensor`` ops. Running the backward sweep with ``create_graph=True``
therefore records the gradient computation itself, which is what the
gradient penalty needs (the gradient of a gradient norm).
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import DegenerateBatchError, NumericError, ParameterError, ShapeError

# Monotone creation counter. Inputs of an op are always created before its
# output, so sorting by it gives a valid topological order for the sweep.
_next_id = itertools.count()
_grad_enabled = True
_check_finite = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def enable_grad(flag=True):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(flag: bool) -> bool:
    """Toggle the per-op NaN/Inf check. Returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(flag)
    return prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._id = next(_next_id)
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"expected a single element, got shape {self.shape}")

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- differentiation ----------------------------------------------------
    def backward(self, grad_output=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        leaves = [t for t in _topo(self) if t._vjp is None]
        grads = _sweep(self, grad_output, create_graph=False)
        for leaf in leaves:
            g = grads.get(leaf._id)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.array(g.data, dtype=np.float64)
            else:
                leaf.grad = leaf.grad + g.data

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    if _check_finite and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_next_id)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _topo(root):
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def _sweep(root, grad_output, create_graph):
    if grad_output is None:
        seed = Tensor(np.ones_like(root.data))
    else:
        seed = as_tensor(grad_output)
        if seed.shape != root.shape:
            raise ShapeError(f"grad_output shape {seed.shape} != output shape {root.shape}")
    grads = {root._id: seed}
    with enable_grad(create_graph):
        for node in _topo(root):
            g = grads.get(node._id)
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else add(prev, pg)
    return grads


def grad(output, inputs, grad_output=None, create_graph=False):
    """Gradients of ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors are themselves part of
    the tape and can be differentiated again. Unreached inputs get zeros.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None and output.data.size != 1:
        raise ShapeError(f"grad() of a non-scalar output {output.shape} needs grad_output")
    if output.requires_grad:
        grads = _sweep(output, grad_output, create_graph)
    else:
        grads = {}
    result = []
    for t in inputs:
        g = grads.get(t._id)
        result.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return result[0] if single else result


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _sum_to_np(a, shape):
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = list(range(lead))
    axes += [i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1]
    return a.sum(axis=tuple(axes), keepdims=True).reshape(shape)


def sum_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _make(_sum_to_np(x.data, shape), (x,), lambda g: (broadcast_to(g, x.shape),), "sum_to")


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = np.array(np.broadcast_to(x.data, shape))
    return _make(data, (x,), lambda g: (sum_to(g, x.shape),), "broadcast_to")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    if p == 1.0:
        return a

    def vjp(g):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(a.data ** p, (a,), vjp, "pow")


def exp(a):
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), vjp, "exp")
    return out


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a):
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (div(mul(g, 0.5), out),)

    out = _make(np.sqrt(a.data), (a,), vjp, "sqrt")
    return out


def absolute(a):
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),), "abs")


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),), "clip")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def leaky_relu(a, alpha=0.2):
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    a = as_tensor(a)
    # slope at exactly 0 is alpha
    slope = Tensor(np.where(a.data > 0, 1.0, alpha))
    return _make(a.data * slope.data, (a,), lambda g: (mul(g, slope),), "leaky_relu")


def tanh(a):
    a = as_tensor(a)
    out = None

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), (a,), vjp, "tanh")
    return out


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = None

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(y, (a,), vjp, "sigmoid")
    return out


def activation(x, kind, alpha=0.2):
    if kind == "relu":
        return relu(x)
    if kind in ("lrelu", "leaky_relu"):
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("linear", "none", None):
        return as_tensor(x)
    raise ParameterError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(np.array(a.data.sum(axis=axes, keepdims=keepdims)), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    if data.shape == a.shape:
        return a
    return _make(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,),
                 lambda g: (transpose(g, inv),), "transpose")


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a, idx):
    a = as_tensor(a)
    return _make(np.array(a.data[idx]), (a,), lambda g: (_scatter(g, a.shape, idx),), "getitem")


def _scatter(g, shape, idx):
    """Adjoint of indexing: place ``g`` at ``idx`` inside zeros of ``shape``."""
    g = as_tensor(g)
    z = np.zeros(shape)
    np.add.at(z, idx, g.data)
    return _make(z, (g,), lambda gg: (getitem(gg, idx),), "scatter")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(data, tuple(ts), vjp, "concat")


def flatten(a):
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_conv_params(stride, pad):
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"padding must be >= 0, got {pad}")


def _im2col_np(x, kh, kw, stride, pad, ho, wo):
    """Patches of ``x`` as a (C*kh*kw, N*ho*wo) matrix; columns ordered (n, row, col)."""
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im_np(cols, shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))


def im2col(x, kh, kw, stride, pad, out_hw):
    x = as_tensor(x)
    shape = x.shape
    ho, wo = out_hw
    data = _im2col_np(x.data, kh, kw, stride, pad, ho, wo)
    return _make(data, (x,), lambda g: (col2im(g, shape, kh, kw, stride, pad, out_hw),), "im2col")


def col2im(cols, shape, kh, kw, stride, pad, out_hw):
    cols = as_tensor(cols)
    ho, wo = out_hw
    data = _col2im_np(cols.data, shape, kh, kw, stride, pad, ho, wo)
    return _make(data, (cols,), lambda g: (im2col(g, kh, kw, stride, pad, out_hw),), "col2im")


def conv2d(x, k, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``k`` (F,C,kh,kw)."""
    x, k = as_tensor(x), as_tensor(k)
    _check_conv_params(stride, pad)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {k.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad, (ho, wo))
    out = matmul(reshape(k, (f, c * kh * kw)), cols)
    return transpose(reshape(out, (f, n, ho, wo)), (1, 0, 2, 3))


def conv2d_transpose(y, k, stride=1, pad=0, output_padding=0):
    """Linear adjoint of :func:`conv2d` with the same kernel, stride and pad.

    ``y`` is (N,F,H',W') and ``k`` is (F,C,kh,kw); the result is (N,C,H,W)
    with H = (H'-1)*stride - 2*pad + kh + output_padding.
    """
    y, k = as_tensor(y), as_tensor(k)
    _check_conv_params(stride, pad)
    if not 0 <= output_padding < stride:
        raise ParameterError(f"output_padding must lie in [0, stride), got {output_padding}")
    if y.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input and kernel, got {y.shape}, {k.shape}")
    n, f, ho, wo = y.shape
    kf, c, kh, kw = k.shape
    if kf != f:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {f}, kernel {kf}")
    h = (ho - 1) * stride - 2 * pad + kh + output_padding
    w = (wo - 1) * stride - 2 * pad + kw + output_padding
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d_transpose output would be empty ({h}x{w})")
    kmat = swap_last(reshape(k, (f, c * kh * kw)))
    cols = matmul(kmat, reshape(transpose(y, (1, 0, 2, 3)), (f, n * ho * wo)))
    return col2im(cols, (n, c, h, w), kh, kw, stride, pad, (ho, wo))


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def batchnorm(x, gamma, beta, running_mean, running_var, train=True, eps=1e-5, momentum=0.1):
    """Per-channel batch normalisation for (N,C) or (N,C,H,W) input.

    ``running_mean`` and ``running_var`` are numpy arrays updated in place
    in train mode.
    """
    x = as_tensor(x)
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    if train:
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm in train mode needs a batch of at least 2")
        mu = mean(x, axes, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axes, keepdims=True)
        xhat = div(centered, sqrt(add(var, eps)))
        count = x.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(-1) * count / max(count - 1, 1)
    else:
        mu = Tensor(running_mean.reshape(bshape))
        inv = Tensor(1.0 / np.sqrt(running_var.reshape(bshape) + eps))
        xhat = mul(sub(x, mu), inv)
    return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape))


def l2_norm(x, axis=-1, keepdims=False, eps=0.0):
    """sqrt(sum(x**2) + eps) along ``axis``."""
    sq = tsum(mul(x, x), axis=axis, keepdims=keepdims)
    return sqrt(add(sq, eps)) if eps else sqrt(sq)
