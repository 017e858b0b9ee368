"""Central finite-difference oracle for checking analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn, arrays, h=1e-5):
    """d fn / d array for every array in ``arrays`` by central differences.

    ``fn`` takes a list of numpy arrays and returns a float. It is evaluated
    on raw arrays only, so the oracle never touches the tape.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def tensor_fn(build):
    """Wrap ``build(*tensors) -> scalar Tensor`` as an array -> float function."""
    def fn(arrays):
        with no_grad():
            return float(build(*[Tensor(a) for a in arrays]).data)
    return fn


def analytic_grad(build, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def check_grad(build, arrays, h=1e-5, rtol=1e-4, atol=1e-8):
    """Compare tape gradients of ``build`` against finite differences.

    Returns (ok, max_abs_err) and never raises on mismatch.
    """
    num = numeric_grad(tensor_fn(build), arrays, h)
    ana = analytic_grad(build, arrays)
    ok = True
    worst = 0.0
    for a, n in zip(ana, num):
        worst = max(worst, float(np.max(np.abs(a - n), initial=0.0)))
        ok &= bool(np.allclose(a, n, rtol=rtol, atol=atol))
    return ok, worst
